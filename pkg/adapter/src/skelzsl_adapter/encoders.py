"""Text and skeleton encoders behind a common lookup.

Two text encoders ship by default: a deterministic hashed-ngram featurizer
that works offline at any output width, and a CLIP wrapper (optional
dependency) for real 512-dimensional embeddings. Skeleton features come
either from precomputed per-sample arrays (.npy, the usual hand-off from a
backbone inference job) or from a TorchScript checkpoint when torch is
installed.
"""

from __future__ import annotations

import hashlib
from pathlib import Path

import numpy as np


class HashedNgramTextEncoder:
    """Deterministic bag-of-ngrams embedding, L2-normalized.

    Not a semantic model: it exists so export pipelines and their tests run
    without network access, while exercising the exact same wire format.
    """

    name = "hashed-ngram"

    def __init__(self, dim: int = 512, ngram: int = 3):
        if dim < 1:
            raise ValueError("dim must be positive")
        self.dim = dim
        self.ngram = ngram

    def encode(self, texts: list[str]) -> np.ndarray:
        out = np.zeros((len(texts), self.dim))
        for row, text in enumerate(texts):
            padded = f"  {text.lower()}  "
            for i in range(len(padded) - self.ngram + 1):
                token = padded[i:i + self.ngram].encode()
                digest = hashlib.blake2b(token, digest_size=8).digest()
                bucket = int.from_bytes(digest[:4], "little") % self.dim
                sign = 1.0 if digest[4] % 2 == 0 else -1.0
                out[row, bucket] += sign
        norms = np.linalg.norm(out, axis=1, keepdims=True)
        if (norms == 0).any():
            raise ValueError("text produced an empty embedding")
        return out / norms


class ClipTextEncoder:
    """CLIP text tower via transformers; requires the clip extra."""

    name = "clip-vit-b32"

    def __init__(self, model_name: str = "openai/clip-vit-base-patch32"):
        try:
            import torch
            from transformers import CLIPTextModelWithProjection, CLIPTokenizer
        except ImportError as e:  # pragma: no cover - optional dependency
            raise RuntimeError(
                "clip text encoding needs the [clip] extra (torch + transformers)"
            ) from e
        self._torch = torch
        self.tokenizer = CLIPTokenizer.from_pretrained(model_name)
        self.model = CLIPTextModelWithProjection.from_pretrained(model_name).eval()
        self.dim = int(self.model.config.projection_dim)

    def encode(self, texts: list[str]) -> np.ndarray:  # pragma: no cover
        with self._torch.no_grad():
            tokens = self.tokenizer(texts, padding=True, return_tensors="pt")
            emb = self.model(**tokens).text_embeds.numpy().astype(np.float64)
        return emb / np.linalg.norm(emb, axis=1, keepdims=True)


class PrecomputedFeatureReader:
    """Skeleton 'encoder' that reads backbone outputs from .npy files."""

    name = "npy-passthrough"

    def __init__(self, feature_dim: int):
        self.feature_dim = feature_dim

    def encode(self, source: str | Path) -> np.ndarray:
        arr = np.load(source)
        if arr.ndim != 2 or arr.shape[1] != self.feature_dim:
            raise ValueError(
                f"{source}: expected (S, {self.feature_dim}) features, got {arr.shape}"
            )
        return np.asarray(arr, dtype=np.float64)


class TorchScriptSkeletonEncoder:
    """Runs a TorchScript backbone over raw skeleton arrays."""

    name = "torchscript"

    def __init__(self, checkpoint: str | Path, feature_dim: int):
        try:
            import torch
        except ImportError as e:  # pragma: no cover - optional dependency
            raise RuntimeError("torchscript encoding needs torch installed") from e
        self._torch = torch
        self.module = torch.jit.load(str(checkpoint)).eval()
        self.feature_dim = feature_dim

    def encode(self, source: str | Path) -> np.ndarray:  # pragma: no cover
        raw = np.load(source)
        with self._torch.no_grad():
            out = self.module(self._torch.as_tensor(raw, dtype=self._torch.float32))
        arr = out.numpy().astype(np.float64)
        if arr.ndim != 2 or arr.shape[1] != self.feature_dim:
            raise ValueError(f"backbone emitted {arr.shape}, expected (S, {self.feature_dim})")
        return arr


def text_encoder(name: str, dim: int):
    if name == HashedNgramTextEncoder.name:
        return HashedNgramTextEncoder(dim=dim)
    if name == ClipTextEncoder.name:
        return ClipTextEncoder()
    raise ValueError(f"unknown text encoder: {name}")


def skeleton_encoder(name: str, feature_dim: int, checkpoint: str | None = None):
    if name == PrecomputedFeatureReader.name:
        return PrecomputedFeatureReader(feature_dim)
    if name == TorchScriptSkeletonEncoder.name:
        if checkpoint is None:
            raise ValueError("torchscript encoder needs a checkpoint path")
        return TorchScriptSkeletonEncoder(checkpoint, feature_dim)
    raise ValueError(f"unknown skeleton encoder: {name}")
