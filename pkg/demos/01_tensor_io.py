"""Walk through the binary tensor container and a dataset manifest.

Run from the repository root after `pip install -e .`:

    python demos/01_tensor_io.py
"""

import json
import tempfile
from pathlib import Path

import numpy as np

from skelzsl import load_manifest, load_tensor, save_tensor, validate_dataset

workdir = Path(tempfile.mkdtemp(prefix="skelzsl_demo_"))
print(f"working in {workdir}\n")

# --- a tensor round trip ------------------------------------------------
arr = np.linspace(0.0, 1.0, 12).reshape(3, 4)
path = workdir / "example.dpt"
save_tensor(arr, path)
raw = path.read_bytes()
print(f"wrote {path.name}: {len(raw)} bytes "
      f"(magic={raw[:4]!r}, dtype code={raw[4]}, rank={raw[5]})")
back = load_tensor(path)
print("round trip bit-exact:", np.array_equal(back, arr))

# float32 works too, and the header layout is fixed: the 2x2 identity in
# float32 is always exactly 40 bytes
save_tensor(np.eye(2, dtype=np.float32), workdir / "eye.dpt")
print("float32 2x2 identity file size:", (workdir / "eye.dpt").stat().st_size)

# --- malformed files are rejected with a named reason -------------------
bad = workdir / "bad.dpt"
bad.write_bytes(b"NOPE" + raw[4:])
try:
    load_tensor(bad)
except ValueError as e:
    print("corrupt file rejected:", e)

# --- a minimal manifest --------------------------------------------------
labels = ["global", "bp_1", "bp_2", "ti_1"]
manifest = {
    "classes": [
        {"id": c, "name": f"action_{c}", "descriptions": [f"c{c} {l}" for l in labels]}
        for c in range(3)
    ],
    "split": {"seen": [0, 1], "unseen": [2]},
    "granularities": labels,
    "anchors": "anchors.dpt",
    "samples": [{"id": "clip0", "class": 0, "features": "clip0.dpt"}],
    "dims": {"C": 3, "Gr": 4, "d": 8, "S": 6, "n": 5},
}
(workdir / "manifest.json").write_text(json.dumps(manifest, indent=2))
rng = np.random.default_rng(0)
save_tensor(rng.normal(size=(3, 4, 8)), workdir / "anchors.dpt")
save_tensor(rng.normal(size=(6, 5)), workdir / "clip0.dpt")

m = load_manifest(workdir / "manifest.json")
ds = validate_dataset(m)
print(f"\nmanifest validated: {len(m.class_records)} classes, "
      f"granularities {m.granularity_labels}")
print("anchor tensor shape:", ds.anchor_tensor().shape)
print("sample feature shape:", ds.features("clip0").shape)
