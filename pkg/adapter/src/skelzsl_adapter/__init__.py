"""Bridge from pretrained text/skeleton encoders to the DPT1 dataset format."""

from .export import (
    ClassEntry,
    ExportJob,
    SampleEntry,
    build_prompt,
    export_dataset,
    export_text_anchors,
    export_visual_features,
    load_job,
)
from .wire import write_manifest, write_tensor

__version__ = "0.1.0"
