"""DCGLR: self-supervised point-cloud representation learning.

Thin Python facade over the C++ core. When the compiled extension is not on
the default path (e.g. running from a build tree), set DCGLR_MODULE_DIR to
the directory containing the `_dcglr` shared object.
"""

import os
import sys

_module_dir = os.environ.get("DCGLR_MODULE_DIR")
if _module_dir and _module_dir not in sys.path:
    sys.path.insert(0, _module_dir)

from _dcglr import (  # noqa: E402,F401
    crop,
    export_attention,
    extract_features,
    fps,
    knn,
    linear_probe,
    normalize,
    pretrain,
    read_pcb,
    sample_off,
    spectrum,
    synth_classes,
    synth_cloud,
    synth_dataset,
    write_pcb,
)

__all__ = [
    "crop",
    "export_attention",
    "extract_features",
    "fps",
    "knn",
    "linear_probe",
    "normalize",
    "pretrain",
    "read_pcb",
    "sample_off",
    "spectrum",
    "synth_classes",
    "synth_cloud",
    "synth_dataset",
    "write_pcb",
]
