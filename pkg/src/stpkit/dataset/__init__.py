from .imaging import (
    LOCAL_PATCH_SIZE,
    THUMBNAIL_SIZE,
    ImagingError,
    crop_local,
    load_image,
    save_image_png,
    thumbnail,
)
from .manifest import image_path, load_manifest, save_manifest
from .split import SplitError, SplitResult, round_half_up, split
from .synth import GLOBAL_CUE_INTERIOR, RING_PX, SynthesisError, generate_synthetic, interior_box
from .types import (
    Box,
    DatasetManifest,
    FrameRecord,
    ManifestError,
    ScoredBox,
    SplitConfig,
    StpAnnotation,
    SynthConfig,
    ValidationError,
)

__all__ = [
    "Box",
    "DatasetManifest",
    "FrameRecord",
    "GLOBAL_CUE_INTERIOR",
    "ImagingError",
    "LOCAL_PATCH_SIZE",
    "ManifestError",
    "RING_PX",
    "ScoredBox",
    "SplitConfig",
    "SplitError",
    "SplitResult",
    "StpAnnotation",
    "SynthConfig",
    "SynthesisError",
    "THUMBNAIL_SIZE",
    "ValidationError",
    "crop_local",
    "generate_synthetic",
    "image_path",
    "interior_box",
    "load_image",
    "load_manifest",
    "round_half_up",
    "save_image_png",
    "save_manifest",
    "split",
    "thumbnail",
]
