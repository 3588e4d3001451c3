"""Token compression for whole-slide tile features."""

__version__ = "0.1.0"

from .errors import *  # noqa: F401,F403
from .slide_io import (  # noqa: F401
    PackedBatch,
    SyntheticSlideSpec,
    Template,
    TileFeatureSet,
    ToyVqaSample,
    generate_toy_vqa,
    load_slide,
    pack_batch,
    save_slide,
    synthesize_corpus,
    synthesize_slide,
)
