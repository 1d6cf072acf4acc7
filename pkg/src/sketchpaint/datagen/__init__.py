"""Four-tuple dataset preparation: mask ladder, partial masking, partial sketches."""
from .corpus import InstanceSample, read_corpus, synth_corpus, write_corpus
from .masks import DIRECTIONS, bezier_partial_mask, blend_masks, dilate_mask, mask_ladder
from .pipeline import DatagenConfig, FourTuple, build_four_tuple, generate, read_manifest, write_dataset
from .sketch import canny_sketch, partial_sketch, register_sketch_generator

__all__ = [
    "DIRECTIONS", "DatagenConfig", "FourTuple", "InstanceSample", "bezier_partial_mask",
    "blend_masks", "build_four_tuple", "canny_sketch", "dilate_mask", "generate", "mask_ladder",
    "partial_sketch", "read_corpus", "read_manifest", "register_sketch_generator",
    "synth_corpus", "write_corpus", "write_dataset",
]
