"""Spatiotemporal pyramid fusion with compact bilinear (count sketch + FFT) operators."""

from .data import Dataset, DatasetConfig, VideoSample, gen_dataset
from .pyramid import PyramidConfig, PyramidParams, TrainConfig, build_params, evaluate, forward, train, variant_config
from .sketch import SketchHash, count_sketch, new_sketch_hash, stcb_backward, stcb_forward

__version__ = "0.1.0"
