"""Descriptor consumers: morphing, part segmentation and retrieval."""
from .morph import (Correspondence, MorphConfig, MorphError, MorphResult, alpha_blend_weight, morph,
                    morph_frames, select_morph_correspondences)
from .retrieval import RetrievalIndex, RetrievalResult, build_retrieval_index, retrieve
from .segment import SegmenterModel, labelled_descriptors, save_overlay, segment, train_segmenter

__all__ = [
    "Correspondence", "MorphConfig", "MorphError", "MorphResult", "alpha_blend_weight", "morph", "morph_frames",
    "select_morph_correspondences", "RetrievalIndex", "RetrievalResult", "build_retrieval_index", "retrieve",
    "SegmenterModel", "labelled_descriptors", "save_overlay", "segment", "train_segmenter",
]
