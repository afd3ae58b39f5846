from .batching import (BatchSpec, SampleGroup, SchedulingError, balanced_index_pairs,
                       build_balanced_minibatch, candidate_pairs, make_groups)
from .bluenoise import blue_noise_sample, min_pairwise_distance
from .corpus import (MANIFEST, VIEWS, CorrespondenceSet, Corpus, ManifestError, SketchRecord,
                     load_corpus, save_corpus)
from .toy import TEMPLATES, ToyConfig, ToyConfigError, generate_toy_corpus, shape_split

__all__ = [
    "BatchSpec", "SampleGroup", "SchedulingError", "balanced_index_pairs", "build_balanced_minibatch",
    "candidate_pairs", "make_groups", "blue_noise_sample", "min_pairwise_distance", "MANIFEST", "VIEWS",
    "CorrespondenceSet", "Corpus", "ManifestError", "SketchRecord", "load_corpus", "save_corpus",
    "TEMPLATES", "ToyConfig", "ToyConfigError", "generate_toy_corpus", "shape_split",
]
