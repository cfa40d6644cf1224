"""Bag-of-frames soundscape categorization benchmark."""

from bofbench.audio_io import SampleBuffer, decode, normalize, segment
from bofbench.baseline import MeanFeature, euclidean, mean_feature
from bofbench.bof_model import (
    DistanceConfig,
    GmmModel,
    fit_gmm,
    kl_marginal,
    kl_mc,
    loglik,
    sample,
)
from bofbench.dataset import DatasetManifest, ManifestEntry, UnitPolicy, leakage_summary, load_manifest, materialize
from bofbench.evaluation import (
    DistanceMatrix,
    EvalReport,
    average_precision,
    chance_baseline,
    evaluate,
    precision_at_5,
)
from bofbench.features import FeatureSequence, frame_count, mfcc

__version__ = "0.1.0"
