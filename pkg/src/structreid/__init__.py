"""Cross-view re-identification by structured matching of co-occurrence descriptors."""
from .codebook import Codebook, CodewordImage, encode_image, train_codebook
from .cooccur import (CooccurrenceDescriptor, DescriptorSet, ModelWeights, SparseVector, cooccurrence,
                      pairwise_descriptors, similarity_matrix)
from .errors import DataError, NumericError, StructReidError
from .evaluation import CmcCurve, cmc, matching_accuracy, structured_cmc
from .learner import TrainConfig, TrainResult, train
from .matcher import FeasibleSetSpec, MatchResult, gallery_cap, loss, solve_matching
from .spatial import ActivationMap, KernelKind, KernelSpec, activation_map, kappa

__version__ = "0.1.0"
