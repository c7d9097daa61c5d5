"""Multi-level interaction reranker.

Scores a candidate set against a user's chronological behavior history via
item-level and feature-level affinities, personalized interest decay, and an
asymmetric set/list attention, then reranks by the predicted click scores.
Includes a synthetic click-log generator, an IPS-debiased metric suite, and
permutation-equivariance checkers.
"""

__version__ = "0.1.0"

from .data import FeatureSchema, ItemRecord, RankingInstance  # noqa: F401
from .model import ModelConfig  # noqa: F401
