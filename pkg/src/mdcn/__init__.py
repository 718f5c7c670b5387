"""Multi-domain treatment-effect estimation with adversarial representation learning."""

from .datagen import CircularConfig, Dataset, SemiSynthConfig, gen_circular, gen_semisynth
from .estimator import MultiDomainCausalRegressor
from .evaluation import estimate_cate, pehe, summary_table, wilcoxon_signed_rank
from .trainer import TrainConfig, train

__all__ = [
    "CircularConfig", "Dataset", "SemiSynthConfig", "gen_circular", "gen_semisynth",
    "MultiDomainCausalRegressor", "estimate_cate", "pehe", "summary_table",
    "wilcoxon_signed_rank", "TrainConfig", "train",
]
__version__ = "0.1.0"
