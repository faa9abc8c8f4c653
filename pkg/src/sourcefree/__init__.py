"""Source-free domain adaptation by translating target images into the source style.

Only a frozen source classifier is needed. Its stored batch-norm statistics
act as the style target for a generator that rewrites target images.
"""

__version__ = "0.1.0"

from .data import Dataset, DomainPair, batches, load_digit_dataset, make_synthetic_pair  # noqa: E402
from .losses import LossReport, LossWeights, content_loss, entropy_loss, style_loss, total_loss  # noqa: E402
from .models import (ClassifierTrace, Generator, LayerStats, SourceClassifier,  # noqa: E402
                     classifier_forward, current_stats, generator_forward)
from .training import (TrainConfig, cosine_schedule, finetune_config, source_config,  # noqa: E402
                       train_generator, train_source)
from .baselines import PseudoLabelSet, adabn, finetune, mine_pseudo_labels  # noqa: E402
from .evaluation import EvalResult, SignificanceReport, evaluate, paired_t_test, run_ablation  # noqa: E402
from .plotting import export_grid  # noqa: E402
