"""Regional tree regularization for small neural networks.

Train an MLP whose per-region decision functions stay easy to approximate with
shallow decision trees, then distill one tree per region.
"""

from .datasets import Dataset, Splits, gen_five_rectangles, gen_grid_toy, gen_two_region_toy, load_delimited
from .experiment import TrainConfig, distill, evaluate, fidelity, sweep, train_target
from .nn import MlpModel, backward, forward, grad_wrt_input, init_mlp, loss_bce
from .regions import RegionSpec, kmeans_regions, partition
from .regularizer import RegularizerKind, SurrogateConfig, penalty, penalty_grad, sparsemax
from .tree import DecisionTree, TreeConfig, apl, fit_pruned_tree, prune_tree, train_tree

__version__ = "0.1.0"

__all__ = [
    "Dataset", "Splits", "gen_five_rectangles", "gen_grid_toy", "gen_two_region_toy",
    "load_delimited", "TrainConfig", "distill", "evaluate", "fidelity", "sweep", "train_target",
    "MlpModel", "backward", "forward", "grad_wrt_input", "init_mlp", "loss_bce", "RegionSpec",
    "kmeans_regions", "partition", "RegularizerKind", "SurrogateConfig", "penalty",
    "penalty_grad", "sparsemax", "DecisionTree", "TreeConfig", "apl", "fit_pruned_tree",
    "prune_tree", "train_tree",
]
