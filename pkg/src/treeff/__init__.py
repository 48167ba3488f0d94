"""Tree-routed sparse feed-forward layers and desk-scale experiments.

The package is organized around a single idea: a feed-forward block whose
hidden neurons live on perfect binary trees, so each input activates one
root-to-leaf path per tree instead of the full width.  Everything else
(baselines, tasks, trainer, analysis, pruning, benchmarks, CLI) exists to
exercise that block and measure what hard routing does to it.
"""

from treeff.numeric import gelu, gelu_prime, std_normal_cdf, make_rng
from treeff.fff import (
    ForestParams,
    RouteMask,
    init_forest,
    compute_mask,
    forward_masked,
    forward_sequential,
    backward,
)

__all__ = [
    "gelu",
    "gelu_prime",
    "std_normal_cdf",
    "make_rng",
    "ForestParams",
    "RouteMask",
    "init_forest",
    "compute_mask",
    "forward_masked",
    "forward_sequential",
    "backward",
]
