"""Statistical path pruning: turn routing statistics into static sparsity.

Training tends to abandon rarely visited paths on its own; pruning makes
that permanent.  A PruneMask names the least-visited leaf paths per tree
and derives the set of nodes that serve no surviving leaf.  Inference
then either reroutes around dead subtrees (keeping exactly D+1 evaluated
nodes per tree) or zeroes their contribution, depending on the mode.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from treeff.analysis import UtilizationLedger
from treeff.fff import ForestParams, num_leaves, num_nodes
from treeff.fff import forward_sequential as _forward_sequential


@dataclass
class PruneMask:
    """Permanently disabled leaf paths and the subtrees they orphan.

    dead_leaves: (P, 2**D) bool, True where the leaf path is pruned.
    disabled:    (P, N) bool over flat node indices; True only for nodes
                 all of whose descendant leaves are dead, so an ancestor
                 still serving one live leaf is never disabled.
    """

    trees: int
    depth: int
    dead_leaves: np.ndarray
    disabled: np.ndarray

    def pruned_leaf_count(self) -> int:
        return int(self.dead_leaves.sum())

    def is_empty(self) -> bool:
        return not self.dead_leaves.any()


def disabled_nodes_from_leaves(dead_leaves: np.ndarray, depth: int) -> np.ndarray:
    """(P, N) bool table: a node is disabled iff every leaf below it is dead.

    Built bottom-up: leaf level copies dead_leaves, an internal node needs
    both children disabled.  The root survives as long as one leaf does.
    """
    trees = dead_leaves.shape[0]
    disabled = np.zeros((trees, num_nodes(depth)), dtype=bool)
    first_leaf = num_nodes(depth - 1) if depth > 0 else 0
    disabled[:, first_leaf:] = dead_leaves
    for node in range(first_leaf - 1, -1, -1):
        disabled[:, node] = disabled[:, 2 * node + 1] & disabled[:, 2 * node + 2]
    return disabled


def build_prune_mask(ledger: UtilizationLedger, prune_fraction: float) -> PruneMask:
    """Disable the floor(prune_fraction * 2**D) least-visited leaves per tree.

    Ties break toward the lower leaf index (stable ascending sort), so the
    mask is a deterministic function of the ledger.
    """
    if not 0.0 <= prune_fraction < 1.0:
        raise ValueError(f"prune_fraction must be in [0, 1), got {prune_fraction}")
    if ledger.total == 0:
        raise ValueError("cannot prune from an empty ledger (no visits recorded)")
    leaves = num_leaves(ledger.depth)
    k = int(np.floor(prune_fraction * leaves))
    dead = np.zeros((ledger.trees, leaves), dtype=bool)
    for p in range(ledger.trees):
        order = np.argsort(ledger.leaf_counts[p], kind="stable")
        dead[p, order[:k]] = True
    return PruneMask(
        trees=ledger.trees,
        depth=ledger.depth,
        dead_leaves=dead,
        disabled=disabled_nodes_from_leaves(dead, ledger.depth),
    )


def check_compatible(params: ForestParams, mask: PruneMask) -> None:
    if (params.trees, params.depth) != (mask.trees, mask.depth):
        raise ValueError(
            f"prune mask for {mask.trees} trees depth {mask.depth} does not fit "
            f"model with {params.trees} trees depth {params.depth}"
        )


def forward_pruned(
    params: ForestParams,
    x: np.ndarray,
    mask: PruneMask,
    counter=None,
    mode: str = "reroute",
    check: bool = False,
):
    """Sequential forward that respects a PruneMask.

    mode="reroute": a step into a fully disabled subtree diverts to the
    sibling (live by construction), so the path stays D+1 nodes long.
    mode="zero": routing is untouched and disabled nodes contribute 0.
    An empty mask reproduces forward_sequential bitwise.
    """
    check_compatible(params, mask)
    return _forward_sequential(
        params,
        x,
        counter=counter,
        disabled=mask.disabled,
        pruned_mode=mode,
        check=check,
    )
