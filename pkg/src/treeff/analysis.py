"""Routing utilization, logit drift prediction, and tree priors.

Three instruments for studying what hard routing does during training:

* UtilizationLedger counts node and leaf-path visits so imbalance and
  dead leaves can be quantified (and later harvested by pruning).
* DriftProbe records the per-step statistic that predicts how a node's
  mean routing logit moves under SGD: for mu = <w, m> + b with a fixed
  probe mean m, one SGD step moves mu by exactly
  -lr * sum_b gz_b * (<m, h_b> + 1), where gz_b is the loss gradient at
  the node's logit for sample b and h_b the layer input.
* TreePrior holds per-branch probabilities of taking the higher-index
  child; built from a target leaf distribution bottom-up, it can recreate
  (and sample) that distribution, giving a reference shape (e.g. Pareto)
  to compare trained utilization against.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from treeff.fff import ForestParams, RouteMask, num_leaves, num_nodes
from treeff.numeric import std_normal_cdf


@dataclass
class UtilizationLedger:
    trees: int
    depth: int
    node_counts: np.ndarray = None  # (P, N) int64
    leaf_counts: np.ndarray = None  # (P, 2**D) int64
    total: int = 0  # samples recorded

    def __post_init__(self):
        if self.node_counts is None:
            self.node_counts = np.zeros((self.trees, num_nodes(self.depth)), dtype=np.int64)
        if self.leaf_counts is None:
            self.leaf_counts = np.zeros((self.trees, num_leaves(self.depth)), dtype=np.int64)

    def record_batch(self, route: RouteMask) -> None:
        if route.mask.shape[1:] != self.node_counts.shape:
            raise ValueError(
                f"route shape {route.mask.shape[1:]} does not match ledger "
                f"({self.trees} trees, depth {self.depth})"
            )
        self.node_counts += route.mask.astype(np.int64).sum(axis=0)
        slots = route.leaf_slots()  # (B, P)
        for p in range(self.trees):
            self.leaf_counts[p] += np.bincount(slots[:, p], minlength=num_leaves(self.depth))
        self.total += route.mask.shape[0]

    def merge(self, other: "UtilizationLedger") -> "UtilizationLedger":
        if (other.trees, other.depth) != (self.trees, self.depth):
            raise ValueError("cannot merge ledgers of different geometry")
        return UtilizationLedger(
            trees=self.trees,
            depth=self.depth,
            node_counts=self.node_counts + other.node_counts,
            leaf_counts=self.leaf_counts + other.leaf_counts,
            total=self.total + other.total,
        )


def dead_leaf_fraction(ledger: UtilizationLedger, threshold: int = 0) -> float:
    """Fraction of leaf paths visited at most `threshold` times."""
    return float(np.mean(ledger.leaf_counts <= threshold))


def max_path_share(ledger: UtilizationLedger) -> float:
    """Largest single leaf-path visit share across all trees."""
    if ledger.total == 0:
        return 0.0
    return float(ledger.leaf_counts.max() / ledger.total)


def path_histogram(ledger: UtilizationLedger) -> np.ndarray:
    """(P, 2**D) leaf shares, each tree's row sorted descending."""
    if ledger.total == 0:
        return np.zeros_like(ledger.leaf_counts, dtype=np.float64)
    shares = ledger.leaf_counts / ledger.total
    return -np.sort(-shares, axis=1)


def empirical_leaf_distribution(ledger: UtilizationLedger) -> np.ndarray:
    """Mean over trees of per-tree leaf visit shares; sums to 1."""
    if ledger.total == 0:
        raise ValueError("empty ledger has no distribution")
    return (ledger.leaf_counts / ledger.total).mean(axis=0)


def utilization_to_json(ledger: UtilizationLedger) -> dict:
    return {
        "depth": ledger.depth,
        "trees": ledger.trees,
        "leaf_counts": ledger.leaf_counts.tolist(),
        "node_counts": ledger.node_counts.tolist(),
        "total": ledger.total,
    }


def utilization_from_json(doc: dict) -> UtilizationLedger:
    ledger = UtilizationLedger(
        trees=int(doc["trees"]),
        depth=int(doc["depth"]),
        node_counts=np.array(doc["node_counts"], dtype=np.int64),
        leaf_counts=np.array(doc["leaf_counts"], dtype=np.int64),
        total=int(doc["total"]),
    )
    if ledger.node_counts.shape != (ledger.trees, num_nodes(ledger.depth)):
        raise ValueError("utilization document has inconsistent shapes")
    return ledger


def positive_branch_prob(mu: float, sigma: float) -> float:
    """P(z >= 0) for z ~ N(mu, sigma^2): Phi(mu / sigma).  Monotone in mu."""
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    return float(std_normal_cdf(mu / sigma))


@dataclass
class DriftProbe:
    """Watches one node's mean routing logit mu = <w_in, m> + b_in.

    m is fixed at construction (an estimate of E[input]).  Each training
    step records sum_b gz_b * (<m, h_b> + 1); multiplied by -lr this is
    exactly the SGD-induced change in mu, and averaged over steps it
    estimates the drift expectation.
    """

    tree: int
    node: int
    m: np.ndarray
    records: list = field(default_factory=list)

    @classmethod
    def from_batch(cls, tree: int, node: int, h: np.ndarray) -> "DriftProbe":
        return cls(tree=tree, node=node, m=h.mean(axis=0))

    def mean_logit(self, params: ForestParams) -> float:
        return float(params.w_in[self.tree, self.node] @ self.m + params.b_in[self.tree, self.node])

    def record_step(self, g_z_node: np.ndarray, h: np.ndarray) -> None:
        """g_z_node: (B,) loss gradient at this node's logit (0 where the
        node was not visited); h: (B, d_in) layer inputs."""
        if g_z_node.shape[0] != h.shape[0]:
            raise ValueError("gradient/input batch mismatch")
        self.records.append(float(g_z_node @ (h @ self.m + 1.0)))


def predict_drift(probe: DriftProbe, lr: float) -> np.ndarray:
    """Predicted change of the probed mean logit for each recorded step."""
    return -lr * np.asarray(probe.records)


@dataclass
class TreePrior:
    """Branch distribution over one tree: q[n] is the probability that the
    walk at internal node n steps to the higher-index child 2n+2."""

    depth: int
    q: np.ndarray  # (2**depth - 1,) level-order internal nodes

    def __post_init__(self):
        if self.q.shape != (num_leaves(self.depth) - 1,):
            raise ValueError("branch array does not match depth")
        if np.any((self.q < 0) | (self.q > 1)):
            raise ValueError("branch probabilities must lie in [0, 1]")


def build_tree_prior(target_leaf_dist: np.ndarray) -> TreePrior:
    """Branch weights whose induced leaf distribution is the (normalized)
    target.  Mass flows bottom-up: each internal node's mass is the sum of
    its children, and q = higher-child mass / node mass (0.5 where the
    subtree carries no mass, keeping q well-defined)."""
    target = np.asarray(target_leaf_dist, dtype=np.float64)
    leaves = target.size
    depth = leaves.bit_length() - 1
    if num_leaves(depth) != leaves:
        raise ValueError(f"target length {leaves} is not a power of two")
    if np.any(target < 0) or target.sum() <= 0:
        raise ValueError("target must be nonnegative with positive mass")
    n = num_nodes(depth)
    mass = np.zeros(n)
    mass[n - leaves :] = target / target.sum()
    for node in range(n - leaves - 1, -1, -1):
        mass[node] = mass[2 * node + 1] + mass[2 * node + 2]
    internal = mass[: n - leaves]
    higher = mass[2 * np.arange(n - leaves) + 2]
    q = np.where(internal > 0, higher / np.where(internal > 0, internal, 1.0), 0.5)
    return TreePrior(depth=depth, q=q)


def prior_leaf_distribution(prior: TreePrior) -> np.ndarray:
    """Leaf probabilities induced by the branch weights (path products)."""
    n = num_nodes(prior.depth)
    leaves = num_leaves(prior.depth)
    prob = np.zeros(n)
    prob[0] = 1.0
    for node in range(n - leaves):
        prob[2 * node + 1] = prob[node] * (1.0 - prior.q[node])
        prob[2 * node + 2] = prob[node] * prior.q[node]
    return prob[n - leaves :]


def sample_prior_paths(prior: TreePrior, rng: np.random.Generator, n: int) -> np.ndarray:
    """Leaf visit counts from n independent root-to-leaf walks."""
    cur = np.zeros(n, dtype=np.int64)
    for _ in range(prior.depth):
        go_high = rng.random(n) < prior.q[cur]
        cur = 2 * cur + 1 + go_high
    slots = cur - (num_nodes(prior.depth) - num_leaves(prior.depth))
    return np.bincount(slots, minlength=num_leaves(prior.depth))


def pareto_target(alpha: float, leaves: int) -> np.ndarray:
    """Unit-width bin masses of a Pareto(alpha) tail, truncated to `leaves`
    bins and renormalized: p_k proportional to k^-alpha - (k+1)^-alpha."""
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    k = np.arange(1, leaves + 1, dtype=np.float64)
    mass = k**-alpha - (k + 1) ** -alpha
    return mass / mass.sum()


def uniform_target(leaves: int) -> np.ndarray:
    return np.full(leaves, 1.0 / leaves)


def total_variation(p: np.ndarray, q: np.ndarray) -> float:
    return 0.5 * float(np.abs(np.asarray(p) - np.asarray(q)).sum())


def prior_distance(empirical: np.ndarray, prior: TreePrior, ordering: str = "sorted") -> float:
    """Total-variation distance between an empirical leaf distribution and
    the prior's.  ordering="sorted" compares shape only (both distributions
    ranked descending), which is the right notion when leaf identity is
    arbitrary; "as_is" compares leaf-for-leaf."""
    target = prior_leaf_distribution(prior)
    emp = np.asarray(empirical, dtype=np.float64)
    if emp.shape != target.shape:
        raise ValueError(f"distribution length {emp.shape} != {target.shape}")
    if ordering == "sorted":
        return total_variation(-np.sort(-emp), -np.sort(-target))
    if ordering == "as_is":
        return total_variation(emp, target)
    raise ValueError(f"unknown ordering {ordering!r}")
