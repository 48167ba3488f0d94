"""Tree-routed sparse feed-forward layer.

A layer holds P parallel perfect binary trees of depth D.  Every node owns a
routing/neuron weight vector w_in (plus bias) and an output vector w_out.
An input descends each tree root to leaf: at node n the logit
z = <x, w_in[n]> + b_in[n] picks the child (z >= 0 takes the higher-index
child, so a tie routes high), and the visited nodes' activations are summed
into the output.  Routing decisions are a function of the logit's value
only; no gradient flows through the branch choice.

Two output variants:
  * pre_gelu:  y = b_out + sum over visited nodes of GELU(z) * w_out
  * post_gelu: y = GELU(b_out + sum over visited nodes of z * w_out)

Nodes are numbered level order within a tree: node (level, slot) sits at
flat index 2**level - 1 + slot, children of flat n are 2n+1 and 2n+2.

Both a sequential forward (descends the trees, touching only visited nodes)
and a masked forward (computes all logits, then multiplies by the 0/1 visit
mask) are provided; they agree to float64 roundoff and share one backward
interface.  The masked form is the reference for gradients.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from treeff.numeric import (
    DivergenceError,
    check_finite,
    gaussian,
    gelu,
    gelu_prime,
)

PRE_GELU = "pre_gelu"
POST_GELU = "post_gelu"
VARIANTS = (PRE_GELU, POST_GELU)


def num_nodes(depth: int) -> int:
    """Nodes in one perfect binary tree of the given depth."""
    return 2 ** (depth + 1) - 1


def num_leaves(depth: int) -> int:
    return 2**depth


def node_flat_index(level: int, slot: int) -> int:
    """Level-order flat index of node (level, slot)."""
    if not 0 <= slot < 2**level:
        raise ValueError(f"slot {slot} out of range for level {level}")
    return 2**level - 1 + slot


def node_level_slot(flat: int) -> tuple[int, int]:
    """Inverse of node_flat_index."""
    level = (flat + 1).bit_length() - 1
    return level, flat - (2**level - 1)


@dataclass
class ForestParams:
    """Parameters of one layer.  Shapes: w_in (P, N, d_in), b_in (P, N),
    w_out (P, N, d_out), b_out (d_out,), with N = 2**(depth+1) - 1."""

    trees: int
    depth: int
    d_in: int
    d_out: int
    variant: str
    w_in: np.ndarray
    b_in: np.ndarray
    w_out: np.ndarray
    b_out: np.ndarray

    def node_count(self) -> int:
        return num_nodes(self.depth)


@dataclass
class RouteMask:
    """Hard-routing result for a batch.

    mask:  (B, P, N) float64 holding exactly 0.0 or 1.0, one visited path
           of D+1 nodes per (sample, tree).
    paths: (B, P, D+1) int64 flat node index visited at each level;
           paths[..., 0] is always the root (0).
    """

    mask: np.ndarray
    paths: np.ndarray

    @property
    def depth(self) -> int:
        return self.paths.shape[2] - 1

    def leaf_slots(self) -> np.ndarray:
        """(B, P) leaf slot in [0, 2**D) reached by each sample/tree."""
        return self.paths[:, :, -1] - (2**self.depth - 1)


@dataclass
class ForwardCache:
    """Everything backward() needs.  `mode` selects the gradient path.

    masked mode:     z is the full (B, P, N) logit tensor, a_flat the
                     masked activations (B, P*N).
    sequential mode: z holds only visited logits (B, P, D+1).
    post_gelu additionally caches u, the pre-GELU output sum (B, d_out).
    """

    mode: str
    x: np.ndarray
    route: RouteMask
    z: np.ndarray
    a_flat: np.ndarray | None = None
    u: np.ndarray | None = None
    y: np.ndarray | None = None


@dataclass
class LayerGradients:
    """Gradients w.r.t. parameters and input, shapes mirroring ForestParams."""

    g_w_in: np.ndarray
    g_b_in: np.ndarray
    g_w_out: np.ndarray
    g_b_out: np.ndarray
    g_x: np.ndarray


def init_forest(
    rng: np.random.Generator,
    trees: int,
    depth: int,
    d_in: int,
    d_out: int,
    variant: str = PRE_GELU,
    scheme: str = "scaled",
) -> ForestParams:
    """Gaussian init.  Routing weights scale like 1/sqrt(d_in) so logits on
    unit-scale inputs start near zero mean and unit-ish variance; output
    weights scale like 1/sqrt(active nodes) so the summed output stays O(1).
    Biases start at zero, which makes the initial routing a fair coin on
    zero-mean inputs."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}, expected one of {VARIANTS}")
    if trees < 1 or depth < 0:
        raise ValueError(f"bad tree shape: trees={trees} depth={depth}")
    n = num_nodes(depth)
    if scheme == "scaled":
        in_std = d_in**-0.5
        out_std = (trees * (depth + 1)) ** -0.5
    elif scheme == "unit":
        in_std = 1.0
        out_std = 1.0
    else:
        raise ValueError(f"unknown init scheme {scheme!r}")
    return ForestParams(
        trees=trees,
        depth=depth,
        d_in=d_in,
        d_out=d_out,
        variant=variant,
        w_in=gaussian(rng, 0.0, in_std, (trees, n, d_in)),
        b_in=np.zeros((trees, n)),
        w_out=gaussian(rng, 0.0, out_std, (trees, n, d_out)),
        b_out=np.zeros(d_out),
    )


def compute_mask(z: np.ndarray) -> RouteMask:
    """Hard-route a batch of logit tensors.

    z: (B, P, N).  Descends each tree using sign(z) at the visited node;
    z >= 0 selects the higher-index child.  Returns the 0/1 visit mask and
    the per-level flat node indices.
    """
    b, p, n = z.shape
    depth = (n + 1).bit_length() - 2
    if num_nodes(depth) != n:
        raise ValueError(f"last axis {n} is not 2**(D+1)-1 for any depth D")
    bi = np.arange(b)[:, None]
    pi = np.arange(p)[None, :]
    cur = np.zeros((b, p), dtype=np.int64)
    paths = np.zeros((b, p, depth + 1), dtype=np.int64)
    mask = np.zeros((b, p, n))
    mask[bi, pi, cur] = 1.0
    for level in range(depth):
        z_cur = z[bi, pi, cur]
        cur = 2 * cur + 1 + (z_cur >= 0.0)
        paths[:, :, level + 1] = cur
        mask[bi, pi, cur] = 1.0
    return RouteMask(mask=mask, paths=paths)


def _raise_nonfinite(z: np.ndarray, what: str) -> None:
    """Report the first non-finite logit with its (tree, level, slot)."""
    bad = np.argwhere(~np.isfinite(z))
    b, p, n = (int(v) for v in bad[0])
    level, slot = node_level_slot(n)
    raise DivergenceError(
        f"non-finite {what} at sample {b}, tree {p}, node "
        f"(level {level}, slot {slot})"
    )


def forward_masked(params: ForestParams, x: np.ndarray, check: bool = True):
    """Reference forward: all P*N logits, then mask.  Returns (y, cache).

    x: (B, d_in) -> y: (B, d_out).  O(P * N) work per sample; numerically
    equal to forward_sequential up to float64 summation order.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.d_in:
        raise ValueError(f"expected x of shape (B, {params.d_in}), got {x.shape}")
    batch = x.shape[0]
    p, n = params.trees, params.node_count()
    w_in_flat = params.w_in.reshape(p * n, params.d_in)
    w_out_flat = params.w_out.reshape(p * n, params.d_out)

    z_flat = x @ w_in_flat.T + params.b_in.reshape(p * n)
    z = z_flat.reshape(batch, p, n)
    if check and not np.all(np.isfinite(z)):
        _raise_nonfinite(z, "routing logit")
    route = compute_mask(z)

    if params.variant == PRE_GELU:
        a_flat = (route.mask * gelu(z)).reshape(batch, p * n)
        u = None
        y = a_flat @ w_out_flat + params.b_out
    else:
        a_flat = (route.mask * z).reshape(batch, p * n)
        u = a_flat @ w_out_flat + params.b_out
        y = gelu(u)
    if check:
        check_finite(y, "layer output")
    cache = ForwardCache(mode="masked", x=x, route=route, z=z, a_flat=a_flat, u=u, y=y)
    return y, cache


def forward_sequential(
    params: ForestParams,
    x: np.ndarray,
    counter=None,
    disabled: np.ndarray | None = None,
    pruned_mode: str = "reroute",
    check: bool = True,
):
    """Routing forward touching only the P*(D+1) visited nodes per sample.

    Per (sample, tree, level): one d_in-wide routing dot product and one
    d_out-wide output accumulation.  `counter`, if given, gets 2 FLOPs per
    multiply-accumulate added at each executed site.

    `disabled` is an optional (P, N) bool table of pruned subtrees.  With
    pruned_mode="reroute" a step into a fully dead subtree diverts to the
    sibling; with "zero" routing is untouched but dead nodes contribute 0.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.d_in:
        raise ValueError(f"expected x of shape (B, {params.d_in}), got {x.shape}")
    if pruned_mode not in ("reroute", "zero"):
        raise ValueError(f"unknown pruned_mode {pruned_mode!r}")
    batch = x.shape[0]
    p, n, depth = params.trees, params.node_count(), params.depth
    d_in, d_out = params.d_in, params.d_out
    pi = np.arange(p)[None, :]

    cur = np.zeros((batch, p), dtype=np.int64)
    paths = np.zeros((batch, p, depth + 1), dtype=np.int64)
    z_vis = np.empty((batch, p, depth + 1))
    acc = np.broadcast_to(params.b_out, (batch, d_out)).copy()

    for level in range(depth + 1):
        w_g = params.w_in[pi, cur]  # (B, P, d_in)
        z = np.einsum("bd,bpd->bp", x, w_g, optimize=True) + params.b_in[pi, cur]
        z_vis[:, :, level] = z
        act = gelu(z) if params.variant == PRE_GELU else z
        if disabled is not None and pruned_mode == "zero":
            act = act * ~disabled[pi, cur]
        w_out_g = params.w_out[pi, cur]  # (B, P, d_out)
        acc += np.einsum("bp,bpo->bo", act, w_out_g, optimize=True)
        if counter is not None:
            counter.add(2 * batch * p * (d_in + d_out))
        if level < depth:
            nxt = 2 * cur + 1 + (z >= 0.0)
            if disabled is not None and pruned_mode == "reroute":
                sibling = (4 * cur + 3) - nxt  # 2c+1 <-> 2c+2
                nxt = np.where(disabled[pi, nxt], sibling, nxt)
            cur = nxt
            paths[:, :, level + 1] = cur

    if params.variant == PRE_GELU:
        u, y = None, acc
    else:
        u, y = acc, gelu(acc)
    if check:
        if not np.all(np.isfinite(z_vis)):
            bad = np.argwhere(~np.isfinite(z_vis))
            b, pt, lvl = (int(v) for v in bad[0])
            flat = int(paths[b, pt, lvl])
            level, slot = node_level_slot(flat)
            raise DivergenceError(
                f"non-finite routing logit at sample {b}, tree {pt}, node "
                f"(level {level}, slot {slot})"
            )
        check_finite(y, "layer output")

    mask = np.zeros((batch, p, n))
    np.put_along_axis(
        mask.reshape(batch * p, n),
        paths.reshape(batch * p, depth + 1),
        1.0,
        axis=1,
    )
    route = RouteMask(mask=mask, paths=paths)
    cache = ForwardCache(mode="sequential", x=x, route=route, z=z_vis, u=u, y=y)
    return y, cache


def backward(params: ForestParams, cache: ForwardCache, g_y: np.ndarray) -> LayerGradients:
    """Hand-derived gradients for either forward mode.

    pre_gelu (masked form, Abar = flatten(mask * GELU(Z))):
        dL/dW_out = Abar^T G_Y        dL/db_out = sum_b G_Y
        G_Z = (mask * (G_Y W_out^T)) * GELU'(Z)
        dL/dW_in  = G_Z^T X           dL/db_in  = sum_b G_Z
        dL/dX     = G_Z W_in
    post_gelu first converts G_Y to G_U = G_Y * GELU'(U); the routing-logit
    gradient then carries no GELU'(Z) factor because z enters linearly.
    The branch decisions themselves are constants: gradients flow only
    through nodes the forward pass visited.
    """
    g_y = np.asarray(g_y, dtype=np.float64)
    if cache.mode == "masked":
        return _backward_masked(params, cache, g_y)
    if cache.mode == "sequential":
        return _backward_sequential(params, cache, g_y)
    raise ValueError(f"unknown cache mode {cache.mode!r}")


def _backward_masked(params: ForestParams, cache: ForwardCache, g_y: np.ndarray):
    batch = g_y.shape[0]
    p, n = params.trees, params.node_count()
    w_in_flat = params.w_in.reshape(p * n, params.d_in)
    w_out_flat = params.w_out.reshape(p * n, params.d_out)

    if params.variant == PRE_GELU:
        g_out = g_y
    else:
        g_out = g_y * gelu_prime(cache.u)
    g_b_out = g_out.sum(axis=0)
    g_w_out = (cache.a_flat.T @ g_out).reshape(p, n, params.d_out)
    g_a = (g_out @ w_out_flat.T).reshape(batch, p, n)
    if params.variant == PRE_GELU:
        g_z = (cache.route.mask * g_a) * gelu_prime(cache.z)
    else:
        g_z = cache.route.mask * g_a
    g_flat = g_z.reshape(batch, p * n)
    g_w_in = (g_flat.T @ cache.x).reshape(p, n, params.d_in)
    g_b_in = g_flat.sum(axis=0).reshape(p, n)
    g_x = g_flat @ w_in_flat
    return LayerGradients(g_w_in, g_b_in, g_w_out, g_b_out, g_x)


def _backward_sequential(params: ForestParams, cache: ForwardCache, g_y: np.ndarray):
    batch = g_y.shape[0]
    p, depth = params.trees, params.depth
    paths, z_vis = cache.route.paths, cache.z
    pi = np.arange(p)[None, :]
    p_grid = np.broadcast_to(np.arange(p), (batch, p))

    if params.variant == PRE_GELU:
        g_out = g_y
    else:
        g_out = g_y * gelu_prime(cache.u)
    g_b_out = g_out.sum(axis=0)
    g_w_in = np.zeros_like(params.w_in)
    g_b_in = np.zeros_like(params.b_in)
    g_w_out = np.zeros_like(params.w_out)
    g_x = np.zeros_like(cache.x)

    for level in range(depth + 1):
        nodes = paths[:, :, level]  # (B, P)
        z = z_vis[:, :, level]
        w_out_g = params.w_out[pi, nodes]
        g_act = np.einsum("bo,bpo->bp", g_out, w_out_g, optimize=True)
        if params.variant == PRE_GELU:
            g_z = g_act * gelu_prime(z)
            act = gelu(z)
        else:
            g_z = g_act
            act = z
        np.add.at(g_w_out, (p_grid, nodes), act[:, :, None] * g_out[:, None, :])
        np.add.at(g_w_in, (p_grid, nodes), g_z[:, :, None] * cache.x[:, None, :])
        np.add.at(g_b_in, (p_grid, nodes), g_z)
        g_x += np.einsum("bp,bpd->bd", g_z, params.w_in[pi, nodes], optimize=True)
    return LayerGradients(g_w_in, g_b_in, g_w_out, g_b_out, g_x)


def active_node_count(params: ForestParams) -> int:
    """Nodes evaluated per input: one path of D+1 nodes in each of P trees."""
    return params.trees * (params.depth + 1)


def total_node_count(params: ForestParams) -> int:
    return params.trees * params.node_count()


def active_param_count(params: ForestParams) -> int:
    """Weights touched per input; each node carries d_in + 1 + d_out."""
    per_node = params.d_in + 1 + params.d_out
    return active_node_count(params) * per_node + params.d_out


def total_param_count(params: ForestParams) -> int:
    per_node = params.d_in + 1 + params.d_out
    return total_node_count(params) * per_node + params.d_out
