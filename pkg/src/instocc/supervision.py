"""Training-time association and loss arithmetic.

Predictions are associated one-to-one with ground truth by minimum-cost
assignment, then scored with an anchor L1 term, a sigmoid focal term for
classification, and a focal term over voxel occupancy logits.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import permutations
from typing import List, Sequence, Tuple

import numpy as np

from .core import ANCHOR_DIM, InstanceAnchor
from .errors import (
    ClassOutOfRange,
    ConfigInvalid,
    InvariantViolation,
    NonFiniteCost,
    VoxelEnumerationMismatch,
)


@dataclass(frozen=True)
class MatchCostConfig:
    lambda_cls: float = 1.0
    lambda_reg: float = 1.0
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    w_reg: float = 1.0
    w_cls: float = 1.0
    w_occ: float = 1.0

    def __post_init__(self):
        for name in ("lambda_cls", "lambda_reg", "focal_gamma", "w_reg", "w_cls", "w_occ"):
            if not getattr(self, name) >= 0:
                raise ConfigInvalid(f"{name} must be non-negative")
        if not 0.0 < self.focal_alpha < 1.0:
            raise ConfigInvalid("focal_alpha must be in (0, 1)")


# ---------------------------------------------------------------------------
# assignment

def _solve(cost):
    """Shortest augmenting path with potentials for ``n <= m``, O(n^2 m).

    Returns ``(col_of_row, u, v)`` (0-based). The potentials are dual optimal:
    ``cost - u[:, None] - v`` is non-negative and zero on every edge that some
    optimal assignment uses.
    """
    n, m = cost.shape
    # 1-based arrays; column 0 is the virtual start of each augmenting path
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    row_of = np.zeros(m + 1, dtype=np.int64)
    way = np.zeros(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        row_of[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = row_of[j0]
            free = ~used[1:]
            reduced = cost[i0 - 1] - u[i0] - v[1:]
            better = free & (reduced < minv[1:])
            minv[1:][better] = reduced[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            u[row_of[used]] += delta
            v[used] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if row_of[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            row_of[j0] = row_of[j1]
            j0 = j1
    col_of = np.empty(n, dtype=np.int64)
    for j in range(1, m + 1):
        if row_of[j]:
            col_of[row_of[j] - 1] = j - 1
    return col_of, u[1:], v[1:]


def _components(adj):
    """Strongly connected component label per node (iterative Kosaraju)."""
    n = len(adj)
    seen = [False] * n
    order = []
    for start in range(n):
        if seen[start]:
            continue
        seen[start] = True
        stack = [(start, 0)]
        while stack:
            node, k = stack[-1]
            if k < len(adj[node]):
                stack[-1] = (node, k + 1)
                nb = adj[node][k]
                if not seen[nb]:
                    seen[nb] = True
                    stack.append((nb, 0))
            else:
                stack.pop()
                order.append(node)
    radj = [[] for _ in range(n)]
    for a, nbs in enumerate(adj):
        for b in nbs:
            radj[b].append(a)
    comp = [-1] * n
    label = 0
    for start in reversed(order):
        if comp[start] >= 0:
            continue
        comp[start] = label
        stack = [start]
        while stack:
            x = stack.pop()
            for y in radj[x]:
                if comp[y] < 0:
                    comp[y] = label
                    stack.append(y)
        label += 1
    return comp


def _usable_edges(cost, col_of, u, v):
    """Edges that lie in at least one optimal assignment, for ``n <= m``.

    Such edges have zero reduced cost. Two optima differ by alternating
    cycles and by alternating paths that swap one zero-potential column for
    another; an extra node closes those paths into cycles, so an edge is
    usable iff its ends share a strongly connected component of the tight
    graph. Tolerances only widen the set; callers confirm candidates exactly.
    """
    n, m = cost.shape
    tight = cost - u[:, None] - v[None, :] <= 1e-9 * (
        1.0 + np.abs(cost) + np.abs(u)[:, None] + np.abs(v)[None, :])
    v_zero = np.abs(v) <= 1e-9 * (1.0 + np.max(np.abs(cost), axis=0))
    row_of = np.full(m, -1, dtype=np.int64)
    row_of[col_of] = np.arange(n)
    z = n + m  # rows are 0..n-1, columns n..n+m-1
    adj = [[] for _ in range(n + m + 1)]
    for i in range(n):
        adj[i] = [n + int(j) for j in np.flatnonzero(tight[i]) if j != col_of[i]]
    for j in range(m):
        if row_of[j] >= 0:
            adj[n + j].append(int(row_of[j]))
        if v_zero[j]:
            if row_of[j] < 0:
                adj[n + j].append(z)
            adj[z].append(n + j)
    comp = np.asarray(_components(adj))
    return tight & (comp[:n, None] == comp[None, n:n + m])


def _optimal(cost):
    """One optimal assignment (sorted pairs) and the mask of co-optimal edges."""
    n, m = cost.shape
    if n <= m:
        col_of, u, v = _solve(cost)
        return [(i, int(col_of[i])) for i in range(n)], _usable_edges(cost, col_of, u, v)
    col_of, u, v = _solve(cost.T)
    pairs = sorted((int(col_of[j]), j) for j in range(m))
    return pairs, _usable_edges(cost.T, col_of, u, v).T


def _complete(cost, prefix, used_cols):
    """Cheapest assignment extending ``prefix`` with rows after its last row, or None."""
    n, m = cost.shape
    need = min(n, m) - len(prefix)
    if need == 0:
        return list(prefix)
    rows = np.arange(prefix[-1][0] + 1, n)
    cols = np.flatnonzero(~used_cols)
    if rows.size < need or cols.size < need:
        return None
    sub, _ = _optimal(cost[np.ix_(rows, cols)])
    return sorted(list(prefix) + [(int(rows[a]), int(cols[b])) for a, b in sub])


def hungarian(cost) -> List[Tuple[int, int]]:
    """Minimum-cost assignment of ``min(n, m)`` disjoint (row, col) pairs.

    Among equal-cost optima the lexicographically smallest sorted pair list
    wins. Tie candidates are screened with the dual potentials and then
    confirmed by re-solving the remainder, so tie-free matrices cost a
    single solve.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError("cost must be a 2-D matrix")
    if not np.all(np.isfinite(cost)):
        raise NonFiniteCost("cost matrix contains NaN or infinity")
    n, m = cost.shape
    if n == 0 or m == 0:
        return []
    best, usable = _optimal(cost)
    total = assignment_cost(cost, best)
    fixed: List[Tuple[int, int]] = []
    used = np.zeros(m, dtype=bool)
    while len(fixed) < len(best):
        nxt = chosen = best[len(fixed)]
        first_row = fixed[-1][0] + 1 if fixed else 0
        for r in range(first_row, nxt[0] + 1):
            for c in np.flatnonzero(usable[r] & ~used):
                if (r, int(c)) >= nxt:
                    break
                used[c] = True
                trial = _complete(cost, fixed + [(r, int(c))], used)
                used[c] = False
                if trial is not None and assignment_cost(cost, trial) <= total:
                    best, chosen = trial, (r, int(c))
                    total = assignment_cost(cost, trial)
                    break
            if chosen != nxt:
                break
        fixed.append(chosen)
        used[chosen[1]] = True
    return fixed


def assignment_cost(cost, pairs) -> float:
    """Correctly rounded total, independent of pair order."""
    cost = np.asarray(cost, dtype=np.float64)
    return math.fsum(cost[r, c] for r, c in pairs)


# ---------------------------------------------------------------------------
# costs and losses

def _anchor_vec(a) -> np.ndarray:
    if isinstance(a, InstanceAnchor):
        return np.asarray(a.to_vector())
    vec = np.asarray(a, dtype=np.float64).reshape(-1)
    if vec.size != ANCHOR_DIM:
        raise InvariantViolation("anchor", f"expected {ANCHOR_DIM} values, got {vec.size}")
    return vec


def pairwise_cost(pred_anchor, class_probs, gt_class, gt_anchor,
                  cfg: MatchCostConfig = MatchCostConfig()) -> float:
    """``lambda_cls * (1 - p[gt_class]) + lambda_reg * |pred - gt|_1`` over the 10 anchor values."""
    probs = np.asarray(class_probs, dtype=np.float64).reshape(-1)
    if abs(probs.sum() - 1.0) > 1e-6 or np.any(probs < 0):
        raise InvariantViolation("class_probs", "must be a probability vector summing to 1")
    if not 0 <= gt_class < probs.size:
        raise ClassOutOfRange(f"class {gt_class} outside [0, {probs.size})")
    l1 = float(np.sum(np.abs(_anchor_vec(pred_anchor) - _anchor_vec(gt_anchor))))
    return cfg.lambda_cls * (1.0 - float(probs[gt_class])) + cfg.lambda_reg * l1


def cost_matrix(pred_anchors, pred_class_probs, gt_classes, gt_anchors,
                cfg: MatchCostConfig = MatchCostConfig()) -> np.ndarray:
    out = np.zeros((len(pred_anchors), len(gt_anchors)))
    for i, (pa, pp) in enumerate(zip(pred_anchors, pred_class_probs)):
        for j, (gc, ga) in enumerate(zip(gt_classes, gt_anchors)):
            out[i, j] = pairwise_cost(pa, pp, gc, ga, cfg)
    return out


def match_predictions(pred_anchors, pred_class_probs, gt_classes, gt_anchors,
                      cfg: MatchCostConfig = MatchCostConfig()):
    return hungarian(cost_matrix(pred_anchors, pred_class_probs, gt_classes, gt_anchors, cfg))


def l1_loss(pred_anchor, gt_anchor) -> float:
    """Mean absolute difference over the 10 anchor components."""
    return float(np.mean(np.abs(_anchor_vec(pred_anchor) - _anchor_vec(gt_anchor))))


def _softplus(x):
    return np.logaddexp(0.0, x)


def focal_loss(logit, target, alpha=0.25, gamma=2.0):
    """Sigmoid focal loss and its derivative with respect to the logit.

    Works on scalars or arrays. With ``z = logit`` for positives and
    ``-logit`` for negatives, ``p_t = sigmoid(z)`` and

        loss = alpha_t * sigmoid(-z)**gamma * softplus(-z)
        dloss/dz = -alpha_t * sigmoid(-z)**gamma * (gamma * sigmoid(z) * softplus(-z) + sigmoid(-z))

    Everything is written in terms of softplus so large |logit| stays finite.
    """
    x = np.asarray(logit, dtype=np.float64)
    t = np.asarray(target)
    if not np.all((t == 0) | (t == 1)):
        raise ValueError("targets must be 0 or 1")
    sign = np.where(t == 1, 1.0, -1.0)
    alpha_t = np.where(t == 1, alpha, 1.0 - alpha)
    z = sign * x
    sp_neg = _softplus(-z)            # -log p_t
    q = np.exp(-_softplus(z))         # 1 - p_t
    p_t = np.exp(-sp_neg)
    mod = q ** gamma
    loss = alpha_t * mod * sp_neg
    dz = -alpha_t * mod * (gamma * p_t * sp_neg + q)
    grad = sign * dz
    if loss.ndim == 0:
        return float(loss), float(grad)
    return loss, grad


def occupancy_loss(voxel_indices, logits, gt_occupied, alpha=0.25, gamma=2.0) -> float:
    """Mean focal loss over an enumerated voxel set; targets are GT membership."""
    idx = np.asarray(voxel_indices, dtype=np.int64).reshape(-1)
    logits = np.asarray(logits, dtype=np.float64).reshape(-1)
    gt = np.unique(np.asarray(gt_occupied, dtype=np.int64).reshape(-1))
    if idx.size != logits.size:
        raise VoxelEnumerationMismatch(f"{idx.size} voxels but {logits.size} logits")
    if idx.size == 0:
        raise VoxelEnumerationMismatch("empty voxel enumeration")
    if np.unique(idx).size != idx.size:
        raise VoxelEnumerationMismatch("voxel enumeration contains duplicates")
    missing = np.setdiff1d(gt, idx, assume_unique=True)
    if missing.size:
        raise VoxelEnumerationMismatch(f"{missing.size} GT voxels outside the enumeration")
    target = np.isin(idx, gt).astype(np.int64)
    loss, _ = focal_loss(logits, target, alpha, gamma)
    return float(np.mean(loss))


def classification_loss(logits, class_ids, n_classes, alpha=0.25, gamma=2.0) -> float:
    """Multi-class sigmoid focal loss with one-hot targets, averaged over instances."""
    logits = np.asarray(logits, dtype=np.float64).reshape(-1, n_classes)
    targets = np.zeros(logits.shape, dtype=np.int64)
    for row, c in enumerate(class_ids):
        if not 0 <= c < n_classes:
            raise ClassOutOfRange(f"class {c} outside [0, {n_classes})")
        targets[row, c] = 1
    if logits.shape[0] == 0:
        return 0.0
    loss, _ = focal_loss(logits, targets, alpha, gamma)
    return float(loss.sum() / logits.shape[0])


def regression_loss(pairs, pred_anchors, gt_anchors) -> float:
    """Mean anchor L1 over matched (pred, gt) pairs."""
    if not pairs:
        return 0.0
    return float(np.mean([l1_loss(pred_anchors[i], gt_anchors[j]) for i, j in pairs]))


def total_loss(l_reg, l_cls, l_occ, cfg: MatchCostConfig = MatchCostConfig()) -> float:
    return cfg.w_reg * l_reg + cfg.w_cls * l_cls + cfg.w_occ * l_occ


# ---------------------------------------------------------------------------
# self-checks used by ``instocc losscheck``

def brute_force_assignment(cost) -> float:
    """Exhaustive minimum over all injections of the smaller side; small n only."""
    cost = np.asarray(cost, dtype=np.float64)
    n, m = cost.shape
    if n == 0 or m == 0:
        return 0.0
    if n > m:
        cost, n, m = cost.T, m, n
    perms = np.array(list(permutations(range(m), n)), dtype=np.int64)
    totals = cost[np.arange(n), perms].sum(axis=1)
    # re-score near-minimal candidates exactly
    near = perms[totals <= totals.min() + 1e-9 * (1.0 + abs(totals.min()))]
    return min(math.fsum(cost[np.arange(n), p]) for p in near)


def central_difference(fn, x, h=1e-5) -> float:
    return (fn(x + h) - fn(x - h)) / (2.0 * h)


def gradient_check(n=1000, seed=0, h=1e-5, max_abs_logit=10.0):
    """Worst relative error between analytic and finite-difference focal gradients."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        x = float(rng.uniform(-max_abs_logit, max_abs_logit))
        t = int(rng.integers(0, 2))
        alpha = float(rng.uniform(0.05, 0.95))
        gamma = float(rng.uniform(0.0, 5.0))
        _, grad = focal_loss(x, t, alpha, gamma)
        fd = central_difference(lambda v: focal_loss(v, t, alpha, gamma)[0], x, h)
        rel = abs(grad - fd) / max(abs(grad), abs(fd))
        worst = max(worst, rel)
    return worst


def hungarian_check(n=500, seed=0, max_size=7):
    """Worst |hungarian - brute force| total cost over random matrices."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        rows, cols = (int(v) for v in rng.integers(1, max_size + 1, size=2))
        cost = rng.integers(0, 20, size=(rows, cols)).astype(float) if rng.random() < 0.5 \
            else rng.uniform(-5, 5, size=(rows, cols))
        pairs = hungarian(cost)
        worst = max(worst, abs(assignment_cost(cost, pairs) - brute_force_assignment(cost)))
    return worst
