"""Ranking and contrastive losses over nested embeddings, with analytic gradients.

Three layers:

* single-dimension task losses: a margin hinge pushing query-positive cosine
  above query-negative cosine (`mnrl_hinge`), and an online contrastive loss
  over the hardest labeled pairs in a batch (`ocl`);
* `mrl_compose`, the weighted sum of a task loss across every nested prefix
  dimension;
* `multitask_step_loss`, the per-step combination of both composed losses.

All gradients are with respect to the raw (unnormalized) embedding entries.
A loss at prefix dimension m has identically zero gradient beyond position m.
`grad_check` verifies any of them against central finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import NumericalError, ZeroVectorError
from .nested import DimSet, NestedEmbedding, EPS_ZERO

Gradients = dict[str, object]


@dataclass
class TripletBatch:
    """Per-query (query, positives, negatives) raw embedding arrays.

    `positives[i]` and `negatives[i]` are (P_i, D) and (N_i, D) arrays for
    query i; every query must bring at least one of each.
    """

    queries: np.ndarray
    positives: list[np.ndarray]
    negatives: list[np.ndarray]
    dims: DimSet

    def __post_init__(self):
        self.queries = np.asarray(self.queries, dtype=np.float64)
        if self.queries.ndim != 2:
            raise ValueError("queries must be a (Q, D) array")
        q, d = self.queries.shape
        if q < 1:
            raise ValueError("triplet batch needs at least one query")
        if d != self.dims.full:
            raise ValueError(f"query width {d} != full dimension {self.dims.full}")
        if len(self.positives) != q or len(self.negatives) != q:
            raise ValueError("positives/negatives must align with queries")
        self.positives = [np.asarray(p, dtype=np.float64) for p in self.positives]
        self.negatives = [np.asarray(n, dtype=np.float64) for n in self.negatives]
        for name, groups in (("positives", self.positives), ("negatives", self.negatives)):
            for i, g in enumerate(groups):
                if g.ndim != 2 or g.shape[1] != d:
                    raise ValueError(f"{name}[{i}] must be (*, {d})")
                if g.shape[0] < 1:
                    raise ValueError(f"query {i} has empty {name}")

    @classmethod
    def from_embeddings(
        cls,
        queries: Sequence[NestedEmbedding],
        positives: Sequence[Sequence[NestedEmbedding]],
        negatives: Sequence[Sequence[NestedEmbedding]],
    ) -> "TripletBatch":
        dims = _common_dims([q for q in queries]
                            + [e for g in positives for e in g]
                            + [e for g in negatives for e in g])
        return cls(
            queries=np.stack([q.values for q in queries]),
            positives=[np.stack([e.values for e in g]) for g in positives],
            negatives=[np.stack([e.values for e in g]) for g in negatives],
            dims=dims,
        )

    def __len__(self) -> int:
        return self.queries.shape[0]


@dataclass
class PairBatch:
    """Parallel (left, right, label) arrays; label 1 marks a matching pair."""

    lefts: np.ndarray
    rights: np.ndarray
    labels: np.ndarray
    dims: DimSet

    def __post_init__(self):
        self.lefts = np.asarray(self.lefts, dtype=np.float64).reshape(-1, self.dims.full)
        self.rights = np.asarray(self.rights, dtype=np.float64).reshape(-1, self.dims.full)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        n = self.lefts.shape[0]
        if self.rights.shape[0] != n or self.labels.shape[0] != n:
            raise ValueError("lefts, rights and labels must have equal length")
        if n and not np.isin(self.labels, (0, 1)).all():
            raise ValueError("labels must be 0 or 1")

    @classmethod
    def from_embeddings(
        cls,
        lefts: Sequence[NestedEmbedding],
        rights: Sequence[NestedEmbedding],
        labels: Sequence[int],
    ) -> "PairBatch":
        dims = _common_dims(list(lefts) + list(rights))
        return cls(
            lefts=np.stack([e.values for e in lefts]),
            rights=np.stack([e.values for e in rights]),
            labels=np.asarray(list(labels)),
            dims=dims,
        )

    @classmethod
    def empty(cls, dims: DimSet) -> "PairBatch":
        d = dims.full
        return cls(np.zeros((0, d)), np.zeros((0, d)), np.zeros((0,), dtype=np.int64), dims)

    def __len__(self) -> int:
        return self.lefts.shape[0]


def _common_dims(embeddings: Sequence[NestedEmbedding]) -> DimSet:
    if not embeddings:
        raise ValueError("cannot infer dimensions from an empty embedding list")
    dims = embeddings[0].dims
    for e in embeddings[1:]:
        if e.dims != dims:
            raise ValueError("all embeddings in a batch must share the same dimension set")
    return dims


@dataclass(frozen=True)
class MrlConfig:
    """Nested dimension set M and per-dimension positive weights c_m."""

    dims: DimSet
    weights: tuple[float, ...]

    def __post_init__(self):
        weights = tuple(float(w) for w in self.weights)
        if len(weights) != len(self.dims):
            raise ValueError("one weight per nested dimension required")
        if any(w <= 0 for w in weights):
            raise ValueError("all nested-dimension weights must be positive")
        object.__setattr__(self, "weights", weights)

    @classmethod
    def uniform(cls, dims: DimSet) -> "MrlConfig":
        return cls(dims=dims, weights=(1.0,) * len(dims))


@dataclass
class LossOutput:
    """A loss value, its per-prefix-dimension breakdown, and input gradients.

    `gradients` mirrors the batch fields it was computed from: "queries" is a
    (Q, D) array, "positives"/"negatives" are per-query lists of (P_i, D) /
    (N_i, D) arrays, "lefts"/"rights" are (n, D) arrays.
    """

    value: float
    per_dim: dict[int, float]
    gradients: Gradients
    warnings: tuple[str, ...] = field(default=())


def _normalize_rows(rows: np.ndarray, m: int) -> tuple[np.ndarray, np.ndarray]:
    """Unit-normalized m-prefixes and their norms; errors on degenerate rows."""
    prefix = rows[:, :m]
    norms = np.linalg.norm(prefix, axis=1)
    if np.any(norms <= EPS_ZERO):
        raise ZeroVectorError(f"zero-norm {m}-prefix in batch")
    return prefix / norms[:, None], norms


def mnrl_hinge(batch: TripletBatch, margin: float, m: int) -> LossOutput:
    """Margin hinge over all query (positive, negative) combinations at prefix m.

    Per query: sum over i in 1..P, j in 1..N of
    max(0, margin - cos(q, p_i) + cos(q, n_j)); the total is averaged over
    queries. Zero exactly when every positive beats every negative by at
    least the margin.
    """
    if not 0.0 <= margin <= 2.0:
        raise ValueError(f"margin must be in [0, 2], got {margin}")
    m = batch.dims.require(m)
    nq = len(batch)
    d = batch.dims.full

    grad_q = np.zeros((nq, d))
    grad_p = [np.zeros_like(p) for p in batch.positives]
    grad_n = [np.zeros_like(n) for n in batch.negatives]

    total = 0.0
    for qi in range(nq):
        qh, qnorm = _normalize_rows(batch.queries[qi : qi + 1], m)
        qh = qh[0]
        ph, pnorms = _normalize_rows(batch.positives[qi], m)
        nh, nnorms = _normalize_rows(batch.negatives[qi], m)
        sp = ph @ qh
        sn = nh @ qh

        hinge = margin - sp[:, None] + sn[None, :]
        active = hinge > 0.0
        if not active.any():
            continue
        total += float(hinge[active].sum())

        # d loss / d similarity, before the final 1/Q
        wp = -active.sum(axis=1).astype(np.float64)
        wn = active.sum(axis=0).astype(np.float64)

        grad_q[qi, :m] = (
            wp @ ph - float(wp @ sp) * qh + wn @ nh - float(wn @ sn) * qh
        ) / float(qnorm[0])
        grad_p[qi][:, :m] = (wp[:, None] * (qh[None, :] - sp[:, None] * ph)) / pnorms[:, None]
        grad_n[qi][:, :m] = (wn[:, None] * (qh[None, :] - sn[:, None] * nh)) / nnorms[:, None]

    value = total / nq
    grad_q /= nq
    for g in grad_p:
        g /= nq
    for g in grad_n:
        g /= nq
    return LossOutput(
        value=value,
        per_dim={m: value},
        gradients={"queries": grad_q, "positives": grad_p, "negatives": grad_n},
    )


def mnrl_breakpoint_gap(batch: TripletBatch, margin: float, m: int) -> float:
    """Smallest |margin - cos(q,p) + cos(q,n)| over the batch.

    Finite-difference probes closer to a hinge activation boundary than this
    are unreliable; the gradient checker uses it to skip them.
    """
    m = batch.dims.require(m)
    gap = np.inf
    for qi in range(len(batch)):
        qh, _ = _normalize_rows(batch.queries[qi : qi + 1], m)
        qh = qh[0]
        ph, _ = _normalize_rows(batch.positives[qi], m)
        nh, _ = _normalize_rows(batch.negatives[qi], m)
        sp = ph @ qh
        sn = nh @ qh
        gap = min(gap, float(np.abs(margin - sp[:, None] + sn[None, :]).min()))
    return gap


def _ocl_selection(d_pos: np.ndarray, d_neg: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Hard-pair masks: positives farther than the closest negative, negatives
    closer than the farthest positive. With one class absent, the whole present
    class is selected (plain contrastive fallback)."""
    if d_pos.size and d_neg.size:
        sel_pos = d_pos > d_neg.min()
        sel_neg = d_neg < d_pos.max()
    else:
        sel_pos = np.ones_like(d_pos, dtype=bool)
        sel_neg = np.ones_like(d_neg, dtype=bool)
    return sel_pos, sel_neg


def ocl(batch: PairBatch, margin_c: float, m: int) -> LossOutput:
    """Online contrastive loss over the hardest pairs at prefix m.

    With cosine distance d = 1 - cos: mean of d^2 over selected (hard)
    positives plus mean of max(0, margin_c - d)^2 over selected negatives.
    An empty selected set contributes 0.
    """
    if not 0.0 < margin_c < 2.0:
        raise ValueError(f"margin_c must be in (0, 2), got {margin_c}")
    if len(batch) == 0:
        raise ValueError("online contrastive loss needs at least one pair")
    m = batch.dims.require(m)

    lh, lnorms = _normalize_rows(batch.lefts, m)
    rh, rnorms = _normalize_rows(batch.rights, m)
    cos = np.einsum("ij,ij->i", lh, rh)
    dist = 1.0 - cos

    pos = batch.labels == 1
    neg = ~pos
    sel_pos, sel_neg = _ocl_selection(dist[pos], dist[neg])

    value = 0.0
    # d loss / d dist, assembled over the full batch
    ddist = np.zeros(len(batch))
    if sel_pos.any():
        dp = dist[pos][sel_pos]
        value += float(np.mean(dp * dp))
        contrib = np.zeros(int(pos.sum()))
        contrib[sel_pos] = 2.0 * dp / sel_pos.sum()
        ddist[pos] = contrib
    if sel_neg.any():
        dn = dist[neg][sel_neg]
        slack = np.maximum(0.0, margin_c - dn)
        value += float(np.mean(slack * slack))
        contrib = np.zeros(int(neg.sum()))
        contrib[sel_neg] = -2.0 * slack / sel_neg.sum()
        ddist[neg] = contrib

    dcos = -ddist
    grad_l = np.zeros_like(batch.lefts)
    grad_r = np.zeros_like(batch.rights)
    grad_l[:, :m] = (dcos[:, None] * (rh - cos[:, None] * lh)) / lnorms[:, None]
    grad_r[:, :m] = (dcos[:, None] * (lh - cos[:, None] * rh)) / rnorms[:, None]

    return LossOutput(
        value=value,
        per_dim={m: value},
        gradients={"lefts": grad_l, "rights": grad_r},
    )


def ocl_breakpoint_gap(batch: PairBatch, margin_c: float, m: int) -> float:
    """Distance to the nearest hard-pair selection or hinge boundary."""
    m = batch.dims.require(m)
    lh, _ = _normalize_rows(batch.lefts, m)
    rh, _ = _normalize_rows(batch.rights, m)
    dist = 1.0 - np.einsum("ij,ij->i", lh, rh)
    pos = batch.labels == 1
    d_pos, d_neg = dist[pos], dist[~pos]
    gaps = []
    if d_neg.size:
        gaps.append(np.abs(margin_c - d_neg).min())
    if d_pos.size and d_neg.size:
        gaps.append(np.abs(d_pos - d_neg.min()).min())
        gaps.append(np.abs(d_neg - d_pos.max()).min())
    return float(min(gaps)) if gaps else np.inf


TaskLoss = Callable[[object, int], LossOutput]


def mrl_compose(task: TaskLoss, batch, config: MrlConfig) -> LossOutput:
    """Weighted sum of a single-dimension task loss over every nested dimension.

    Evaluation and summation run in fixed descending-M order so results are
    bit-reproducible. Gradient entry t accumulates a contribution from every
    m >= t, since each per-dimension gradient lives in its own prefix span.
    """
    value = 0.0
    per_dim: dict[int, float] = {}
    grads: Gradients | None = None
    warnings: tuple[str, ...] = ()
    for m, c in zip(config.dims, config.weights):
        try:
            out = task(batch, m)
        except Exception as e:
            e.args = e.args + (f"while composing nested dimension m={m}",)
            raise
        value += c * out.value
        per_dim[m] = out.value
        warnings += out.warnings
        scaled = _scale_gradients(out.gradients, c)
        grads = scaled if grads is None else _add_gradients(grads, scaled)
    return LossOutput(value=value, per_dim=per_dim, gradients=grads, warnings=warnings)


def multitask_step_loss(
    triplets: TripletBatch,
    pairs: PairBatch | None,
    config: MrlConfig,
    margin: float,
    margin_c: float,
    lambda_ocl: float,
) -> LossOutput:
    """Composed hinge loss plus lambda_ocl times the composed contrastive loss.

    An empty pair batch contributes 0 with a warning flag instead of failing,
    so ranking-only steps remain valid.
    """
    mnrl_out = mrl_compose(lambda b, m: mnrl_hinge(b, margin, m), triplets, config)
    warnings = mnrl_out.warnings
    if pairs is None or len(pairs) == 0:
        if lambda_ocl > 0:
            warnings += ("empty pair batch: contrastive term treated as 0",)
        ocl_out = None
    else:
        ocl_out = mrl_compose(lambda b, m: ocl(b, margin_c, m), pairs, config)
        warnings += ocl_out.warnings

    per_dim = {}
    value = 0.0
    for m, c in zip(config.dims, config.weights):
        task_m = mnrl_out.per_dim[m]
        if ocl_out is not None:
            task_m = task_m + lambda_ocl * ocl_out.per_dim[m]
        per_dim[m] = task_m
        value += c * task_m

    grads = dict(mnrl_out.gradients)
    if ocl_out is not None:
        grads.update(_scale_gradients(ocl_out.gradients, lambda_ocl))
    return LossOutput(value=value, per_dim=per_dim, gradients=grads, warnings=warnings)


def multitask_breakpoint_gap(
    triplets: TripletBatch,
    pairs: PairBatch | None,
    config: MrlConfig,
    margin: float,
    margin_c: float,
) -> float:
    """Minimum hinge/selection boundary distance across both losses and all dims."""
    gap = min(mnrl_breakpoint_gap(triplets, margin, m) for m in config.dims)
    if pairs is not None and len(pairs):
        gap = min(gap, min(ocl_breakpoint_gap(pairs, margin_c, m) for m in config.dims))
    return gap


def _scale_gradients(grads: Gradients, c: float) -> Gradients:
    out: Gradients = {}
    for key, g in grads.items():
        if isinstance(g, list):
            out[key] = [c * a for a in g]
        else:
            out[key] = c * g
    return out


def _add_gradients(a: Gradients, b: Gradients) -> Gradients:
    out: Gradients = {}
    for key in a:
        ga, gb = a[key], b[key]
        if isinstance(ga, list):
            out[key] = [x + y for x, y in zip(ga, gb)]
        else:
            out[key] = ga + gb
    return out


def flatten_gradients(grads: Gradients, order: Sequence[str]) -> np.ndarray:
    """Concatenate gradient blocks in a caller-chosen role order."""
    parts = []
    for key in order:
        g = grads[key]
        if isinstance(g, list):
            parts.extend(a.ravel() for a in g)
        else:
            parts.append(np.asarray(g).ravel())
    return np.concatenate(parts) if parts else np.zeros(0)


def grad_check(
    loss: Callable[[np.ndarray], tuple[float, np.ndarray]],
    params: np.ndarray,
    step: float,
    gap: Callable[[np.ndarray], float] | None = None,
    gap_threshold: float = 1e-7,
) -> float:
    """Max relative error between analytic gradients and central differences.

    `loss(theta)` must return (value, gradient). Per coordinate the relative
    error is |analytic - numeric| / max(1e-8, |analytic| + |numeric|). When a
    `gap` callable is given, coordinates whose probe points land within
    `gap_threshold` of a hinge or selection breakpoint are skipped, since the
    finite difference straddles a kink there.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    params = np.asarray(params, dtype=np.float64)
    _, analytic = loss(params)
    analytic = np.asarray(analytic, dtype=np.float64)
    if analytic.shape != params.shape:
        raise ValueError("analytic gradient shape must match params")

    worst = 0.0
    for i in range(params.size):
        probes = []
        skip = False
        for sign in (1.0, -1.0):
            theta = params.copy()
            theta[i] += sign * step
            if gap is not None and gap(theta) < gap_threshold:
                skip = True
                break
            v, _ = loss(theta)
            if not np.isfinite(v):
                raise NumericalError(f"non-finite loss at probe for coordinate {i}")
            probes.append(v)
        if skip:
            continue
        numeric = (probes[0] - probes[1]) / (2.0 * step)
        err = abs(analytic[i] - numeric) / max(1e-8, abs(analytic[i]) + abs(numeric))
        worst = max(worst, err)
    return worst
