"""Training objectives: entropic transport balancing plus the three
supervised terms (treatment cross-entropy, counterfactual mapping MSE,
factual outcome MSE) and their weighted combination.

The group-balancing discrepancy is an entropic-regularized approximation of
the Wasserstein-1 distance with Euclidean ground cost, computed by
alternating Sinkhorn scaling iterations.  Gradients treat the converged
transport plan as fixed, so both training and finite-difference probes see
the same function of the inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericError, ValidationError

# Probability clamp for the cross-entropy term.
BCE_EPS = 1e-7


@dataclass(frozen=True)
class LossWeights:
    """Weights of the three constraint terms added to the prediction loss."""

    adjustment: float = 1e-4
    confounder: float = 0.01
    cf_confounder: float = 1.0

    def __post_init__(self):
        for name in ("adjustment", "confounder", "cf_confounder"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValidationError(f"loss weight {name} must be finite and >= 0, got {v}")


@dataclass(frozen=True)
class LossBreakdown:
    prediction: float
    adjustment: float
    confounder: float
    cf_confounder: float
    total: float

    def as_dict(self) -> dict[str, float]:
        return {
            "prediction": self.prediction,
            "adjustment": self.adjustment,
            "confounder": self.confounder,
            "cf_confounder": self.cf_confounder,
            "total": self.total,
        }


@dataclass(frozen=True)
class SinkhornConfig:
    epsilon: float = 0.1
    max_iters: int = 200
    convergence_tol: float = 1e-6
    max_points_per_group: int = 512

    def __post_init__(self):
        if self.epsilon <= 0 or self.max_iters <= 0 or self.convergence_tol <= 0:
            raise ValidationError("sinkhorn epsilon/max_iters/convergence_tol must be positive")
        if self.max_points_per_group <= 0:
            raise ValidationError("max_points_per_group must be positive")


@dataclass(frozen=True)
class TransportPlan:
    """Converged coupling between two point clouds plus the subsample used."""

    plan: np.ndarray
    rows_a: np.ndarray
    rows_b: np.ndarray
    iterations: int
    converged: bool


def _pairwise_euclidean(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    sq = np.sum(a * a, axis=1)[:, None] + np.sum(b * b, axis=1)[None, :]
    sq -= 2.0 * (a @ b.T)
    np.maximum(sq, 0.0, out=sq)
    return np.sqrt(sq)


def _sinkhorn_log_domain(cost, eps, max_iters, tol):
    m, n = cost.shape
    log_a = -np.log(m)
    log_b = -np.log(n)
    f = np.zeros(m)
    g = np.zeros(n)
    it = 0
    converged = False
    for it in range(1, max_iters + 1):
        mat = (g[None, :] - cost) / eps
        mx = mat.max(axis=1)
        f = eps * (log_a - (mx + np.log(np.exp(mat - mx[:, None]).sum(axis=1))))
        mat = (f[:, None] - cost) / eps
        mx = mat.max(axis=0)
        g = eps * (log_b - (mx + np.log(np.exp(mat - mx[None, :]).sum(axis=0))))
        plan = np.exp((f[:, None] + g[None, :] - cost) / eps)
        if np.abs(plan.sum(axis=1) - np.exp(log_a)).sum() < tol:
            converged = True
            break
    plan = np.exp((f[:, None] + g[None, :] - cost) / eps)
    return plan, it, converged


def _sinkhorn_scaling(cost, eps, max_iters, tol):
    """Alternating scaling iterations; falls back to log-domain updates when
    the kernel under/overflows."""
    m, n = cost.shape
    shift = cost.min()
    kernel = np.exp(-(cost - shift) / eps)
    a = np.full(m, 1.0 / m)
    b = np.full(n, 1.0 / n)
    u = np.ones(m)
    v = np.ones(n)
    it = 0
    converged = False
    for it in range(1, max_iters + 1):
        kv = kernel @ v
        ktu = kernel.T @ (a / np.where(kv > 0, kv, 1.0))
        if np.any(kv <= 0) or np.any(ktu <= 0) or not (
            np.all(np.isfinite(kv)) and np.all(np.isfinite(ktu))
        ):
            return _sinkhorn_log_domain(cost, eps, max_iters, tol)
        u = a / kv
        v = b / ktu
        err = np.abs(u * (kernel @ v) - a).sum()
        if not np.isfinite(err):
            return _sinkhorn_log_domain(cost, eps, max_iters, tol)
        if err < tol:
            converged = True
            break
    plan = u[:, None] * kernel * v[None, :]
    return plan, it, converged


def sinkhorn_plan(
    points_a: np.ndarray,
    points_b: np.ndarray,
    cfg: SinkhornConfig,
    seed: int = 0,
) -> tuple[float, TransportPlan]:
    """Entropic transport distance between uniform clouds, with the plan."""
    a = np.atleast_2d(np.asarray(points_a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(points_b, dtype=np.float64))
    if a.size == 0 or b.size == 0:
        raise ValidationError("both point groups must be non-empty")
    if a.shape[1] != b.shape[1]:
        raise ValidationError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise NumericError("non-finite values in transport inputs")

    rng = np.random.default_rng(seed)
    rows_a = np.arange(a.shape[0])
    rows_b = np.arange(b.shape[0])
    cap = cfg.max_points_per_group
    if a.shape[0] > cap:
        rows_a = np.sort(rng.choice(a.shape[0], size=cap, replace=False))
    if b.shape[0] > cap:
        rows_b = np.sort(rng.choice(b.shape[0], size=cap, replace=False))

    cost = _pairwise_euclidean(a[rows_a], b[rows_b])
    plan, iters, converged = _sinkhorn_scaling(
        cost, cfg.epsilon, cfg.max_iters, cfg.convergence_tol
    )
    value = float(np.sum(plan * cost))
    return value, TransportPlan(
        plan=plan, rows_a=rows_a, rows_b=rows_b, iterations=iters, converged=converged
    )


def sinkhorn_wasserstein(
    points_a: np.ndarray,
    points_b: np.ndarray,
    cfg: SinkhornConfig,
    seed: int = 0,
) -> float:
    """Approximate Wasserstein-1 distance between two point clouds."""
    value, _ = sinkhorn_plan(points_a, points_b, cfg, seed=seed)
    return value


def transport_cost(points_a, points_b, plan: TransportPlan) -> float:
    """Transport cost of a frozen plan re-evaluated at (possibly new) points."""
    cost = _pairwise_euclidean(
        np.atleast_2d(points_a)[plan.rows_a], np.atleast_2d(points_b)[plan.rows_b]
    )
    return float(np.sum(plan.plan * cost))


def transport_cost_grad(points_a, points_b, plan: TransportPlan):
    """Gradient of ``transport_cost`` w.r.t. the full point arrays.

    Rows omitted by subsampling get zero gradient; coincident points
    contribute zero (the distance kink is flattened there).
    """
    a = np.atleast_2d(np.asarray(points_a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(points_b, dtype=np.float64))
    sub_a = a[plan.rows_a]
    sub_b = b[plan.rows_b]
    dist = _pairwise_euclidean(sub_a, sub_b)
    w = plan.plan / np.where(dist > 0, dist, 1.0)
    w[dist == 0] = 0.0
    grad_sub_a = w.sum(axis=1)[:, None] * sub_a - w @ sub_b
    grad_sub_b = w.sum(axis=0)[:, None] * sub_b - w.T @ sub_a
    grad_a = np.zeros_like(a)
    grad_b = np.zeros_like(b)
    grad_a[plan.rows_a] = grad_sub_a
    grad_b[plan.rows_b] = grad_sub_b
    return grad_a, grad_b


# ---------------------------------------------------------------------------
# Loss terms


def _group_rows(treatments, train_index):
    t = np.asarray(treatments).reshape(-1)
    idx = np.asarray(train_index, dtype=np.int64).reshape(-1)
    control = idx[t[idx] == 0]
    treated = idx[t[idx] == 1]
    return control, treated


def adjustment_loss(
    adj_embeddings: np.ndarray,
    treatments,
    train_index,
    cfg: SinkhornConfig,
    seed: int = 0,
) -> float:
    """Transport distance between control and treated adjustment embeddings."""
    control, treated = _group_rows(treatments, train_index)
    if control.size == 0 or treated.size == 0:
        raise ValidationError(
            "training split contains a single treatment group; resplit the data"
        )
    return sinkhorn_wasserstein(
        adj_embeddings[control], adj_embeddings[treated], cfg, seed=seed
    )


def confounder_loss(t_prob, treatments, train_index) -> float:
    """Mean binary cross-entropy of treatment probabilities on train units."""
    idx = np.asarray(train_index, dtype=np.int64).reshape(-1)
    p = np.clip(np.asarray(t_prob, dtype=np.float64)[idx], BCE_EPS, 1.0 - BCE_EPS)
    t = np.asarray(treatments, dtype=np.float64)[idx]
    return float(-np.mean(t * np.log(p) + (1.0 - t) * np.log(1.0 - p)))


def cf_confounder_loss(mapped, target, has_opp, train_index) -> float:
    """MSE between the mapped counterfactual confounder and the aggregated
    target, over train units that have opposite-treatment neighbors.

    The target is a constant: no gradient flows through it from this loss.
    Returns 0 when no train unit has an opposite-treatment neighbor.
    """
    idx = np.asarray(train_index, dtype=np.int64).reshape(-1)
    valid = idx[np.asarray(has_opp, dtype=bool)[idx]]
    if valid.size == 0:
        return 0.0
    diff = np.asarray(mapped)[valid] - np.asarray(target)[valid]
    return float(np.mean(diff * diff))


def prediction_loss(y_hat, y, train_index) -> float:
    """Mean squared factual-outcome error on train units."""
    idx = np.asarray(train_index, dtype=np.int64).reshape(-1)
    diff = np.asarray(y_hat, dtype=np.float64)[idx] - np.asarray(y, dtype=np.float64)[idx]
    return float(np.mean(diff * diff))


def total_loss(
    prediction: float,
    adjustment: float,
    confounder: float,
    cf_confounder: float,
    weights: LossWeights,
) -> LossBreakdown:
    """Weighted sum of the four loss components."""
    parts = {
        "prediction": prediction,
        "adjustment": adjustment,
        "confounder": confounder,
        "cf_confounder": cf_confounder,
    }
    for name, value in parts.items():
        if not np.isfinite(value):
            raise NumericError(f"loss component {name!r} is not finite: {value}")
    total = (
        prediction
        + weights.adjustment * adjustment
        + weights.confounder * confounder
        + weights.cf_confounder * cf_confounder
    )
    return LossBreakdown(
        prediction=float(prediction),
        adjustment=float(adjustment),
        confounder=float(confounder),
        cf_confounder=float(cf_confounder),
        total=float(total),
    )
