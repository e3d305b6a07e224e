"""Entropic optimal transport on small point sets.

Cost matrices, Sinkhorn scaling for uniform and general marginals (the literal
multiplicative form plus a log-domain twin), brute-force exact oracles, and
gradients of the transport cost with the plan held fixed.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass
from typing import Union

import numpy as np
from scipy.spatial.distance import cdist
from scipy.special import logsumexp

from otdistill.errors import (
    EmptyMarginal,
    InvalidInput,
    NumericalUnderflow,
    SizeMismatch,
    TooLarge,
)

logger = logging.getLogger(__name__)

MARGINAL_TOLERANCE = 1e-6
MAX_EXACT_POINTS = 8
DEFAULT_DELTA = 1e-9


@dataclass(frozen=True, eq=False)
class CostMatrix:
    values: np.ndarray
    p: float

    @classmethod
    def from_array(cls, values, p: float = 1.0) -> "CostMatrix":
        arr = np.asarray(values, dtype=np.float64)
        if arr.ndim != 2 or arr.size == 0:
            raise InvalidInput("cost matrix must be a nonempty 2-D array", details={"shape": list(arr.shape)})
        if not np.all(np.isfinite(arr)):
            raise InvalidInput("cost matrix contains non-finite entries")
        if np.any(arr < 0):
            raise InvalidInput("cost matrix contains negative entries")
        return cls(values=arr, p=float(p))

    @property
    def shape(self) -> tuple:
        return self.values.shape

    def transpose(self) -> "CostMatrix":
        return CostMatrix(values=np.ascontiguousarray(self.values.T), p=self.p)


@dataclass(frozen=True, eq=False)
class TransportPlan:
    coupling: np.ndarray
    row_marginal: np.ndarray
    col_marginal: np.ndarray

    @property
    def total_mass(self) -> float:
        return float(self.coupling.sum())

    def marginal_violation(self) -> float:
        rows = np.abs(self.coupling.sum(axis=1) - self.row_marginal).max()
        cols = np.abs(self.coupling.sum(axis=0) - self.col_marginal).max()
        return float(max(rows, cols))

    def is_feasible(self, tol: float = MARGINAL_TOLERANCE) -> bool:
        if np.any(self.coupling < 0):
            return False
        return self.marginal_violation() <= tol and abs(self.total_mass - 1.0) <= tol

    def transposed(self) -> "TransportPlan":
        return TransportPlan(
            coupling=np.ascontiguousarray(self.coupling.T),
            row_marginal=self.col_marginal,
            col_marginal=self.row_marginal,
        )


@dataclass(frozen=True, eq=False)
class SinkhornResult:
    plan: TransportPlan
    distance: float
    iterations_run: int
    max_marginal_violation: float
    raw_marginal_violation: float = 0.0


CostLike = Union[CostMatrix, np.ndarray]


def _as_points(X, name: str) -> np.ndarray:
    arr = np.asarray(X, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise InvalidInput(f"{name} must be a nonempty (n, d) point set", details={"shape": list(arr.shape)})
    if not np.all(np.isfinite(arr)):
        raise InvalidInput(f"{name} contains non-finite coordinates")
    return arr


def _cost_values(D: CostLike) -> np.ndarray:
    if isinstance(D, CostMatrix):
        return D.values
    return CostMatrix.from_array(D).values


def _as_marginal(w, size: int, name: str) -> np.ndarray:
    arr = np.asarray(w, dtype=np.float64)
    if arr.ndim != 1 or arr.shape[0] != size:
        raise SizeMismatch(
            f"marginal {name} has shape {list(arr.shape)}, expected ({size},)",
            details={"name": name, "expected": size},
        )
    if not np.all(np.isfinite(arr)) or np.any(arr < 0):
        raise InvalidInput(f"marginal {name} must be finite and nonnegative")
    total = arr.sum()
    if total == 0:
        raise EmptyMarginal(f"marginal {name} has no mass", details={"name": name})
    if abs(total - 1.0) > 1e-8:
        raise InvalidInput(f"marginal {name} must sum to 1", details={"name": name, "sum": float(total)})
    return arr


def _check_regularization(lam: float, T: int) -> None:
    if not lam > 0 or not np.isfinite(lam):
        raise InvalidInput("regularization must be a positive finite number", details={"lambda": lam})
    if int(T) < 1:
        raise InvalidInput("iteration count must be >= 1", details={"iterations": T})


def _check_kernel(K: np.ndarray, lam: float, rows=None, cols=None) -> None:
    row_mass = K.sum(axis=1)
    col_mass = K.sum(axis=0)
    if rows is not None:
        row_mass = row_mass[rows]
    if cols is not None:
        col_mass = col_mass[cols]
    if np.any(row_mass == 0) or np.any(col_mass == 0):
        raise NumericalUnderflow(
            "exp(-D/lambda) underflowed to an all-zero row or column; raise lambda or use the log-domain solver",
            details={"lambda": float(lam)},
        )


def round_to_marginals(coupling, row, col) -> np.ndarray:
    """Project a nonnegative coupling onto the plans with exactly these marginals.

    Rows with excess mass are scaled down, then columns, and the missing mass
    is added back as the outer product of the row and column deficits.
    """
    F = np.asarray(coupling, dtype=np.float64)
    row = np.asarray(row, dtype=np.float64)
    col = np.asarray(col, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        x = np.where(F.sum(axis=1) > 0, np.minimum(row / F.sum(axis=1), 1.0), 1.0)
        F = F * x[:, None]
        y = np.where(F.sum(axis=0) > 0, np.minimum(col / F.sum(axis=0), 1.0), 1.0)
        F = F * y[None, :]
    err_row = np.maximum(row - F.sum(axis=1), 0.0)
    err_col = np.maximum(col - F.sum(axis=0), 0.0)
    missing = err_row.sum()
    if missing > 0:
        F = F + np.outer(err_row, err_col) / missing
    return F


def _result(
    coupling: np.ndarray,
    row: np.ndarray,
    col: np.ndarray,
    values: np.ndarray,
    T: int,
    *,
    rounded: bool = False,
) -> SinkhornResult:
    if not np.all(np.isfinite(coupling)):
        raise NumericalUnderflow("Sinkhorn scaling produced non-finite entries")
    raw = TransportPlan(coupling=coupling, row_marginal=row, col_marginal=col)
    raw_violation = raw.marginal_violation()
    if raw_violation > 1e-3:
        logger.warning(f"Sinkhorn plan violates marginals by {raw_violation:.3e} after {T} iterations")
    plan = TransportPlan(coupling=round_to_marginals(coupling, row, col), row_marginal=row, col_marginal=col) if rounded else raw
    distance = float(np.sum(plan.coupling * values))
    return SinkhornResult(
        plan=plan,
        distance=distance,
        iterations_run=int(T),
        max_marginal_violation=plan.marginal_violation(),
        raw_marginal_violation=raw_violation,
    )


def cost_matrix(A, B, p: float = 1.0) -> CostMatrix:
    """Pairwise l_p distances between the rows of A (n x d) and B (m x d)."""
    A = _as_points(A, "A")
    B = _as_points(B, "B")
    if A.shape[1] != B.shape[1]:
        raise SizeMismatch(
            "point sets have different dimensions",
            details={"dim_a": A.shape[1], "dim_b": B.shape[1]},
        )
    p = float(p)
    if p < 1:
        raise InvalidInput("norm order p must be >= 1", details={"p": p})
    if p == 1.0:
        values = cdist(A, B, "cityblock")
    elif p == 2.0:
        values = cdist(A, B, "euclidean")
    else:
        values = cdist(A, B, "minkowski", p=p)
    return CostMatrix(values=values, p=p)


def scaled_regularization(D: CostLike, scale: float) -> float:
    """Regularization proportional to the mean cost; 1.0 when every cost is zero."""
    mean = float(_cost_values(D).mean())
    if mean <= 0:
        return 1.0
    return scale * mean


def sinkhorn_uniform(D: CostLike, lam: float, T: int) -> SinkhornResult:
    """Alternating row/column normalization of exp(-D/lam) onto 1/n rows and 1/m columns.

    The last iterate is rounded onto the uniform marginals, so distance is the
    cost of a feasible plan; raw_marginal_violation records the iterate itself.
    """
    values = _cost_values(D)
    _check_regularization(lam, T)
    n, m = values.shape
    K = np.exp(-values / lam)
    _check_kernel(K, lam)
    with np.errstate(divide="ignore", invalid="ignore"):
        for _ in range(int(T)):
            K = K / (n * K.sum(axis=1, keepdims=True))
            K = K / (m * K.sum(axis=0, keepdims=True))
    return _result(K, np.full(n, 1.0 / n), np.full(m, 1.0 / m), values, T, rounded=True)


def sinkhorn_uniform_log(D: CostLike, lam: float, T: int) -> SinkhornResult:
    """Log-domain twin of sinkhorn_uniform; same iterates, no underflow."""
    values = _cost_values(D)
    _check_regularization(lam, T)
    n, m = values.shape
    log_k = -values / lam
    log_n = np.log(n)
    log_m = np.log(m)
    for _ in range(int(T)):
        log_k = log_k - (logsumexp(log_k, axis=1, keepdims=True) + log_n)
        log_k = log_k - (logsumexp(log_k, axis=0, keepdims=True) + log_m)
    return _result(np.exp(log_k), np.full(n, 1.0 / n), np.full(m, 1.0 / m), values, T, rounded=True)


def sinkhorn_marginals(
    C: CostLike,
    a,
    b,
    eps: float,
    T: int,
    delta: float = DEFAULT_DELTA,
) -> SinkhornResult:
    """Scaling-vector Sinkhorn with prescribed marginals and a stabilizer delta."""
    values = _cost_values(C)
    n, m = values.shape
    a = _as_marginal(a, n, "a")
    b = _as_marginal(b, m, "b")
    _check_regularization(eps, T)
    if not delta > 0:
        raise InvalidInput("delta must be > 0", details={"delta": delta})
    K = np.exp(-values / eps)
    _check_kernel(K, eps, rows=a > 0, cols=b > 0)
    u = np.full(n, 1.0 / n)
    v = np.full(m, 1.0 / m)
    for _ in range(int(T)):
        u = a / (K @ v + delta)
        v = b / (K.T @ u + delta)
    coupling = u[:, None] * K * v[None, :]
    return _result(coupling, a, b, values, T)


def exact_ot_assignment(A, B, p: float = 1.0) -> float:
    """Exact uniform-marginal OT cost between equal-size sets by enumerating all n! matchings."""
    A = _as_points(A, "A")
    B = _as_points(B, "B")
    n = A.shape[0]
    if B.shape[0] != n:
        raise SizeMismatch(
            "exact assignment needs equal-size point sets",
            details={"n_a": n, "n_b": B.shape[0]},
        )
    if n > MAX_EXACT_POINTS:
        raise TooLarge(
            f"brute-force assignment is limited to {MAX_EXACT_POINTS} points",
            details={"n": n},
        )
    values = cost_matrix(A, B, p).values
    perms = np.array(list(itertools.permutations(range(n))))
    totals = values[np.arange(n), perms].sum(axis=1)
    return float(totals.min() / n)


def exact_ot_2x2(C, a, b) -> float:
    """Closed-form OT on a 2x2 cost: the polytope is a segment in coupling[0][0]."""
    values = np.asarray(C, dtype=np.float64)
    if values.shape != (2, 2):
        raise SizeMismatch("exact_ot_2x2 needs a 2x2 cost", details={"shape": list(values.shape)})
    a = _as_marginal(a, 2, "a")
    b = _as_marginal(b, 2, "b")
    lo = max(0.0, a[0] + b[0] - 1.0)
    hi = min(a[0], b[0])

    def objective(t: float) -> float:
        coupling = np.array([[t, a[0] - t], [b[0] - t, 1.0 - a[0] - b[0] + t]])
        return float(np.sum(values * coupling))

    return min(objective(lo), objective(hi))


def fixed_plan_objective(coupling, A, B, p: float = 1.0) -> float:
    return float(np.sum(np.asarray(coupling) * cost_matrix(A, B, p).values))


def fixed_plan_gradients(coupling, A, B, p: float = 1.0) -> np.ndarray:
    """Gradient of <P, D(A, B)> w.r.t. every row of A with P held fixed.

    Coincident points contribute zero (p=2); for p=1 the subgradient is 0
    componentwise wherever a coordinate difference is exactly 0.
    """
    A = _as_points(A, "A")
    B = _as_points(B, "B")
    coupling = np.asarray(coupling, dtype=np.float64)
    if coupling.shape != (A.shape[0], B.shape[0]):
        raise SizeMismatch(
            "plan shape does not match the point sets",
            details={"plan": list(coupling.shape), "n": A.shape[0], "m": B.shape[0]},
        )
    diff = A[:, None, :] - B[None, :, :]
    if p == 1:
        per_term = np.sign(diff)
    elif p == 2:
        norms = np.linalg.norm(diff, axis=2, keepdims=True)
        per_term = np.divide(diff, norms, out=np.zeros_like(diff), where=norms > 0)
    else:
        raise InvalidInput("fixed-plan gradients support p in {1, 2}", details={"p": p})
    return np.einsum("ij,ijd->id", coupling, per_term)


def grad_fixed_plan(plan: TransportPlan, query_index: int, A, B, p: float = 1.0) -> np.ndarray:
    A = _as_points(A, "A")
    if not 0 <= query_index < A.shape[0]:
        raise InvalidInput("query index out of range", details={"index": query_index, "n": A.shape[0]})
    row = plan.coupling[query_index : query_index + 1]
    if plan.coupling.shape[0] != A.shape[0]:
        raise SizeMismatch("plan rows do not match A", details={"plan_rows": plan.coupling.shape[0], "n": A.shape[0]})
    return fixed_plan_gradients(row, A[query_index : query_index + 1], B, p)[0]
