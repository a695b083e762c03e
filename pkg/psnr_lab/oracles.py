"""
Closed-form evaluations of linear residual dynamics.

Each residual family, once its graph layers are linearized (W = I, no
activation), becomes a linear recursion in the propagation operator N. This
module evaluates those recursions step by step and through their closed forms,
so one can check the other. Everything is dense float64 with partial-pivot LU.
"""

import logging
import warnings
from dataclasses import dataclass, field
from typing import Literal

import numpy as np
from scipy.linalg import LinAlgWarning, lu_factor, lu_solve
from scipy.special import comb

from psnr_lab.errors import ContractError, DomainError, NumericError, RangeError, ShapeError
from psnr_lab.graph import build_graph, normalize
from psnr_lab.utils import substream

logger = logging.getLogger(__name__)

MAX_BINOMIAL_ORDER = 30
SOLVE_TOLERANCE = 1e-9
AGREEMENT_TOLERANCE = 1e-8

DynamicKind = Literal["resgcn", "appnp", "psnr"]


@dataclass
class LinearDynamic:
    """
    A linearized residual recursion.

    Attributes:
        kind: "resgcn", "appnp" or "psnr".
        operator: Dense n×n propagation matrix N.
        features: Dense n×d input H.
        k: Order (number of layers).
        alpha: Teleport weight for "appnp", in (0, 1].
        lambdas: For "psnr", the k-1 diagonals of Λ_1..Λ_{k-1} as length-n
            vectors with entries in (0, 1).
    """

    kind: DynamicKind
    operator: np.ndarray
    features: np.ndarray
    k: int
    alpha: float | None = None
    lambdas: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        n = self.operator.shape[0]
        if self.operator.shape != (n, n) or self.features.ndim != 2 or self.features.shape[0] != n:
            raise ShapeError("linear-dynamic", self.operator.shape, self.features.shape)
        if self.kind == "appnp" and (self.alpha is None or not (0.0 < self.alpha <= 1.0)):
            raise DomainError(f"appnp alpha must lie in (0, 1], got {self.alpha}")
        if self.kind == "psnr":
            if self.k < 1:
                raise ContractError(f"psnr dynamics start at k=1, got k={self.k}")
            if len(self.lambdas) != self.k - 1:
                raise ContractError(f"psnr dynamics of order {self.k} need {self.k - 1} Λ diagonals")
            for lam in self.lambdas:
                _check_diagonal(lam, n)
        elif self.k < 0:
            raise ContractError(f"order must be non-negative, got k={self.k}")


def _check_diagonal(lam: np.ndarray, n: int):
    if lam.shape != (n,):
        raise ShapeError("lambda", lam.shape, (n,))
    if not np.all((lam > 0.0) & (lam < 1.0)):
        raise DomainError("Λ diagonal entries must lie strictly in (0, 1)")


def iterate_linear(dyn: LinearDynamic) -> np.ndarray:
    """
    Run the recursion of `dyn` for k steps.

    resgcn: H_k = (I + N) H_{k-1};  appnp: H_k = αH + (1-α) N H_{k-1};
    psnr:   H_1 = N H, H_k = H_1 + Λ_{k-1}(H_1 - N H_{k-1}).
    """
    N, H = dyn.operator, dyn.features
    if dyn.kind == "resgcn":
        out = H.copy()
        for _ in range(dyn.k):
            out = out + N @ out
        return out
    if dyn.kind == "appnp":
        out = H.copy()
        for _ in range(dyn.k):
            out = dyn.alpha * H + (1.0 - dyn.alpha) * (N @ out)
        return out
    h1 = N @ H
    out = h1
    for lam in dyn.lambdas:
        out = h1 + lam[:, None] * (h1 - N @ out)
    return out


def _solve(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, float]:
    """LU solve of a·x = b, returning x and the max-abs residual relative to b."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", LinAlgWarning)
        with np.errstate(all="ignore"):
            factors = lu_factor(a)
            x = lu_solve(factors, b)
            residual = np.abs(a @ x - b).max() / max(1.0, np.abs(b).max())
    if not np.isfinite(residual):
        residual = np.inf
    return x, float(residual)


def closed_resgcn(N: np.ndarray, H: np.ndarray, k: int) -> np.ndarray:
    """H_k = Σ_{j=0..k} C(k, j) N^j H."""
    if k < 0:
        raise ContractError(f"order must be non-negative, got k={k}")
    if k > MAX_BINOMIAL_ORDER:
        raise RangeError(f"binomial closed form is exact only up to k={MAX_BINOMIAL_ORDER}, got {k}")
    if N.shape[1] != H.shape[0]:
        raise ShapeError("closed-resgcn", N.shape, H.shape)
    power = H.copy()
    out = np.zeros_like(H, dtype=np.float64)
    for j in range(k + 1):
        out += comb(k, j, exact=True) * power
        power = N @ power
    return out


def closed_appnp(N: np.ndarray, H: np.ndarray, alpha: float, k: int) -> np.ndarray:
    """
    H_k = ((1-α)N)^k H + α Σ_{j=0..k-1} ((1-α)N)^j H.

    Raises:
        DomainError: If α is not in (0, 1).
    """
    if not (0.0 < alpha < 1.0):
        raise DomainError(f"alpha must lie in (0, 1), got {alpha}")
    if k < 1:
        raise ContractError(f"order must be at least 1, got k={k}")
    if N.shape[1] != H.shape[0]:
        raise ShapeError("closed-appnp", N.shape, H.shape)
    P = (1.0 - alpha) * N
    term = H.copy()
    total = np.zeros_like(H, dtype=np.float64)
    for _ in range(k):
        total += term
        term = P @ term
    return term + alpha * total


def appnp_shift_term(N: np.ndarray, H: np.ndarray, alpha: float) -> np.ndarray:
    """T = α((1-α)N - I)^{-1} H, for which H_k + T = ((1-α)N)^k (H + T)."""
    if not (0.0 < alpha < 1.0):
        raise DomainError(f"alpha must lie in (0, 1), got {alpha}")
    system = (1.0 - alpha) * N - np.eye(N.shape[0])
    solution, residual = _solve(system, H)
    if residual >= SOLVE_TOLERANCE:
        raise NumericError(f"shift-term solve residual {residual:.3e} exceeds {SOLVE_TOLERANCE:g}")
    return alpha * solution


def closed_psnr(N: np.ndarray, H: np.ndarray, lambdas: list[np.ndarray]) -> np.ndarray:
    """
    Closed form of the linearized posterior-sampled residual recursion.

    With Ñ_i = -Λ_i N and M_i = -(Λ_i N + I)^{-1}(I + Λ_i) H_1,

        H_k = Ñ_{k-1}…Ñ_1 (H_1 + M_1)
              + Σ_{i=2..k-1} Ñ_{k-1}…Ñ_i (M_i - M_{i-1})
              - M_{k-1}

    Products accumulate by left-multiplying Ñ_i, Ñ_{i+1}, … in turn; an empty
    product is the identity. With no Λ (k = 1) the result is H_1 = N H.

    Args:
        N: Dense n×n propagation matrix.
        H: Dense n×d input.
        lambdas: Diagonals of Λ_1..Λ_{k-1}.

    Raises:
        DomainError: If a Λ entry is outside (0, 1).
        NumericError: If an LU solve residual reaches 1e-9.
    """
    n = N.shape[0]
    if N.shape != (n, n) or H.shape[0] != n:
        raise ShapeError("closed-psnr", N.shape, H.shape)
    h1 = N @ H
    if not lambdas:
        return h1
    for lam in lambdas:
        _check_diagonal(lam, n)

    ms = []
    for i, lam in enumerate(lambdas, start=1):
        system = lam[:, None] * N + np.eye(n)
        m, residual = _solve(system, -((1.0 + lam)[:, None] * h1))
        if residual >= SOLVE_TOLERANCE:
            raise NumericError(f"Λ_{i}N + I solve residual {residual:.3e} exceeds {SOLVE_TOLERANCE:g}")
        ms.append(m)

    def apply_products(x: np.ndarray, start: int) -> np.ndarray:
        # Ñ_{k-1} … Ñ_start · x, with 1-based start
        for lam in lambdas[start - 1 :]:
            x = -lam[:, None] * (N @ x)
        return x

    out = apply_products(h1 + ms[0], 1)
    for i in range(2, len(lambdas) + 1):
        out = out + apply_products(ms[i - 1] - ms[i - 2], i)
    return out - ms[-1]


@dataclass
class ConditionReport:
    """
    Outcome of an invertibility check.

    Attributes:
        invertible: LU succeeded and the solve residual is below 1e-9.
        min_singular_value: Smallest singular value of the matrix.
        residual: Max-abs residual of solving against the identity.
    """

    invertible: bool
    min_singular_value: float
    residual: float


def _condition_report(matrix: np.ndarray) -> ConditionReport:
    _, residual = _solve(matrix, np.eye(matrix.shape[0]))
    singular = np.linalg.svd(matrix, compute_uv=False)
    min_singular = float(singular.min()) if singular.size else 0.0
    return ConditionReport(
        invertible=residual < SOLVE_TOLERANCE and min_singular > 0.0,
        min_singular_value=min_singular,
        residual=residual,
    )


def check_lemma1(N: np.ndarray, alpha: float) -> ConditionReport:
    """Report on the invertibility of (1-α)N - I."""
    return _condition_report((1.0 - alpha) * N - np.eye(N.shape[0]))


def check_lemma2(N: np.ndarray, lam: np.ndarray) -> ConditionReport:
    """Report on the invertibility of ΛN + I for a diagonal Λ given as a vector."""
    return _condition_report(lam[:, None] * N + np.eye(N.shape[0]))


def relative_frobenius(a: np.ndarray, b: np.ndarray) -> float:
    """‖a - b‖_F / ‖b‖_F (absolute when b is zero)."""
    reference = np.linalg.norm(b)
    gap = np.linalg.norm(a - b)
    return float(gap / reference) if reference > 0 else float(gap)


VERIFY_HEADER = ("instance", "check", "n", "k", "gap", "passed")


def random_instance(n: int, rng: np.random.Generator, edge_prob: float = 0.4) -> np.ndarray:
    """Dense symmetric-normalized operator of an Erdős–Rényi graph."""
    upper = np.triu(rng.random((n, n)) < edge_prob, k=1)
    rows, cols = np.nonzero(upper)
    return normalize(build_graph(zip(rows.tolist(), cols.tolist()), n)).dense()


def run_verification(n: int, k: int, instances: int, seed: int) -> list[tuple]:
    """
    Compare every closed form with its recursion on random instances.

    Each instance draws a random graph on n nodes, a feature matrix with 1–4
    columns, α ~ U(0.05, 0.95) and Λ entries ~ U(0.01, 0.99), then records one
    row per check: the three closed forms, the shift identity and both
    invertibility lemmas.

    Returns:
        Rows matching `VERIFY_HEADER`; `passed` is the per-row verdict.
    """
    if n < 1 or k < 1 or instances < 1:
        raise ContractError("verification needs n, k and instances of at least 1")
    rows = []
    for instance in range(instances):
        rng = substream(seed, f"instance-{instance}")
        N = random_instance(n, rng)
        H = rng.standard_normal((n, int(rng.integers(1, 5))))
        alpha = float(rng.uniform(0.05, 0.95))
        lambdas = [rng.uniform(0.01, 0.99, size=n) for _ in range(k - 1)]

        resgcn_order = min(k, MAX_BINOMIAL_ORDER)
        gaps = {
            "resgcn": relative_frobenius(
                closed_resgcn(N, H, resgcn_order),
                iterate_linear(LinearDynamic("resgcn", N, H, resgcn_order)),
            ),
            "appnp": relative_frobenius(
                closed_appnp(N, H, alpha, k),
                iterate_linear(LinearDynamic("appnp", N, H, k, alpha=alpha)),
            ),
            "psnr": relative_frobenius(
                closed_psnr(N, H, lambdas),
                iterate_linear(LinearDynamic("psnr", N, H, k, lambdas=lambdas)),
            ),
        }
        shift = appnp_shift_term(N, H, alpha)
        lhs = closed_appnp(N, H, alpha, k) + shift
        rhs = np.linalg.matrix_power((1.0 - alpha) * N, k) @ (H + shift)
        # measured against H: both sides shrink like ((1-α)N)^k
        gaps["appnp-shift"] = float(np.linalg.norm(lhs - rhs) / np.linalg.norm(H))

        for check, gap in gaps.items():
            rows.append((instance, check, n, k, gap, gap < AGREEMENT_TOLERANCE))

        lemma1 = check_lemma1(N, alpha)
        rows.append((instance, "lemma1", n, k, lemma1.residual, lemma1.invertible))
        lemma2 = check_lemma2(N, rng.uniform(0.01, 0.99, size=n))
        rows.append((instance, "lemma2", n, k, lemma2.residual, lemma2.invertible))

    failures = sum(not row[-1] for row in rows)
    if failures:
        logger.warning("%d of %d verification checks failed", failures, len(rows))
    return rows
