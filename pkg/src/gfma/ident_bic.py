"""Group-lasso + BIC device identification for unknown, time-varying activity.

The complex window is stacked into a real multiple-measurement problem whose
rows pair up per device (group k = rows 2k, 2k+1).  Block-coordinate descent
with KKT screening solves the group-lasso for a given tuning parameter; the
parameter itself is chosen by golden-section search on a BIC score whose
complexity term uses a shrinkage-ratio degrees-of-freedom estimate.  Nothing
in this module depends on the activity probability.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
import warnings

import numpy as np

from .ident_ridge import gcv_tune, ridge_solve
from .results import IdentificationResult
from .waveform import ObservationWindow

__all__ = [
    "StackedProblem", "stack_real", "unstack", "group_norms",
    "group_lasso_objective", "group_correlation", "lambda_max", "group_update",
    "group_lasso_bcd", "kkt_residuals", "min_norm_ls", "degrees_of_freedom",
    "bic_score", "golden_section", "BicParams", "identify_bic",
]

_INVPHI = (np.sqrt(5.0) - 1.0) / 2.0


@dataclass
class StackedProblem:
    """Real stacking of a complex window: Y = [Re R | Im R], n_d = 2 L n_c."""

    y: np.ndarray
    x: np.ndarray
    n_d: int

    @property
    def k_u(self) -> int:
        return self.x.shape[1] // 2

    @property
    def window_len(self) -> int:
        return self.y.shape[1] // 2

    @cached_property
    def gram(self) -> np.ndarray:
        return self.x.T @ self.x

    @cached_property
    def col_sq(self) -> np.ndarray:
        return np.einsum("ij,ij->j", self.x, self.x)


def stack_real(window: ObservationWindow, dictionary) -> StackedProblem:
    """Column-concatenate the in-phase and quadrature parts of the window."""
    x = dictionary.x if hasattr(dictionary, "x") else np.asarray(dictionary)
    r = window.r if isinstance(window, ObservationWindow) else np.asarray(window)
    y = np.concatenate([r.real, r.imag], axis=1)
    n_c, two_l = y.shape
    return StackedProblem(y=y, x=x, n_d=n_c * two_l)


def unstack(y: np.ndarray) -> np.ndarray:
    """Inverse of the real stacking: complex matrix from [Re | Im]."""
    half = y.shape[1] // 2
    return y[:, :half] + 1j * y[:, half:]


def group_norms(u: np.ndarray) -> np.ndarray:
    """l2 norm of each row pair (2k, 2k+1)."""
    k = u.shape[0] // 2
    return np.linalg.norm(u.reshape(k, -1), axis=1)


def group_lasso_objective(problem: StackedProblem, u: np.ndarray, lam: float) -> float:
    resid = problem.y - problem.x @ u
    return 0.5 * float(np.sum(resid * resid)) + problem.n_d * lam * float(group_norms(u).sum())


def group_correlation(problem: StackedProblem, u: np.ndarray, k: int) -> np.ndarray:
    """phi_k = [x_2k^T (Y - X U_{-2k}), x_{2k+1}^T (Y - X U_{-2k+1})], flattened.

    Reference (direct) evaluation; the solver maintains the same quantity
    incrementally through the residual.
    """
    i0, i1 = 2 * k, 2 * k + 1
    resid = problem.y - problem.x @ u
    phi0 = problem.x[:, i0] @ resid + problem.col_sq[i0] * u[i0]
    phi1 = problem.x[:, i1] @ resid + problem.col_sq[i1] * u[i1]
    return np.concatenate([phi0, phi1])


def lambda_max(problem: StackedProblem) -> float:
    """Smallest lam that zeroes every group from a zero start: max_k ||phi_k(0)|| / n_d."""
    corr = problem.x.T @ problem.y
    return float(group_norms(corr).max() / problem.n_d)


def _solve_group_scalar(n0: float, n1: float, a0: float, a1: float,
                        nd_lam: float, s_init: float, tol: float = 1e-8) -> float:
    """Fixed point of s = ||phi (nd_lam/s I + Lambda)^{-1}|| on the group norm."""
    s = max(s_init, 1e-300)
    for _ in range(200):
        nxt = np.hypot(n0 / (nd_lam / s + a0), n1 / (nd_lam / s + a1))
        if abs(nxt - s) <= tol * max(nxt, 1e-300):
            return float(nxt)
        s = nxt
    return float(s)


def _update_block(phi0, phi1, a0, a1, nd_lam, prev_norm):
    nphi = np.hypot(np.linalg.norm(phi0), np.linalg.norm(phi1))
    if nphi <= nd_lam:
        return np.zeros_like(phi0), np.zeros_like(phi1)
    if nd_lam == 0.0:
        return phi0 / a0, phi1 / a1
    # bootstrap from the proportional-Gram closed form when the group was zero
    s0 = prev_norm if prev_norm > 0 else (nphi - nd_lam) / ((a0 + a1) / 2.0)
    s = _solve_group_scalar(np.linalg.norm(phi0), np.linalg.norm(phi1), a0, a1, nd_lam, s0)
    m = nd_lam / s
    return phi0 / (m + a0), phi1 / (m + a1)


def group_update(problem: StackedProblem, u: np.ndarray, k: int, lam: float) -> np.ndarray:
    """One exact visit of group k: screening, then the shrunken fixed point.

    Returns the new (2, 2L) block; ``u`` is not modified.  The boundary
    ||phi_k|| = n_d lam zeroes the group.
    """
    i0, i1 = 2 * k, 2 * k + 1
    phi = group_correlation(problem, u, k)
    half = phi.size // 2
    prev = float(np.hypot(np.linalg.norm(u[i0]), np.linalg.norm(u[i1])))
    b0, b1 = _update_block(phi[:half], phi[half:], problem.col_sq[i0], problem.col_sq[i1],
                           problem.n_d * lam, prev)
    return np.stack([b0, b1])


def group_lasso_bcd(problem: StackedProblem, lam: float, u_init: np.ndarray | None = None,
                    eps_c: float | None = None, max_sweeps: int = 200):
    """Block-coordinate descent over groups in ascending k.

    Stops when ||U_t - U_{t-1}||_F < eps_c (default 1e-6 ||U_init||_F with an
    absolute floor of 1e-10) or after ``max_sweeps`` sweeps, in which case the
    returned info carries ``converged = False``.
    """
    if lam < 0 or max_sweeps < 1:
        raise ValueError("need lam >= 0 and max_sweeps >= 1")
    u = np.zeros((2 * problem.k_u, problem.y.shape[1])) if u_init is None else u_init.copy()
    if eps_c is None:
        eps_c = max(1e-6 * np.linalg.norm(u), 1e-10)
    gram, col_sq = problem.gram, problem.col_sq
    nd_lam = problem.n_d * lam
    g = problem.x.T @ problem.y - gram @ u
    norms = group_norms(u)
    converged = False
    sweeps = 0
    for sweep in range(max_sweeps):
        sweeps = sweep + 1
        change_sq = 0.0
        for k in range(problem.k_u):
            i0, i1 = 2 * k, 2 * k + 1
            phi0 = g[i0] + col_sq[i0] * u[i0]
            phi1 = g[i1] + col_sq[i1] * u[i1]
            b0, b1 = _update_block(phi0, phi1, col_sq[i0], col_sq[i1], nd_lam, norms[k])
            d0, d1 = b0 - u[i0], b1 - u[i1]
            dsq = float(d0 @ d0 + d1 @ d1)
            if dsq > 0.0:
                change_sq += dsq
                u[i0], u[i1] = b0, b1
                g -= gram[:, i0:i1 + 1] @ np.stack([d0, d1])
                norms[k] = np.hypot(np.linalg.norm(b0), np.linalg.norm(b1))
        if np.sqrt(change_sq) < eps_c:
            converged = True
            break
        if (sweep + 1) % 32 == 0:  # counter incremental-residual drift
            g = problem.x.T @ problem.y - gram @ u
    info = {"converged": converged, "sweeps": sweeps}
    return u, info


def kkt_residuals(problem: StackedProblem, u: np.ndarray, lam: float) -> dict:
    """Certificates at a candidate solution.

    ``inactive_margin``: max over zero groups of ||phi_k|| / (n_d lam), <= 1 at
    optimality.  ``active_resid``: max relative violation of the stationarity
    fixed point over nonzero groups.
    """
    nd_lam = problem.n_d * lam
    norms = group_norms(u)
    inactive_margin = 0.0
    active_resid = 0.0
    for k in range(problem.k_u):
        phi = group_correlation(problem, u, k)
        if norms[k] == 0.0:
            if nd_lam > 0:
                inactive_margin = max(inactive_margin, np.linalg.norm(phi) / nd_lam)
            continue
        i0, i1 = 2 * k, 2 * k + 1
        half = phi.size // 2
        lhs0 = u[i0] * (nd_lam / norms[k] + problem.col_sq[i0])
        lhs1 = u[i1] * (nd_lam / norms[k] + problem.col_sq[i1])
        num = np.hypot(np.linalg.norm(lhs0 - phi[:half]), np.linalg.norm(lhs1 - phi[half:]))
        active_resid = max(active_resid, num / max(np.linalg.norm(phi), 1e-300))
    return {"inactive_margin": inactive_margin, "active_resid": active_resid}


def min_norm_ls(problem: StackedProblem) -> np.ndarray:
    """Minimum-norm least-squares solution (the canonical LS when underdetermined)."""
    return np.linalg.lstsq(problem.x, problem.y, rcond=None)[0]


def degrees_of_freedom(u_hat: np.ndarray, u_ls: np.ndarray) -> float:
    """df = #active groups + (2L - 1) * sum_k ||u_k|| / ||u_k^LS||.

    Groups whose LS norm vanishes contribute only to the support count.
    """
    n_hat = group_norms(u_hat)
    n_ls = group_norms(u_ls)
    active = n_hat > 0
    ratio = np.divide(n_hat, n_ls, out=np.zeros_like(n_hat), where=n_ls > 0)
    two_l = u_hat.shape[1]
    return float(active.sum() + (two_l - 1) * ratio.sum())


def bic_score(problem: StackedProblem, u_hat: np.ndarray, df: float) -> float:
    """log(||Y - X U||_F^2 / n_d) + log(n_d) df / n_d."""
    resid = problem.y - problem.x @ u_hat
    rss = float(np.sum(resid * resid))
    if rss <= 0.0:
        warnings.warn("zero residual in BIC score; returning -inf sentinel")
        return -np.inf
    return float(np.log(rss / problem.n_d) + np.log(problem.n_d) * df / problem.n_d)


def golden_section(f, lambda_lo: float, lambda_hi: float, eps_g: float,
                   max_evals: int = 20):
    """Golden-section bracket reduction with memoized evaluations.

    Evaluates the two endpoints first, then interior probes, stopping once the
    bracket is narrower than ``eps_g`` or ``max_evals`` evaluations were spent.
    Returns (argmin over evaluated points, [(lambda, score), ...] in evaluation
    order).
    """
    if not lambda_lo < lambda_hi:
        raise ValueError("need lambda_lo < lambda_hi")
    if max_evals < 2:
        raise ValueError("need max_evals >= 2")
    memo: dict[float, float] = {}
    trace: list[tuple[float, float]] = []

    def ev(x: float) -> float:
        if x not in memo:
            memo[x] = float(f(x))
            trace.append((x, memo[x]))
        return memo[x]

    ev(lambda_lo)
    ev(lambda_hi)
    a, b = lambda_lo, lambda_hi
    c = b - (b - a) * _INVPHI
    d = a + (b - a) * _INVPHI
    while (b - a) >= eps_g and len(memo) < max_evals:
        fc, fd = ev(c), ev(d)
        if fc <= fd:
            b, d = d, c
            c = b - (b - a) * _INVPHI
        else:
            a, c = c, d
            d = a + (b - a) * _INVPHI
    best = min(memo, key=memo.get)
    return float(best), trace


@dataclass
class BicParams:
    """Tuning knobs of the BIC search; None fields are derived from the data.

    The default lambda bracket is [0, 1.05 * lambda_max(Y, X)] and the default
    golden-section resolution is bracket/250; the inner solver warm-starts from
    the ridge reconstruction with a GCV-chosen ridge parameter.
    """

    lambda_lo: float = 0.0
    lambda_hi: float | None = None
    eps_g: float | None = None
    max_golden: int = 20
    eps_c: float | None = None
    max_sweeps: int = 200
    ridge_lambda: float | None = None
    gcv_grid: np.ndarray | None = field(default=None, repr=False)


def _ridge_warm_start(window_r: np.ndarray, x: np.ndarray, params: BicParams) -> np.ndarray:
    lam = params.ridge_lambda
    if lam is None:
        scale = float(np.einsum("ij,ij->", x, x)) / x.shape[1]  # mean column energy
        grid = params.gcv_grid if params.gcv_grid is not None \
            else scale * np.geomspace(1e-4, 1e2, 13)
        lam = gcv_tune(x, window_r, grid)
    h_rd = ridge_solve(x, window_r, lam)
    return np.concatenate([h_rd.real, h_rd.imag], axis=1)


def identify_bic(window: ObservationWindow, dictionary,
                 params: BicParams | None = None) -> IdentificationResult:
    """Golden-section BIC model selection over the group-lasso path.

    Every inner solve warm-starts from the same dense ridge estimate, so the
    first sweep re-evaluates all groups.  The estimated active set is the
    support of the winning solution; diagnostics carry the full (lambda, score)
    trace, degrees of freedom and convergence flags.
    """
    params = params or BicParams()
    problem = stack_real(window, dictionary)
    u_rd = _ridge_warm_start(window.r if isinstance(window, ObservationWindow) else window,
                             problem.x, params)
    u_ls = min_norm_ls(problem)
    lam_hi = params.lambda_hi if params.lambda_hi is not None else 1.05 * lambda_max(problem)
    if lam_hi <= params.lambda_lo:
        lam_hi = params.lambda_lo + 1.0
    eps_g = params.eps_g if params.eps_g is not None else (lam_hi - params.lambda_lo) / 250.0

    solutions: dict[float, np.ndarray] = {}
    details: dict[float, dict] = {}

    def score_at(lam: float) -> float:
        u_hat, info = group_lasso_bcd(problem, lam, u_init=u_rd,
                                      eps_c=params.eps_c, max_sweeps=params.max_sweeps)
        df = degrees_of_freedom(u_hat, u_ls)
        score = bic_score(problem, u_hat, df)
        solutions[lam] = u_hat
        details[lam] = {"df": df, **info}
        return score

    lam_hat, trace = golden_section(score_at, params.lambda_lo, lam_hi, eps_g,
                                    max_evals=params.max_golden)
    u_final = solutions[lam_hat]
    norms = group_norms(u_final)
    return IdentificationResult(
        active_set=np.nonzero(norms > 0)[0],
        scores=norms,
        diagnostics={
            "lambda_hat": lam_hat,
            "lambda_max": lambda_max(problem),
            "df": details[lam_hat]["df"],
            "sweeps": details[lam_hat]["sweeps"],
            "converged": details[lam_hat]["converged"],
            "non_convergence": [lam for lam, d in details.items() if not d["converged"]],
            "trace": trace,
        },
    )
