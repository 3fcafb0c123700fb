"""Ridge-based device identification for known activity probability.

Pipeline: ridge reconstruction of the column pair (h_k0, h_k1), closed-form
second-order statistics of the reconstruction under either activity
hypothesis, a canonical 2-D quadratic detector per device with a threshold
calibrated analytically from the weighted-chi-square null tail, and hard
fusion of the per-column decisions over the identification window.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import integrate, linalg, optimize, special

from .results import IdentificationResult
from .waveform import ObservationWindow

__all__ = [
    "ridge_solve", "gcv_scores", "gcv_tune", "lambda_opt", "lambda_opt_reference",
    "RidgeContext", "build_ridge_context", "Lemma1Stats", "lemma1_stats",
    "gaussian_covariances", "select_branch", "canonical_detector",
    "weighted_chisq_tail", "calibrate_threshold", "predicted_detection",
    "detection_tail_exact", "DeviceDetector", "build_detectors", "DetectorBank",
    "identify_ridge", "export_calibration_csv",
]


def ridge_solve(x: np.ndarray, r: np.ndarray, lam: float) -> np.ndarray:
    """Ridge reconstruction h_hat = (X^T X + 2 lam I)^{-1} X^T r.

    X is real; a complex right-hand side is handled componentwise.  For wide
    X (more columns than rows) the equivalent n x n system
    X^T (X X^T + 2 lam I)^{-1} r is solved instead, which dominates runtime at
    full scale.  lam = 0 requires the relevant Gram matrix to be invertible.
    """
    if lam < 0:
        raise ValueError("lam must be >= 0")
    n, m = x.shape
    if m <= n:
        a = x.T @ x + 2.0 * lam * np.eye(m)
        return np.linalg.solve(a, x.T @ r)
    a = x @ x.T + 2.0 * lam * np.eye(n)
    return x.T @ np.linalg.solve(a, r)


def gcv_scores(x: np.ndarray, r: np.ndarray, lambda_grid: np.ndarray) -> np.ndarray:
    """GCV score ||(I-Q) r||^2 / tr(I-Q)^2 at each grid point."""
    d, u = np.linalg.eigh(x @ x.T)
    d = np.clip(d, 0.0, None)
    proj2 = np.abs(u.T @ r) ** 2
    scores = np.empty(len(lambda_grid))
    for i, lam in enumerate(lambda_grid):
        if lam == 0.0:
            a = (d <= 1e-12 * max(d.max(), 1.0)).astype(float)
        else:
            a = 2.0 * lam / (d + 2.0 * lam)
        num = float(a ** 2 @ proj2)
        den = float(a.sum()) ** 2
        scores[i] = np.inf if den == 0.0 else num / den
    return scores


def gcv_tune(x: np.ndarray, r: np.ndarray, lambda_grid) -> float:
    """Grid argmin of the GCV score (ties resolve to the smallest lambda)."""
    grid = np.sort(np.asarray(lambda_grid, dtype=float))
    if grid.size == 0:
        raise ValueError("lambda grid must be nonempty")
    return float(grid[int(np.argmin(gcv_scores(x, r, grid)))])


def lambda_opt(x: np.ndarray, gamma: np.ndarray, p_a: float, noise_var: float) -> float:
    """Closed-form MMSE tuning parameter for known activity probability.

    lam = noise_var tr(S) / (P_a sum_k gamma_k (S_{2k,2k} + S_{2k+1,2k+1})
    + 3 tr(S^2)) with S = (X^T X)^{-1}.  Raises ``LinAlgError`` when the Gram
    matrix is singular (always the case in the underdetermined regime), in
    which case callers fall back to GCV.
    """
    if p_a <= 0:
        raise ValueError("p_a must be > 0")
    gram = x.T @ x
    c, low = linalg.cho_factor(gram)  # raises LinAlgError if not SPD
    s = linalg.cho_solve((c, low), np.eye(gram.shape[0]))
    diag = np.diag(s)
    pair_diag = diag[0::2] + diag[1::2]
    denom = p_a * float(np.asarray(gamma) @ pair_diag) + 3.0 * float(np.sum(s * s))
    return noise_var * float(np.trace(s)) / denom


def lambda_opt_reference(x: np.ndarray, h: np.ndarray, noise_var: float) -> float:
    """Per-column oracle tuning parameter (needs the true h); test reference only."""
    gram = x.T @ x
    c, low = linalg.cho_factor(gram)
    s = linalg.cho_solve((c, low), np.eye(gram.shape[0]))
    quad = float(np.real(np.conj(h) @ (s @ h)))
    return noise_var * float(np.trace(s)) / (quad + 3.0 * float(np.sum(s * s)))


@dataclass
class RidgeContext:
    """Shared read-only state for one dictionary and tuning parameter.

    omega = I - 2 lam (Gram + 2 lam I)^{-1} maps the true h to the mean path
    of the reconstruction; noise_cov is the covariance of the reconstruction
    noise; ridge_op applied to a column r yields h_hat.
    """

    x: np.ndarray
    lam: float
    gram: np.ndarray
    omega: np.ndarray
    noise_cov: np.ndarray
    ridge_op: np.ndarray
    gamma: np.ndarray
    mu: np.ndarray
    eta_p: np.ndarray
    sigma2: np.ndarray
    p_a: float
    noise_var: float

    @property
    def k_u(self) -> int:
        return self.x.shape[1] // 2

    @property
    def k_factor(self) -> float:
        with np.errstate(divide="ignore"):
            return float(np.max(np.abs(self.mu) ** 2 / self.sigma2))


def build_ridge_context(dictionary, profiles, p_a: float, noise_var: float,
                        lam: float) -> RidgeContext:
    """Precompute the matrices shared by all per-device detectors."""
    x = dictionary.x if hasattr(dictionary, "x") else np.asarray(dictionary)
    if lam <= 0:
        raise ValueError("context construction needs lam > 0")
    gram = x.T @ x
    m = gram.shape[0]
    f = linalg.cho_solve(linalg.cho_factor(gram + 2.0 * lam * np.eye(m)), np.eye(m))
    omega = np.eye(m) - 2.0 * lam * f
    noise_cov = noise_var * f @ gram @ f
    ridge_op = f @ x.T
    eta_p = np.array([p.pathloss * p.power for p in profiles])
    mu = np.array([p.rician_mean for p in profiles])
    sigma2 = np.array([p.rician_var for p in profiles])
    gamma = eta_p * (sigma2 + np.abs(mu) ** 2)
    return RidgeContext(x=x, lam=lam, gram=gram, omega=omega, noise_cov=noise_cov,
                        ridge_op=ridge_op, gamma=gamma, mu=mu, eta_p=eta_p,
                        sigma2=sigma2, p_a=p_a, noise_var=noise_var)


@dataclass
class Lemma1Stats:
    """Second moments of (h_hat_k0, h_hat_k1): var[t, f] and cov[t] for t in {0,1}."""

    var: np.ndarray
    cov: np.ndarray


def _pair_weights(ctx: RidgeContext, k: int):
    """Own-signal and per-interferer Omega weights entering every moment formula."""
    om = ctx.omega
    i0, i1 = 2 * k, 2 * k + 1
    others = np.delete(np.arange(ctx.k_u), k)
    own = np.array([om[i0, i0] ** 2 + om[i0, i1] ** 2,
                    om[i1, i1] ** 2 + om[i1, i0] ** 2])
    inter = np.stack([om[i0, 2 * others] ** 2 + om[i0, 2 * others + 1] ** 2,
                      om[i1, 2 * others + 1] ** 2 + om[i1, 2 * others] ** 2])
    return others, own, inter


def lemma1_stats(ctx: RidgeContext, k: int) -> Lemma1Stats:
    """Closed-form conditional variances and cross-covariance of the reconstruction."""
    om, sw = ctx.omega, ctx.noise_cov
    i0, i1 = 2 * k, 2 * k + 1
    others, own, inter = _pair_weights(ctx, k)
    g_others = ctx.gamma[others]
    base = ctx.p_a * inter @ g_others + np.array([sw[i0, i0], sw[i1, i1]])
    var = np.stack([base, base + ctx.gamma[k] * own])
    own_c = om[i0, i0] * om[i1, i0] + om[i1, i1] * om[i0, i1]
    inter_c = om[i0, 2 * others] * om[i1, 2 * others] \
        + om[i1, 2 * others + 1] * om[i0, 2 * others + 1]
    cov_base = ctx.p_a * float(inter_c @ g_others) + sw[i0, i1]
    cov = np.array([cov_base, cov_base + ctx.gamma[k] * own_c])
    return Lemma1Stats(var=var, cov=cov)


def gaussian_covariances(ctx: RidgeContext, k: int) -> np.ndarray:
    """2x2 covariances of (Re h_hat, Im h_hat), indexed [t, f, :, :].

    Valid as a Gaussian model for small Rician K-factor (< 0.2) and large
    enough P_a * K_u; the second moments themselves are exact.
    """
    i0, i1 = 2 * k, 2 * k + 1
    sw = ctx.noise_cov
    others, own, inter = _pair_weights(ctx, k)
    mb, mt = ctx.mu.real, ctx.mu.imag
    s2, ep = ctx.sigma2, ctx.eta_p
    out = np.empty((2, 2, 2, 2))
    for f, iw in ((0, i0), (1, i1)):
        inter_f = inter[f]
        oth = ctx.p_a * ep[others] * inter_f
        rho_i = float((mb[others] * mt[others] * oth).sum())
        sb_i = float(((s2[others] / 2 + mb[others] ** 2) * oth).sum())
        st_i = float(((s2[others] / 2 + mt[others] ** 2) * oth).sum())
        for t in (0, 1):
            w_own = t * ep[k] * own[f]
            rho = mb[k] * mt[k] * w_own + rho_i
            sb = (s2[k] / 2 + mb[k] ** 2) * w_own + sb_i + sw[iw, iw] / 2
            st = (s2[k] / 2 + mt[k] ** 2) * w_own + st_i + sw[iw, iw] / 2
            c = np.array([[sb, rho], [rho, st]])
            if np.min(np.linalg.eigvalsh(c)) < -1e-12 * max(sb, st, 1.0):
                raise ValueError("non-PSD Gaussian covariance; upstream inconsistency")
            out[t, f] = c
    return out


def select_branch(stats: Lemma1Stats) -> int:
    """Pick the column (0 or 1) with the larger active/idle variance ratio.

    rho_k = var[1,0]/var[0,0] - var[1,1]/var[0,1]; ties (rho_k = 0) select
    branch 0.
    """
    if stats.var[0, 0] <= 0 or stats.var[0, 1] <= 0:
        raise ValueError("H0 variances must be positive")
    rho = stats.var[1, 0] / stats.var[0, 0] - stats.var[1, 1] / stats.var[0, 1]
    return 0 if rho >= 0 else 1


def canonical_detector(c0: np.ndarray, c1: np.ndarray):
    """Simultaneous whitening of C0 and diagonalization of C1.

    Returns (transform, lambda_eigs, chi): transform @ C0 @ transform^T = I and
    transform @ C1 @ transform^T = diag(lambda_eigs) with eigenvalues sorted
    descending; chi[n] = lambda[n] / (lambda[n] + 1).
    """
    d0, v0 = np.linalg.eigh(c0)
    if d0.min() <= 0:
        raise np.linalg.LinAlgError("C0 must be positive definite")
    a = v0 * d0 ** -0.5
    b = a.T @ c1 @ a
    lam, v1 = np.linalg.eigh(b)
    lam, v1 = lam[::-1], v1[:, ::-1]
    transform = v1.T @ a.T
    chi = lam / (lam + 1.0)
    return transform, lam, chi


def _tail_smooth(w_big: float, w_small: float, theta: float) -> float:
    # exact reduction of the CF inversion: condition on the smaller-weight
    # chi-square term, leaving a smooth finite-range integrand
    smax = np.sqrt(theta / w_small)

    def f(s):
        return np.sqrt(2.0 / np.pi) * np.exp(-0.5 * s * s) \
            * special.erfc(np.sqrt(np.maximum(theta - w_small * s * s, 0.0) / (2.0 * w_big)))

    val, _ = integrate.quad(f, 0.0, smax, limit=200, epsabs=1e-12, epsrel=1e-11)
    return float(val + special.erfc(np.sqrt(theta / (2.0 * w_small))))


def weighted_chisq_tail(weights, theta: float) -> float:
    """P{w0 z0^2 + w1 z1^2 > theta} for independent standard normal z.

    Equal weights reduce to exp(-theta / 2w); otherwise the characteristic
    function Prod (1 - 2 j w omega)^{-1/2} is inverted as a one-dimensional
    quadrature (absolute accuracy well below 1e-8).
    """
    w = np.asarray(weights, dtype=float)
    if w.shape != (2,):
        raise ValueError("exactly two weights expected")
    if np.any(w <= 0):
        raise ValueError("weights must be positive")
    if theta < 0:
        raise ValueError("theta must be >= 0")
    if theta == 0:
        return 1.0
    w0, w1 = float(w.max()), float(w.min())
    if w0 - w1 <= 1e-12 * w0:
        return float(np.exp(-theta / (2.0 * w0)))
    return min(1.0, max(0.0, _tail_smooth(w0, w1, theta)))


def calibrate_threshold(weights, target_pf: float) -> float:
    """theta with weighted_chisq_tail(weights, theta) = target_pf (<= 1e-9 gap)."""
    if not 0.0 < target_pf < 1.0:
        raise ValueError("target_pf must lie in (0, 1)")
    w = np.asarray(weights, dtype=float)
    if w.max() - w.min() <= 1e-12 * w.max():
        return float(-2.0 * w.max() * np.log(target_pf))
    hi = 2.0 * w.sum() * np.log(4.0 / target_pf)
    while weighted_chisq_tail(w, hi) > target_pf:
        hi *= 2.0
    theta = optimize.brentq(lambda t: weighted_chisq_tail(w, t) - target_pf,
                            0.0, hi, xtol=1e-13, rtol=8.9e-16)
    return float(theta)


def predicted_detection(lambda_eigs, theta: float) -> float:
    """Closed-form correct-identification rate: the tail kernel with the lambda
    eigenvalues as weights.

    This matches the simulated detector statistic only when the eigenvalues are
    large (chi[n] -> 1); ``detection_tail_exact`` evaluates the exact law.
    """
    return weighted_chisq_tail(lambda_eigs, theta)


def detection_tail_exact(lambda_eigs, chi, theta: float) -> float:
    """Exact tail of the detector statistic under the active hypothesis.

    Under H1 the canonical coordinates have variances lambda[n], so the score
    sum chi[n] z[n]^2 is weighted chi-square with weights chi[n] * lambda[n].
    """
    w = np.asarray(lambda_eigs, dtype=float) * np.asarray(chi, dtype=float)
    return weighted_chisq_tail(w, theta)


@dataclass
class DeviceDetector:
    """Calibrated per-device test: score transform, chi weights, and threshold."""

    k: int
    branch: int
    c0: np.ndarray
    c1: np.ndarray
    chi: np.ndarray
    lambda_eigs: np.ndarray
    transform: np.ndarray
    theta: float
    target_pf: float
    n_fuse: int


def default_fusion_count(window_len: int) -> int:
    """Default n_k = ceil(L / 5), clamped to [1, L]."""
    return int(min(max(1, -(-window_len // 5)), window_len))


def build_detectors(ctx: RidgeContext, target_pf: float, window_len: int,
                    n_fuse: int | None = None) -> list[DeviceDetector]:
    """Calibrate one detector per device from the context's closed-form statistics."""
    n_k = default_fusion_count(window_len) if n_fuse is None else int(n_fuse)
    detectors = []
    for k in range(ctx.k_u):
        stats = lemma1_stats(ctx, k)
        f = select_branch(stats)
        cov = gaussian_covariances(ctx, k)
        c0, c1 = cov[0, f], cov[1, f]
        transform, lam, chi = canonical_detector(c0, c1)
        theta = calibrate_threshold(chi, target_pf)
        detectors.append(DeviceDetector(k=k, branch=f, c0=c0, c1=c1, chi=chi,
                                        lambda_eigs=lam, transform=transform,
                                        theta=theta, target_pf=target_pf, n_fuse=n_k))
    return detectors


class DetectorBank:
    """Detector list flattened to arrays for vectorized window scoring."""

    def __init__(self, detectors: list[DeviceDetector]):
        self.detectors = detectors
        self.branch = np.array([d.branch for d in detectors])
        self.transform = np.stack([d.transform for d in detectors])
        self.chi = np.stack([d.chi for d in detectors])
        self.theta = np.array([d.theta for d in detectors])
        self.n_fuse = np.array([d.n_fuse for d in detectors])


def identify_ridge(window: ObservationWindow, ctx: RidgeContext,
                   detectors: list[DeviceDetector] | DetectorBank) -> IdentificationResult:
    """Score every window column, threshold, and fuse the per-column decisions.

    Per column j: reconstruct h_hat_j, take the chosen branch's (Re, Im) pair,
    rotate into canonical coordinates, score phi = sum chi[n] z[n]^2, and decide
    d_kj = 1{phi >= theta_k}.  Device k is declared active when at least n_k of
    its L decisions fire.
    """
    bank = detectors if isinstance(detectors, DetectorBank) else DetectorBank(detectors)
    L = window.window_len
    if np.any(bank.n_fuse > L):
        raise ValueError("fusion count n_k exceeds the window length")
    h_hat = ctx.ridge_op @ window.r
    rows = 2 * np.arange(ctx.k_u) + bank.branch
    v = h_hat[rows, :]
    pair = np.stack([v.real, v.imag], axis=1)                      # (K, 2, L)
    z = np.einsum("kij,kjl->kil", bank.transform, pair)
    scores = np.einsum("kil,ki->kl", z * z, bank.chi)
    decisions = scores >= bank.theta[:, None]
    fused = decisions.sum(axis=1) >= bank.n_fuse
    return IdentificationResult(active_set=np.nonzero(fused)[0], scores=scores,
                                decisions=decisions,
                                diagnostics={"lam": ctx.lam, "window_len": L})


def export_calibration_csv(detectors: list[DeviceDetector], path: str | Path) -> None:
    """Calibration table (k, branch, chi, lambda eigenvalues, theta) for audit."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["k", "branch", "chi0", "chi1", "lambda0", "lambda1",
                    "theta", "target_pf", "n_fuse"])
        for d in detectors:
            w.writerow([d.k, d.branch, f"{d.chi[0]:.12g}", f"{d.chi[1]:.12g}",
                        f"{d.lambda_eigs[0]:.12g}", f"{d.lambda_eigs[1]:.12g}",
                        f"{d.theta:.12g}", f"{d.target_pf:.12g}", d.n_fuse])
