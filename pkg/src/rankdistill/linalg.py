"""Dense linear algebra: one-sided Jacobi SVD, energy-based rank selection,
truncated factorization, and spectrum diagnostics.

All routines accept plain 2-D numpy arrays. Decompositions run internally in
float64 and results are cast back to the input dtype.
"""

from dataclasses import dataclass

import numpy as np

from .errors import (
    DegenerateSpectrum,
    InvalidMatrix,
    InvalidRank,
    InvalidThreshold,
    NumericalFailure,
)

try:
    from numba import njit
except ImportError:  # pragma: no cover - numba is a declared dependency
    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]
        return lambda f: f

MAX_SWEEPS = 60
_JACOBI_TOL = 1e-12


@dataclass
class SvdResult:
    """Thin SVD W = U @ diag(sigma) @ V.T with sigma sorted descending."""

    u: np.ndarray       # (m, p)
    sigma: np.ndarray   # (p,)
    v: np.ndarray       # (n, p)


@dataclass
class FactoredLinear:
    """Rank-r factorization W ~= a @ b with a (m, r) and b (r, n)."""

    a: np.ndarray
    b: np.ndarray
    r: int

    def materialize(self) -> np.ndarray:
        return self.a @ self.b

    def param_count(self) -> int:
        return self.a.size + self.b.size


@dataclass
class SpectrumDiagnostic:
    sigma: np.ndarray    # descending singular values
    ratios: np.ndarray   # sigma_i / sigma_1, in (0, 1], ratios[0] == 1
    energy: np.ndarray   # cumulative squared-sigma fraction, ends at 1


@njit(cache=True)
def _jacobi_sweeps(g, v, max_sweeps, tol):
    """One-sided Jacobi on the columns of g; accumulates rotations in v.

    Returns the number of sweeps used, or -1 if the off-diagonal criterion
    was still violated after max_sweeps.
    """
    n = g.shape[1]
    for sweep in range(max_sweeps):
        worst = 0.0
        for p in range(n - 1):
            for q in range(p + 1, n):
                alpha = 0.0
                beta = 0.0
                gamma = 0.0
                for i in range(g.shape[0]):
                    alpha += g[i, p] * g[i, p]
                    beta += g[i, q] * g[i, q]
                    gamma += g[i, p] * g[i, q]
                if alpha <= 0.0 or beta <= 0.0:
                    continue
                ratio = abs(gamma) / np.sqrt(alpha * beta)
                if ratio > worst:
                    worst = ratio
                if ratio <= tol:
                    continue
                zeta = (beta - alpha) / (2.0 * gamma)
                if zeta >= 0.0:
                    t = 1.0 / (zeta + np.sqrt(1.0 + zeta * zeta))
                else:
                    t = -1.0 / (-zeta + np.sqrt(1.0 + zeta * zeta))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                for i in range(g.shape[0]):
                    gp = g[i, p]
                    gq = g[i, q]
                    g[i, p] = c * gp - s * gq
                    g[i, q] = s * gp + c * gq
                for i in range(n):
                    vp = v[i, p]
                    vq = v[i, q]
                    v[i, p] = c * vp - s * vq
                    v[i, q] = s * vp + c * vq
        if worst <= tol:
            return sweep + 1
    return -1


def _complete_basis(u: np.ndarray, dead: np.ndarray) -> None:
    """Fill near-zero columns of u with vectors orthonormal to the rest."""
    m = u.shape[0]
    live = [j for j in range(u.shape[1]) if not dead[j]]
    for j in np.flatnonzero(dead):
        best = None
        best_norm = -1.0
        for i in range(m):
            cand = np.zeros(m)
            cand[i] = 1.0
            for l in live:
                cand -= (u[:, l] @ cand) * u[:, l]
            norm = float(np.linalg.norm(cand))
            if norm > best_norm:
                best_norm = norm
                best = cand
        u[:, j] = best / best_norm
        live.append(j)


def svd(w: np.ndarray) -> SvdResult:
    """Thin SVD via one-sided Jacobi, bounded at MAX_SWEEPS sweeps."""
    w = np.asarray(w)
    if w.ndim != 2 or min(w.shape) < 1:
        raise InvalidMatrix(f"expected 2-D matrix, got shape {w.shape}")
    if not np.all(np.isfinite(w)):
        raise InvalidMatrix("matrix contains NaN or Inf")

    out_dtype = w.dtype if w.dtype in (np.float32, np.float64) else np.float64
    m, n = w.shape
    transposed = m < n
    g = (w.T if transposed else w).astype(np.float64).copy()
    p = g.shape[1]
    v = np.eye(p)

    sweeps = _jacobi_sweeps(g, v, MAX_SWEEPS, _JACOBI_TOL)
    if sweeps < 0:
        raise NumericalFailure(
            f"Jacobi SVD did not converge within {MAX_SWEEPS} sweeps"
        )

    sigma = np.linalg.norm(g, axis=0)
    scale = float(sigma.max(initial=0.0))
    dead = sigma <= max(scale, 1.0) * 1e-300
    u = np.zeros_like(g)
    u[:, ~dead] = g[:, ~dead] / sigma[~dead]
    if dead.any():
        sigma[dead] = 0.0
        _complete_basis(u, dead)

    order = np.argsort(-sigma, kind="stable")
    sigma = sigma[order]
    u = u[:, order]
    v = v[:, order]

    if transposed:
        u, v = v, u
    return SvdResult(
        u=u.astype(out_dtype),
        sigma=sigma.astype(out_dtype),
        v=v.astype(out_dtype),
    )


def rank_for_energy(sigma, tau: float) -> int:
    """Smallest r whose leading squared-sigma mass reaches fraction tau."""
    if not (0.0 < tau <= 1.0):
        raise InvalidThreshold(f"tau must be in (0, 1], got {tau}")
    sigma = np.asarray(sigma, dtype=np.float64)
    energy = sigma * sigma
    total = energy.sum()
    if total <= 0.0:
        raise DegenerateSpectrum("all singular values are zero")
    cum = np.cumsum(energy) / total
    return int(np.searchsorted(cum, tau - 1e-12) + 1)


def truncate(result: SvdResult, r: int) -> FactoredLinear:
    """Best rank-r approximation, split as a = U_r diag(sigma_r), b = V_r^T."""
    p = len(result.sigma)
    if not (1 <= r <= p):
        raise InvalidRank(f"rank {r} out of range [1, {p}]")
    a = result.u[:, :r] * result.sigma[:r]
    b = result.v[:, :r].T.copy()
    return FactoredLinear(a=a, b=b, r=r)


def spectrum_report(w: np.ndarray) -> SpectrumDiagnostic:
    """Singular spectrum with ratios to sigma_1 and the cumulative energy curve."""
    res = svd(w)
    sigma = res.sigma.astype(np.float64)
    if sigma[0] <= 0.0:
        raise DegenerateSpectrum("largest singular value is zero")
    energy = sigma * sigma
    return SpectrumDiagnostic(
        sigma=sigma,
        ratios=sigma / sigma[0],
        energy=np.cumsum(energy) / energy.sum(),
    )
