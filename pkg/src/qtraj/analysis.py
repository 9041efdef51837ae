"""Observables, state metrics, Wigner tomography, and protocol scoring.

Conventions:

* Wigner convention is W(beta) = (2/pi) <displaced parity>, so |W| is
  bounded by 2/pi and the vacuum peaks at +2/pi.  The grid integral of a
  well-truncated state is 1.
* fidelity uses the squared mixed-state definition (Tr sqrt(sqrt(rho)
  sigma sqrt(rho)))^2, which reduces to |<psi|phi>|^2 for pure inputs.
* Phase-estimate spread is scored by the circular variance
  1 - |mean e^{i(theta_hat - Theta)}|; phases live on a circle, so linear
  variance would misbehave at the wrap-around.

All functions are pure and safe to call concurrently on trajectory
batches.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
from scipy.special import gammaln

from .errors import FitFailedError, RegimeWarning, ShapeError
from .hilbert import DensityMatrix, Operator, PureState, pauli

_BLOCH_TOL = 1e-9


# ---------------------------------------------------------------------------
# result types

@dataclass(frozen=True)
class BlochVector:
    """Qubit Bloch-sphere coordinates (<sx>, <sy>, <sz>)."""

    x: float
    y: float
    z: float

    def __post_init__(self):
        r2 = self.x**2 + self.y**2 + self.z**2
        if r2 > 1.0 + _BLOCH_TOL:
            raise ShapeError(f"Bloch vector norm {np.sqrt(r2):.6f} exceeds 1")

    def norm(self) -> float:
        return float(np.sqrt(self.x**2 + self.y**2 + self.z**2))


@dataclass(frozen=True)
class WignerGrid:
    """Sampled Wigner function.

    values[i, j] = W(re_axis[i] + 1j * im_axis[j]), units of inverse
    phase-space area.  extent_warning flips when the grid reaches beyond
    the amplitudes the state's truncation can represent.
    """

    re_axis: np.ndarray
    im_axis: np.ndarray
    values: np.ndarray
    extent_warning: bool = False

    def integral(self) -> float:
        """Riemann integral of W over the grid."""
        dre = self.re_axis[1] - self.re_axis[0] if self.re_axis.size > 1 else 1.0
        dim = self.im_axis[1] - self.im_axis[0] if self.im_axis.size > 1 else 1.0
        return float(self.values.sum() * dre * dim)

    def marginal_re(self) -> np.ndarray:
        """Integrate out Im(beta): quadrature density along the real axis."""
        dim = self.im_axis[1] - self.im_axis[0] if self.im_axis.size > 1 else 1.0
        return self.values.sum(axis=1) * dim

    def marginal_im(self) -> np.ndarray:
        dre = self.re_axis[1] - self.re_axis[0] if self.re_axis.size > 1 else 1.0
        return self.values.sum(axis=0) * dre


class SurvivalFit(NamedTuple):
    rate: float
    ci_low: float
    ci_high: float


# ---------------------------------------------------------------------------
# basic state metrics

def _as_matrix(state) -> np.ndarray:
    if isinstance(state, PureState):
        return np.outer(state.amplitudes, state.amplitudes.conj())
    if isinstance(state, (DensityMatrix, Operator)):
        return state.data
    arr = np.asarray(state, dtype=complex)
    if arr.ndim == 1:
        return np.outer(arr, arr.conj())
    return arr


def bloch_vector(state) -> BlochVector:
    """Bloch coordinates (<sx>, <sy>, <sz>) of a qubit state."""
    rho = _as_matrix(state)
    if rho.shape != (2, 2):
        raise ShapeError(f"bloch_vector needs a qubit state, got {rho.shape}")
    x = np.real(np.trace(pauli("x").data @ rho))
    y = np.real(np.trace(pauli("y").data @ rho))
    z = np.real(np.trace(pauli("z").data @ rho))
    return BlochVector(float(x), float(y), float(z))


def purity(state) -> float:
    """Tr rho^2."""
    rho = _as_matrix(state)
    return float(np.real(np.einsum("ij,ji->", rho, rho)))


def fidelity(a, b) -> float:
    """Squared fidelity (Tr sqrt(sqrt(a) b sqrt(a)))^2, in [0, 1].

    Pure inputs reduce to the overlap square |<psi|phi>|^2.
    """
    if isinstance(a, PureState) and isinstance(b, PureState):
        if a.shape.dim != b.shape.dim:
            raise ShapeError("fidelity: state dimensions differ")
        return float(min(1.0, abs(np.vdot(a.amplitudes, b.amplitudes)) ** 2))
    if isinstance(a, PureState) or isinstance(b, PureState):
        psi, rho = (a, b) if isinstance(a, PureState) else (b, a)
        mat = _as_matrix(rho)
        if mat.shape[0] != psi.shape.dim:
            raise ShapeError("fidelity: state dimensions differ")
        val = np.real(np.vdot(psi.amplitudes, mat @ psi.amplitudes))
        return float(min(1.0, max(0.0, val)))
    ra, rb = _as_matrix(a), _as_matrix(b)
    if ra.shape != rb.shape:
        raise ShapeError("fidelity: state dimensions differ")
    w, v = np.linalg.eigh(ra)
    sqrt_a = (v * np.sqrt(np.clip(w, 0.0, None))) @ v.conj().T
    inner = sqrt_a @ rb @ sqrt_a
    ev = np.linalg.eigvalsh(inner)
    root_sum = np.sqrt(np.clip(ev, 0.0, None)).sum()
    return float(min(1.0, root_sum**2))


def concurrence(state) -> float:
    """Wootters concurrence of a two-qubit state, in [0, 1]."""
    rho = _as_matrix(state)
    if rho.shape != (4, 4):
        raise ShapeError(f"concurrence needs a two-qubit state, got {rho.shape}")
    sy = pauli("y").data
    flip = np.kron(sy, sy)
    rho_tilde = flip @ rho.conj() @ flip
    ev = np.linalg.eigvals(rho @ rho_tilde)
    lam = np.sqrt(np.clip(ev.real, 0.0, None))
    lam.sort()
    return float(max(0.0, lam[-1] - lam[-2] - lam[-3] - lam[-4]))


# ---------------------------------------------------------------------------
# Wigner tomography

def _displacement_block(beta: np.ndarray, d: int) -> np.ndarray:
    """Exact matrix elements of D(beta) for a batch of amplitudes.

    Normal-ordered factorization D = e^{-|b|^2/2} e^{b a^dag} e^{-b* a}:
    both factors are polynomial in the ladder operators, so the product
    reproduces the untruncated matrix elements for every index the space
    keeps (no edge artifacts from exponentiating a truncated generator).
    """
    g = beta.shape[0]
    n = np.arange(d)
    lg = gammaln(n + 1.0)
    # upper[m, n] with m >= n: sqrt(m!/n!) / (m-n)!
    m_idx, n_idx = np.meshgrid(n, n, indexing="ij")
    diff = m_idx - n_idx
    lower_mask = diff >= 0
    fac = np.where(lower_mask,
                   np.exp(0.5 * (lg[m_idx] - lg[n_idx]) - gammaln(np.abs(diff) + 1.0)),
                   0.0)
    # powers beta^k and (-conj beta)^k, k = 0..d-1
    pow_up = np.ones((g, d), dtype=complex)
    pow_dn = np.ones((g, d), dtype=complex)
    for k in range(1, d):
        pow_up[:, k] = pow_up[:, k - 1] * beta
        pow_dn[:, k] = pow_dn[:, k - 1] * (-np.conj(beta))
    up = pow_up[:, np.clip(diff, 0, d - 1)] * fac            # e^{b a^dag}
    fac_t = fac.T
    dn = pow_dn[:, np.clip(-diff, 0, d - 1)] * fac_t          # e^{-b* a}
    damp = np.exp(-0.5 * np.abs(beta) ** 2)
    return damp[:, None, None] * np.matmul(up, dn)


def _truncation_reach(d: int) -> float:
    # largest amplitude the truncation rule n_max >= a^2 + 5a + 4 supports
    n_max = d - 1
    return (-5.0 + np.sqrt(9.0 + 4.0 * n_max)) / 2.0


def wigner(state, grid) -> WignerGrid:
    """Wigner function W(beta) = (2/pi) <D(beta) P D(beta)^dag> on a grid.

    grid is either a single 1-D array (used for both axes) or a pair
    (re_axis, im_axis).  Uses the identity D(b) P D(-b) = D(2b) P to
    evaluate the displaced parity with one displacement per point.
    """
    rho = _as_matrix(state)
    d = rho.shape[0]
    if isinstance(grid, (tuple, list)) and len(grid) == 2:
        re_axis = np.asarray(grid[0], dtype=float)
        im_axis = np.asarray(grid[1], dtype=float)
    else:
        re_axis = np.asarray(grid, dtype=float)
        im_axis = re_axis.copy()
    if re_axis.size == 0 or im_axis.size == 0:
        raise ShapeError("wigner grid is empty")

    # conservative per-axis check: amplitudes past the reach of the
    # truncation rule cannot be represented by a state of this dimension
    reach = _truncation_reach(d)
    radius = float(max(np.abs(re_axis).max(), np.abs(im_axis).max()))
    extent_warning = radius > reach
    if extent_warning:
        warnings.warn(
            f"wigner grid reaches |beta| = {radius:.2f} but the truncation "
            f"supports only {reach:.2f}", RegimeWarning, stacklevel=2)

    beta = (re_axis[:, None] + 1j * im_axis[None, :]).ravel()
    parity = np.where(np.arange(d) % 2 == 0, 1.0, -1.0)
    out = np.empty(beta.shape[0], dtype=float)
    chunk = 2048
    for s in range(0, beta.shape[0], chunk):
        blk = _displacement_block(2.0 * beta[s:s + chunk], d)
        # Tr[rho D(2b) P] = sum_ij rho_ij D_ji parity_i
        val = np.einsum("ij,gji,i->g", rho, blk, parity, optimize=True)
        out[s:s + chunk] = (2.0 / np.pi) * val.real
    values = out.reshape(re_axis.size, im_axis.size)
    return WignerGrid(re_axis, im_axis, values, extent_warning)


# ---------------------------------------------------------------------------
# protocol scoring

def survival_fit(times, fractions, n_samples: int) -> SurvivalFit:
    """Exponential escape-rate fit on log survival, with a 95% interval.

    Fits ln S = b - rate * t by least squares.  The survival curve must
    be positive and non-increasing; n_samples records how many
    trajectories produced the fractions.
    """
    t = np.asarray(times, dtype=float)
    s = np.asarray(fractions, dtype=float)
    if t.ndim != 1 or t.shape != s.shape:
        raise ShapeError("times and fractions must be matching 1-D arrays")
    if t.size < 5:
        raise ShapeError(f"need at least 5 time points, got {t.size}")
    if n_samples < 100:
        raise ShapeError(f"need at least 100 samples, got {n_samples}")
    if np.any(s <= 0.0) or np.any(s > 1.0):
        raise FitFailedError("survival fractions must lie in (0, 1]")
    if np.any(np.diff(s) > 1e-12):
        raise FitFailedError("survival curve is not non-increasing")
    if np.ptp(t) == 0.0:
        raise FitFailedError("all time points coincide")

    log_s = np.log(s)
    slope, intercept = np.polyfit(t, log_s, 1)
    rate = -slope
    resid = log_s - (slope * t + intercept)
    dof = t.size - 2
    var = (resid @ resid) / dof if dof > 0 else 0.0
    se = np.sqrt(var / ((t - t.mean()) ** 2).sum())
    half = 1.96 * se
    return SurvivalFit(float(rate), float(rate - half), float(rate + half))


def phase_error_stats(estimates, theta_true: float) -> float:
    """Circular variance 1 - |mean e^{i(theta_hat - Theta)}| of estimates."""
    est = np.asarray(estimates, dtype=float)
    if est.ndim != 1:
        raise ShapeError("estimates must be a 1-D array")
    if est.size < 100:
        raise ShapeError(f"need at least 100 samples, got {est.size}")
    resultant = np.exp(1j * (est - theta_true)).mean()
    return float(1.0 - np.abs(resultant))
