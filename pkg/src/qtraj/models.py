"""Circuit-QED model library.

Hamiltonian builders, dispersive-readout pointer states, parametric
amplifier gain, engineered measurement operators, and cat-state
Hamiltonians.  Everything is returned on the joint space [qubit, cavity]
with the qubit factor first, matching the tensor convention in hilbert.

Sign and phase conventions:

* Pointer states: alpha_g = sqrt(kappa) eps / (+i chi - kappa/2) and
  alpha_e with -i chi; output field b_out = eps + sqrt(kappa) alpha.
  Anchor: chi = kappa/2 reflects the drive with a pure -/+ 90 degree
  phase for g/e.
* Sideband cooling is written in the dressed basis (|+>, |->), index 0 =
  |+>: the pump term raises |-, n> to |+, n+1> so that photon decay
  strands the system in the dark state |+, 0>.
* The squeezing quadrature map returns (e^-r, e^+r) for (I_phi, Q_phi).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np

from .errors import (
    AboveThresholdError,
    RegimeWarning,
    ShapeError,
    StraddlingResonanceError,
    TruncationError,
)
from .hilbert import (
    DensityMatrix,
    Operator,
    PureState,
    SpaceShape,
    annihilation,
    identity,
    number_operator,
    pauli,
    tensor,
)


# ---------------------------------------------------------------------------
# parameter records

@dataclass(frozen=True)
class TransmonParams:
    """Transmon and dispersive-coupling energy scales (rad/us)."""

    E_J: float
    E_C: float
    g: float = 0.0
    Delta: float = 0.0
    U: float = 0.0

    def __post_init__(self):
        if self.E_J <= 0 or self.E_C <= 0:
            raise ShapeError("E_J and E_C must be positive")
        if self.E_J / self.E_C < 20:
            warnings.warn("E_J/E_C below 20: outside the transmon regime",
                          RegimeWarning, stacklevel=2)


@dataclass(frozen=True)
class DispersiveParams:
    """Dispersive readout parameters (rates rad/us)."""

    omega_cav: float
    omega_q: float
    chi: float
    kappa: float
    epsilon: float

    def __post_init__(self):
        if self.kappa <= 0:
            raise ShapeError("kappa must be positive")


@dataclass(frozen=True)
class JPAParams:
    """Parametric amplifier pump and detection parameters."""

    lam: float
    kappa: float
    phi: float = 0.0
    eta: float = 1.0
    Delta: float = 0.0

    def __post_init__(self):
        if self.kappa <= 0:
            raise ShapeError("kappa must be positive")
        if abs(self.lam) >= self.kappa / 2:
            raise AboveThresholdError(
                f"|lambda| = {abs(self.lam)} is at or above threshold kappa/2 = {self.kappa / 2}")
        if not (0.0 <= self.eta <= 1.0):
            raise ShapeError("eta must lie in [0, 1]")


@dataclass(frozen=True)
class SidebandConfig:
    """Engineered sideband interaction parameters."""

    abar0: float
    delta: float
    chi: float
    kappa: float
    mode: str = "cooling"

    def __post_init__(self):
        if self.abar0 < 0:
            raise ShapeError("abar0 must be nonnegative")
        if self.mode not in ("cooling", "double"):
            raise ShapeError(f"unknown sideband mode {self.mode!r}")


@dataclass(frozen=True)
class KerrCatParams:
    """Kerr-cat Hamiltonian and two-mode pumping parameters."""

    K: float
    eps2: float
    g2: complex = 0.0
    eps_d: complex = 0.0
    chi_ms: float = 0.0
    chi_mm: float = 0.0
    chi_rr: float = 0.0
    kappa_r: float = 0.0

    def __post_init__(self):
        if self.K <= 0:
            raise ShapeError("Kerr coefficient K must be positive")
        if self.eps2 < 0:
            raise ShapeError("two-photon pump eps2 must be nonnegative")

    @property
    def alpha(self) -> float:
        return float(np.sqrt(self.eps2 / self.K))


# ---------------------------------------------------------------------------
# transmon / dispersive basics

def transmon_frequency(E_J: float, E_C: float) -> float:
    """Qubit frequency sqrt(8 E_J E_C) of the transmon's lowest transition."""
    if E_J <= 0 or E_C <= 0:
        raise ShapeError("E_J and E_C must be positive")
    return float(np.sqrt(8.0 * E_J * E_C))


def dispersive_chi(g: float, Delta: float, U: float | None) -> float:
    """Dispersive shift chi = g^2/Delta * U/(U + Delta).

    U = None or an infinite value selects the two-level limit g^2/Delta.
    """
    if Delta == 0:
        raise StraddlingResonanceError("Delta = 0: no dispersive regime")
    if U is None or np.isinf(U):
        return g * g / Delta
    if U + Delta == 0:
        raise StraddlingResonanceError("U + Delta = 0: straddling resonance")
    return (g * g / Delta) * (U / (U + Delta))


def jc_hamiltonian(g: float, omega_cav: float, omega_q: float,
                   n_max: int) -> Operator:
    """Jaynes-Cummings Hamiltonian on [qubit, cavity]."""
    if n_max < 1:
        raise ShapeError("n_max must be at least 1")
    qubit = SpaceShape((2,))
    cav = SpaceShape((n_max + 1,))
    a = annihilation(n_max)
    h = (omega_cav * tensor(identity(qubit), number_operator(n_max)).data
         + (omega_q / 2.0) * tensor(pauli("z"), identity(cav)).data
         + g * (tensor(pauli("plus"), a).data
                + tensor(pauli("minus"), a.dag()).data))
    return Operator(SpaceShape((2, n_max + 1)), h)


def dispersive_hamiltonian(params: DispersiveParams, n_max: int) -> Operator:
    """Dispersive Hamiltonian: cavity frequency shifted by +/- chi."""
    if n_max < 1:
        raise ShapeError("n_max must be at least 1")
    qubit = SpaceShape((2,))
    n_op = number_operator(n_max)
    h = (params.omega_cav * tensor(identity(qubit), n_op).data
         + (params.omega_q / 2.0) * tensor(pauli("z"), identity(SpaceShape((n_max + 1,)))).data
         + params.chi * tensor(pauli("z"), n_op).data)
    return Operator(SpaceShape((2, n_max + 1)), h)


def drive_hamiltonian(alpha, n_max: int,
                      include_qubit: bool = True) -> Callable[[float], Operator]:
    """Coherent drive schedule t -> alpha*(t) a + alpha(t) a^dag.

    alpha may be a complex constant or a callable t -> complex.  With
    include_qubit the operator is padded onto [qubit, cavity] so it can be
    added to the dispersive Hamiltonian directly.
    """
    if n_max < 1:
        raise ShapeError("n_max must be at least 1")
    a = annihilation(n_max)
    if include_qubit:
        a = tensor(identity(SpaceShape((2,))), a)
    a_dat = a.data
    ad_dat = a.dag().data
    shape = a.shape
    amp = alpha if callable(alpha) else (lambda t, _v=complex(alpha): _v)

    def schedule(t: float) -> Operator:
        v = complex(amp(t))
        return Operator(shape, np.conj(v) * a_dat + v * ad_dat)

    return schedule


# ---------------------------------------------------------------------------
# readout pointer states

class PointerStates(NamedTuple):
    alpha_g: complex
    alpha_e: complex
    b_out_g: complex
    b_out_e: complex


def pointer_states(params: DispersiveParams) -> PointerStates:
    """Steady-state cavity amplitudes and output fields for |g>, |e>.

    alpha_{g/e} = sqrt(kappa) eps / (+/- i chi - kappa/2) (upper sign for
    g) and b_out = eps + sqrt(kappa) alpha.
    """
    chi, kappa, eps = params.chi, params.kappa, params.epsilon
    sk = np.sqrt(kappa)
    alpha_g = sk * eps / (1j * chi - kappa / 2.0)
    alpha_e = sk * eps / (-1j * chi - kappa / 2.0)
    return PointerStates(alpha_g, alpha_e,
                         eps + sk * alpha_g, eps + sk * alpha_e)


def dephasing_rate(alpha_g: complex, alpha_e: complex, chi: float) -> float:
    """Measurement-induced dephasing rate 2 chi Im(alpha_g alpha_e*)."""
    return float(2.0 * chi * np.imag(alpha_g * np.conj(alpha_e)))


# ---------------------------------------------------------------------------
# parametric amplification

def jpa_quadrature_map(r: float, phi: float = 0.0) -> tuple[float, float]:
    """Squeezing factors (e^-r, e^+r) of the (I_phi, Q_phi) quadratures.

    phi labels the amplification axis; the gain magnitudes are axis
    independent.
    """
    return (float(np.exp(-r)), float(np.exp(r)))


def jpa_gain(params: JPAParams) -> tuple[complex, complex]:
    """Signal and idler gains (G_S, G_I) of a below-threshold amplifier.

    G_S = (kappa^2/4 + Delta^2 + |lambda|^2) / ((kappa/2 - i Delta)^2 - |lambda|^2)
    and G_I = i e^{i arg G_S} sqrt(|G_S|^2 - 1), which enforces the
    phase-preserving unitarity relation |G_S|^2 - |G_I|^2 = 1.
    """
    lam, kappa, delta = params.lam, params.kappa, params.Delta
    if abs(lam) >= kappa / 2:
        raise AboveThresholdError("pump at or above oscillation threshold")
    g_s = (kappa**2 / 4 + delta**2 + abs(lam) ** 2) / \
        ((kappa / 2 - 1j * delta) ** 2 - abs(lam) ** 2)
    g_i = 1j * np.exp(1j * np.angle(g_s)) * np.sqrt(abs(g_s) ** 2 - 1.0)
    return (complex(g_s), complex(g_i))


# ---------------------------------------------------------------------------
# engineered measurement operators

def half_parity_operator(gamma: float) -> Operator:
    """Two-qubit half-parity measurement operator.

    M = sqrt(gamma/2) (sigma_z (x) I + I (x) sigma_z)/2, eigenvalues
    sqrt(gamma/2) {1, 0, 0, -1}; the odd-parity pair |01>, |10> spans the
    degenerate kernel.
    """
    if gamma <= 0:
        raise ShapeError("gamma must be positive")
    q = SpaceShape((2,))
    m = 0.5 * (tensor(pauli("z"), identity(q)).data
               + tensor(identity(q), pauli("z")).data)
    return Operator(SpaceShape((2, 2)), np.sqrt(gamma / 2.0) * m)


def qubit_axis_operator(delta: float) -> Operator:
    """sigma_delta = cos(delta) sigma_x + sin(delta) sigma_y."""
    return Operator(SpaceShape((2,)),
                    np.cos(delta) * pauli("x").data + np.sin(delta) * pauli("y").data)


def sideband_hamiltonian(config: SidebandConfig, n_max: int) -> Operator:
    """Effective sideband interaction on [dressed qubit, cavity].

    cooling: (chi abar0 / 2)(e^{i delta} sigma^+ a^dag + h.c.) in the
    dressed basis, pumping |-, n> to |+, n+1> so cavity decay leaves the
    dark state |+, 0>.  double: (chi abar0 / 2) sigma_delta (x) (a + a^dag),
    a longitudinal coupling encoding sigma_delta on the cavity quadrature.
    """
    if n_max < (2 if config.mode == "cooling" else 1):
        raise ShapeError("n_max too small for the requested sideband mode")
    coef = config.chi * config.abar0 / 2.0
    a = annihilation(n_max)
    if config.mode == "cooling":
        up = coef * np.exp(1j * config.delta) * tensor(pauli("plus"), a.dag()).data
        h = up + up.conj().T
    else:
        h = coef * tensor(qubit_axis_operator(config.delta),
                          Operator(a.shape, a.data + a.dag().data)).data
    return Operator(SpaceShape((2, n_max + 1)), h)


def engineered_measurement_rate(config: SidebandConfig, eta: float) -> float:
    """Effective qubit measurement rate 2 chi^2 abar0^2 eta / kappa."""
    if config.kappa <= 0:
        raise ShapeError("kappa must be positive")
    return float(2.0 * config.chi**2 * config.abar0**2 * eta / config.kappa)


# ---------------------------------------------------------------------------
# cat-state engineering

def kerr_cat_hamiltonian(K: float, eps2: float, n_max: int) -> Operator:
    """Kerr Hamiltonian with two-photon pump: -K a^dag2 a^2 + eps2 (a^dag2 + a^2).

    Degenerate eigenstates |+alpha> and |-alpha> with alpha = sqrt(eps2/K)
    at energy eps2^2/K.  Requires truncation adequate for alpha.
    """
    if K <= 0:
        raise ShapeError("K must be positive")
    alpha = np.sqrt(eps2 / K)
    need = alpha**2 + 5 * alpha + 4
    if n_max < need:
        raise TruncationError(
            f"n_max = {n_max} below the {need:.1f} required for alpha = {alpha:.2f}")
    a = annihilation(n_max).data
    a2 = a @ a
    ad2 = a2.conj().T
    h = -K * (ad2 @ a2) + eps2 * (ad2 + a2)
    return Operator(SpaceShape((n_max + 1,)), h)


def two_mode_pump_hamiltonian(params: KerrCatParams, n_max_m: int,
                              n_max_r: int) -> Operator:
    """Pumped memory-plus-fast-mode Hamiltonian on [memory, fast].

    H = g2* a_m^2 a_r^dag + g2 a_m^dag2 a_r + eps_d* a_r + eps_d a_r^dag
        - chi_ms n_m n_r - chi_mm a_m^dag2 a_m^2 - chi_rr a_r^dag2 a_r^2
    """
    if n_max_m < 2 or n_max_r < 1:
        raise ShapeError("need n_max_m >= 2 and n_max_r >= 1")
    dm, dr = n_max_m + 1, n_max_r + 1
    am = annihilation(n_max_m)
    ar = annihilation(n_max_r)
    am2 = Operator(am.shape, am.data @ am.data)
    em = identity(SpaceShape((dm,)))
    er = identity(SpaceShape((dr,)))
    g2, eps_d = complex(params.g2), complex(params.eps_d)

    h = np.conj(g2) * tensor(am2, ar.dag()).data
    h += g2 * tensor(am2.dag(), ar).data
    h += np.conj(eps_d) * tensor(em, ar).data
    h += eps_d * tensor(em, ar.dag()).data
    h -= params.chi_ms * tensor(number_operator(n_max_m),
                                number_operator(n_max_r)).data
    h -= params.chi_mm * tensor(Operator(am.shape, am2.dag().data @ am2.data), er).data
    ar2 = ar.data @ ar.data
    h -= params.chi_rr * tensor(em, Operator(ar.shape, ar2.conj().T @ ar2)).data
    return Operator(SpaceShape((dm, dr)), h)


class EliminationResult(NamedTuple):
    kappa2: float
    collapse: Operator | None


def adiabatic_elimination(params: KerrCatParams,
                          n_max: int | None = None) -> EliminationResult:
    """Eliminate the fast mode: two-photon dissipation kappa2 = 4 |g2|^2 / kappa_r.

    Returns the rate and, when n_max is given, the effective collapse
    operator sqrt(kappa2) a^2 on the memory mode.  Warns when kappa_r is
    not well separated from |g2|.
    """
    if params.kappa_r <= 0:
        raise ShapeError("kappa_r must be positive for elimination")
    g2 = abs(params.g2)
    if g2 > 0 and params.kappa_r < 10 * g2:
        warnings.warn("kappa_r below 10 |g2|: adiabatic elimination marginal",
                      RegimeWarning, stacklevel=2)
    kappa2 = 4.0 * g2**2 / params.kappa_r
    collapse = None
    if n_max is not None:
        a = annihilation(n_max).data
        collapse = Operator(SpaceShape((n_max + 1,)),
                            np.sqrt(kappa2) * (a @ a))
    return EliminationResult(float(kappa2), collapse)


# ---------------------------------------------------------------------------
# canonical phase

def canonical_phase_distribution(state, grid) -> np.ndarray:
    """Ideal phase POVM density p(phi) = <phi| rho |phi> on the given angles.

    |phi> = (1/sqrt(2 pi)) sum_n e^{i phi n} |n>, truncated at the state's
    n_max.  The returned array integrates to 1 over a full 2 pi grid.
    """
    grid = np.asarray(grid, dtype=float)
    if grid.size == 0:
        raise ShapeError("phase grid is empty")
    if isinstance(state, PureState):
        rho = np.outer(state.amplitudes, state.amplitudes.conj())
    elif isinstance(state, (DensityMatrix, Operator)):
        rho = state.data
    else:
        rho = np.asarray(state, dtype=complex)
    d = rho.shape[0]
    n = np.arange(d)
    # p(phi) = (1/2pi) sum_{mn} rho_mn e^{i phi (n - m)}
    phases = np.exp(1j * np.outer(grid, n))           # (G, d)
    p = np.einsum("gm,mn,gn->g", phases.conj(), rho, phases).real / (2 * np.pi)
    return p
