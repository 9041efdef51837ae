"""Stochastic master equation integrators and trajectory generation.

Conventions (units: hbar = 1, rates in rad/us, time in us):

* A measurement channel is a collapse operator ``c`` (units sqrt(rad/us)),
  an efficiency ``eta`` and a local-oscillator phase ``phi``.  The monitored
  quadrature is ``c_tilde = c * exp(i phi)``.
* Ito form of the diffusive SME:

      drho = -i[H, rho] dt + sum_c D[c] rho dt + sum_u D[u] rho dt
             + sum_c sqrt(eta_c) (c_t rho + rho c_t^dag - <c_t + c_t^dag> rho) dW_c

  with D[X] rho = X rho X^dag - (X^dag X rho + rho X^dag X)/2.
* The raw record increment is dy = sqrt(eta) <c_t + c_t^dag> dt + dW.  For a
  qubit dephasing channel c = sqrt(Gamma_D/2) sigma_z at phi = 0 this is
  rescaled to the conventional signal V with V dt = <sigma_z> dt
  + dW / sqrt(2 eta Gamma_D); any other channel reports V = dy/dt.
* The default trajectory integrator is a normalized-Kraus (POVM style)
  update which preserves positivity exactly: one step applies

      M = 1 - (iH + sum c^dag c / 2) dt + sum sqrt(eta) c_t dy
          + sum (eta/2) c_t^2 (dy^2 - dt)

  followed by the inefficient / unmonitored feed terms and renormalization.
  The plain Euler-Maruyama step is kept for feedback-equation cross checks.

Reproducibility: every trajectory draws its noise from a counter-based
stream keyed by (master_seed, trajectory_index); see WienerStream.  All
batched kernels give bit-identical results for a trajectory regardless of
how trajectories are grouped into batches, so parallel fan-out cannot
change any output.
"""

from __future__ import annotations

import copy
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Sequence

import numpy as np
from scipy.linalg import expm as _expm
from scipy.special import ndtri

from .errors import (
    IntegrationUnstableError,
    RecordUndefinedError,
    ShapeError,
    StepSizeError,
    UnderflowError,
)
from .hilbert import DensityMatrix, Operator, PureState, SpaceShape

_MAX_STEPS = 10_000_000
_TRACE_DEFECT_LIMIT = 0.01
_UNDERFLOW = 1e-300

#: default state-thinning stride for stored trajectories
DEFAULT_THIN = 10


# ---------------------------------------------------------------------------
# noise streams

class WienerStream:
    """Counter-based Gaussian increment stream for one trajectory.

    Increments are a pure function of (master_seed, trajectory_index,
    counter): the pair seeds a Philox-4x64 generator (key word 0 =
    master_seed, key word 1 = trajectory_index) and the counter indexes
    successive 64-bit raw outputs.  Each increment consumes exactly one
    raw output, mapped through the inverse normal CDF, so streams can be
    repositioned exactly and two streams never overlap.
    """

    __slots__ = ("master_seed", "trajectory_index", "counter", "_bitgen")

    def __init__(self, master_seed: int, trajectory_index: int = 0, counter: int = 0):
        if not (0 <= int(master_seed) < 2**64):
            raise ShapeError("master_seed must fit in 64 bits")
        if not (0 <= int(trajectory_index) < 2**64):
            raise ShapeError("trajectory_index must fit in 64 bits")
        if counter < 0:
            raise ShapeError("counter must be nonnegative")
        self.master_seed = int(master_seed)
        self.trajectory_index = int(trajectory_index)
        self.counter = int(counter)
        key = np.array([self.master_seed, self.trajectory_index], dtype=np.uint64)
        bg = np.random.Philox(key=key)
        # Philox.advance moves whole 4-output counter blocks
        if counter:
            bg.advance(counter // 4)
            if counter % 4:
                bg.random_raw(counter % 4)
        self._bitgen = bg

    def increments(self, n: int, dt: float) -> np.ndarray:
        """Draw n Gaussian increments with variance dt."""
        raw = self._bitgen.random_raw(int(n))
        raw = np.atleast_1d(np.asarray(raw, dtype=np.uint64))
        self.counter += int(n)
        # one uniform per raw word, strictly inside (0, 1)
        u = ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53
        return ndtri(u) * np.sqrt(dt)

    def increment_block(self, n_steps: int, n_channels: int, dt: float) -> np.ndarray:
        """Draw a (n_steps, n_channels) block, channel index fastest."""
        flat = self.increments(int(n_steps) * int(n_channels), dt)
        return flat.reshape(int(n_steps), int(n_channels))


# ---------------------------------------------------------------------------
# model containers

@dataclass(frozen=True)
class MeasurementChannel:
    """A monitored collapse channel: operator, efficiency, LO phase."""

    c: Operator | Callable[[float], Operator]
    eta: float = 1.0
    phi: float = 0.0

    def __post_init__(self):
        if not (0.0 <= self.eta <= 1.0):
            raise ShapeError(f"efficiency must lie in [0, 1], got {self.eta}")


@dataclass(frozen=True)
class LindbladModel:
    """Hamiltonian plus monitored and unmonitored collapse channels.

    H may be an Operator, None, or a callable t -> Operator evaluated once
    per step (piecewise-constant on the integration grid).  Channel
    operators may likewise be callables for scheduled measurement axes.
    """

    H: Operator | Callable[[float], Operator] | None = None
    channels: tuple[MeasurementChannel, ...] = ()
    unmonitored: tuple[Operator, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(self.channels))
        object.__setattr__(self, "unmonitored", tuple(self.unmonitored))
        dims = None
        for op in self._static_ops():
            if dims is None:
                dims = op.shape.dims
            elif op.shape.dims != dims:
                raise ShapeError("model operators live on different spaces")
        if dims is None and not self._has_callable():
            raise ShapeError("model needs at least one operator")
        object.__setattr__(self, "_dims", dims)

    def _static_ops(self):
        ops = []
        if isinstance(self.H, Operator):
            ops.append(self.H)
        for ch in self.channels:
            if isinstance(ch.c, Operator):
                ops.append(ch.c)
        ops.extend(self.unmonitored)
        return ops

    def _has_callable(self):
        if callable(self.H) and not isinstance(self.H, Operator):
            return True
        return any(callable(ch.c) and not isinstance(ch.c, Operator)
                   for ch in self.channels)

    def space(self) -> SpaceShape:
        dims = self._dims
        if dims is None:
            # all operators scheduled; probe at t = 0
            probe = self.H(0.0) if callable(self.H) else self.channels[0].c(0.0)
            dims = probe.shape.dims
        return SpaceShape(dims)

    def is_static(self) -> bool:
        return not self._has_callable()

    def max_rate(self) -> float:
        """Largest rate scale (spectral norms), for step-size guards.

        Scheduled operators are probed at t = 0.
        """
        rates = [0.0]
        h = self.H(0.0) if (callable(self.H) and not isinstance(self.H, Operator)) else self.H
        if h is not None:
            rates.append(h.norm2())
        for ch in self.channels:
            c = ch.c(0.0) if (callable(ch.c) and not isinstance(ch.c, Operator)) else ch.c
            rates.append(c.norm2() ** 2)
        for u in self.unmonitored:
            rates.append(u.norm2() ** 2)
        return max(rates)


class StepResult(NamedTuple):
    rho: DensityMatrix
    trace_defect: float


# ---------------------------------------------------------------------------
# superoperator algebra (wrapper level)

def dissipator(x: Operator, rho: Operator) -> Operator:
    """Lindblad dissipator D[x] rho = x rho x^dag - {x^dag x, rho}/2."""
    if x.shape.dims != rho.shape.dims:
        raise ShapeError("dissipator operands on different spaces")
    xd = x.data.conj().T
    xdx = xd @ x.data
    out = x.data @ rho.data @ xd - 0.5 * (xdx @ rho.data + rho.data @ xdx)
    return Operator(x.shape, out)


def innovation(x: Operator, rho: Operator) -> Operator:
    """Measurement innovation H[x] rho = x rho + rho x^dag - <x + x^dag> rho."""
    if x.shape.dims != rho.shape.dims:
        raise ShapeError("innovation operands on different spaces")
    xr = x.data @ rho.data
    s = xr + xr.conj().T
    return Operator(x.shape, s - np.trace(s) * rho.data)


# ---------------------------------------------------------------------------
# prepared step context (raw arrays, batched over leading axis)

class _StepContext:
    """Arrays and caches shared by the batched step kernels."""

    def __init__(self, model: LindbladModel):
        self.space = model.space()
        d = self.space.dim
        self.d = d
        self.h_fun = None
        self.h0 = None
        if callable(model.H) and not isinstance(model.H, Operator):
            self.h_fun = model.H
        elif model.H is not None:
            self.h0 = model.H.data

        self.c_funs = []
        self.c0 = []
        self.eta = np.array([ch.eta for ch in model.channels], dtype=float)
        self.phi = np.array([ch.phi for ch in model.channels], dtype=float)
        for ch in model.channels:
            if callable(ch.c) and not isinstance(ch.c, Operator):
                self.c_funs.append(ch.c)
                self.c0.append(None)
            else:
                self.c_funs.append(None)
                self.c0.append(ch.c.data)
        self.unmon = [u.data for u in model.unmonitored]
        self.n_channels = len(model.channels)
        self.static = model.is_static()
        self._cache_t = None
        self._cache = None
        # record normalization per channel: eq15 factor or None for dy/dt
        self.record_scale = [
            _eq15_scale(self.c0[i], self.eta[i], self.phi[i])
            for i in range(self.n_channels)
        ]

    def at(self, t: float, dt: float):
        """Channel matrices and Kraus base for the step starting at t."""
        if self.static and self._cache is not None and self._cache[-1] == dt:
            return self._cache[:-1]
        h = self.h_fun(t).data if self.h_fun is not None else self.h0
        cs = [f(t).data if f is not None else c for f, c in zip(self.c_funs, self.c0)]
        csum = np.zeros((self.d, self.d), dtype=complex)
        for c in cs:
            csum += c.conj().T @ c
        for u in self.unmon:
            csum += u.conj().T @ u
        base = np.eye(self.d, dtype=complex) - 0.5 * dt * csum
        if h is not None:
            base = base - 1j * dt * h
        c2 = [c @ c for c in cs]
        cdagc = [c.conj().T @ c for c in cs]
        out = (h, cs, c2, cdagc, base)
        if self.static:
            self._cache = out + (dt,)
        return out


def _eq15_scale(c, eta, phi):
    """sqrt(2 eta Gamma_D) for a phi=0 qubit sigma_z channel, else None."""
    if c is None or eta <= 0.0 or phi != 0.0 or c.shape != (2, 2):
        return None
    beta = c[0, 0]
    ok = (
        abs(c[0, 1]) == 0.0 and abs(c[1, 0]) == 0.0
        and abs(beta.imag) == 0.0 and beta.real > 0.0
        and abs(c[1, 1] + beta) == 0.0
    )
    if not ok:
        return None
    gamma_d = 2.0 * beta.real**2
    return np.sqrt(2.0 * eta * gamma_d)


def _hermitize(rho):
    return 0.5 * (rho + rho.conj().transpose(0, 2, 1))


def _btrace(rho):
    return np.einsum("nii->n", rho)


def _lindblad_rhs(rho, h, cs, cdagc, unmon):
    """Batched Lindblad right-hand side on (N, d, d) stacks."""
    out = np.zeros_like(rho)
    if h is not None:
        out -= 1j * (h @ rho - rho @ h)
    for c, cc in zip(cs, cdagc):
        out += c @ rho @ c.conj().T - 0.5 * (cc @ rho + rho @ cc)
    for u in unmon:
        uu = u.conj().T @ u
        out += u @ rho @ u.conj().T - 0.5 * (uu @ rho + rho @ uu)
    return out


def _channel_signal(rho, c, phase):
    """<c e^{i phi} + h.c.> for each batch entry; phase scalar or (N,)."""
    tr_c = np.einsum("nij,ji->n", rho, c)
    return 2.0 * np.real(phase * tr_c)


def _kraus_step(rho, dw, dt, ctx: _StepContext, t, phases=None):
    """Positivity-preserving normalized-Kraus step on a (N, d, d) stack.

    Returns (rho', dy, trace) where trace is the pre-normalization weight.
    """
    h, cs, c2, cdagc, base = ctx.at(t, dt)
    n = rho.shape[0]
    m = np.broadcast_to(base, rho.shape).copy()
    dy = np.empty((n, ctx.n_channels), dtype=float)
    for i, c in enumerate(cs):
        if phases is not None and phases[i] is not None:
            ph = np.exp(1j * phases[i])
        else:
            ph = np.exp(1j * ctx.phi[i])
        eta = ctx.eta[i]
        sig = _channel_signal(rho, c, ph)
        dy_i = np.sqrt(eta) * sig * dt + dw[:, i]
        dy[:, i] = dy_i
        coef1 = (np.sqrt(eta) * dy_i) * ph
        coef2 = (0.5 * eta * (dy_i * dy_i - dt)) * (ph * ph)
        m += coef1[..., None, None] * c + coef2[..., None, None] * c2[i]
    out = m @ rho @ m.conj().transpose(0, 2, 1)
    for i, c in enumerate(cs):
        lost = (1.0 - ctx.eta[i]) * dt
        if lost > 0.0:
            out += lost * (c @ rho @ c.conj().T)
    for u in ctx.unmon:
        out += dt * (u @ rho @ u.conj().T)
    tr = np.real(_btrace(out))
    if not np.all(np.isfinite(tr)):
        raise IntegrationUnstableError("non-finite trace in conditioning update")
    if np.min(tr) < _UNDERFLOW:
        raise UnderflowError("conditioning update weight underflowed")
    out /= tr[..., None, None]
    return _hermitize(out), dy, tr


def _ito_step(rho, dw, dt, ctx: _StepContext, t, phases=None):
    """Euler-Maruyama step on a (N, d, d) stack.

    Returns (rho', dy, per-trajectory trace defects).  Defects are the
    pre-normalization |tr - 1|; callers must treat non-finite values as
    failures (compare with ``not (defect <= limit)``).
    """
    h, cs, c2, cdagc, base = ctx.at(t, dt)
    n = rho.shape[0]
    drho = dt * _lindblad_rhs(rho, h, cs, cdagc, ctx.unmon)
    dy = np.empty((n, ctx.n_channels), dtype=float)
    for i, c in enumerate(cs):
        if phases is not None and phases[i] is not None:
            ph = np.exp(1j * phases[i])
        else:
            ph = np.exp(1j * ctx.phi[i])
        eta = ctx.eta[i]
        sig = _channel_signal(rho, c, ph)
        dy_i = np.sqrt(eta) * sig * dt + dw[:, i]
        dy[:, i] = dy_i
        if eta > 0.0:
            ct_rho = (ph * c) @ rho
            hterm = ct_rho + ct_rho.conj().transpose(0, 2, 1) \
                - sig[..., None, None] * rho
            drho += (np.sqrt(eta) * dw[:, i])[..., None, None] * hterm
    # instability shows up as non-finite entries here; keep the arithmetic
    # quiet and let callers act on the reported defect
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        out = rho + drho
        tr = np.real(_btrace(out))
        defect = np.abs(tr - 1.0)
        out /= tr[..., None, None]
        return _hermitize(out), dy, defect


def _rk4_step(rho, dt, ctx: _StepContext, t):
    h, cs, c2, cdagc, base = ctx.at(t, dt)
    args = (h, cs, cdagc, ctx.unmon)
    k1 = _lindblad_rhs(rho, *args)
    k2 = _lindblad_rhs(rho + 0.5 * dt * k1, *args)
    k3 = _lindblad_rhs(rho + 0.5 * dt * k2, *args)
    k4 = _lindblad_rhs(rho + dt * k3, *args)
    return _hermitize(rho + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4))


# ---------------------------------------------------------------------------
# public single-step operations

def lindblad_step(model: LindbladModel, rho: DensityMatrix, dt: float,
                  t: float = 0.0) -> DensityMatrix:
    """One RK4 step of the unconditioned master equation.

    Requires dt * (largest rate scale) <= 0.05; the right-hand side is
    traceless so the trace is preserved to rounding.
    """
    rate = model.max_rate()
    if dt * rate > 0.05:
        raise StepSizeError(
            f"dt*rate = {dt * rate:.3g} exceeds 0.05; reduce dt below {0.05 / rate:.3g}"
        )
    ctx = _StepContext(model)
    out = _rk4_step(rho.data[None], dt, ctx, t)[0]
    return DensityMatrix(rho.shape, out)


def sme_step_ito(model: LindbladModel, rho: DensityMatrix, dw, dt: float,
                 t: float = 0.0) -> StepResult:
    """One Euler-Maruyama step of the diffusive SME.

    dw holds one Wiener increment per monitored channel.  The state is
    renormalized and the pre-normalization trace defect reported; a defect
    above 0.01 raises IntegrationUnstableError.

    Euler steps are not positivity-preserving: the output is hermitian and
    unit-trace but its smallest eigenvalue can dip below zero by the
    scheme's local error.  Use the Kraus integrator when exact positivity
    matters.
    """
    ctx = _StepContext(model)
    dw = np.atleast_1d(np.asarray(dw, dtype=float)).reshape(1, -1)
    if dw.shape[1] != ctx.n_channels:
        raise ShapeError(f"expected {ctx.n_channels} increments, got {dw.shape[1]}")
    out, dy, defects = _ito_step(rho.data[None], dw, dt, ctx, t)
    defect = float(defects[0])
    if not (defect <= _TRACE_DEFECT_LIMIT):
        raise IntegrationUnstableError(
            f"trace defect {defect:.3g} exceeds {_TRACE_DEFECT_LIMIT}; step too large"
        )
    return StepResult(DensityMatrix._trusted(rho.shape, out[0]), defect)


def sme_step_kraus(model: LindbladModel, rho: DensityMatrix, dw, dt: float,
                   t: float = 0.0) -> DensityMatrix:
    """One normalized-Kraus (POVM style) step; preserves positivity exactly."""
    ctx = _StepContext(model)
    dw = np.atleast_1d(np.asarray(dw, dtype=float)).reshape(1, -1)
    if dw.shape[1] != ctx.n_channels:
        raise ShapeError(f"expected {ctx.n_channels} increments, got {dw.shape[1]}")
    out, dy, tr = _kraus_step(rho.data[None], dw, dt, ctx, t)
    return DensityMatrix(rho.shape, out[0])


_SZ = np.diag([1.0 + 0j, -1.0 + 0j])


def sme_step_phase(rho: DensityMatrix, gamma_d: float, eta: float, phi: float,
                   dw: float, dt: float) -> DensityMatrix:
    """Qubit dephasing-channel step with explicit LO-phase split.

    Applies the deterministic dephasing (Gamma_D/2) D[sigma_z] dt plus the
    informational cos(phi) innovation term and the sin(phi) stochastic
    phase-kick term i sqrt(eta Gamma_D / 2) sin(phi) [sigma_z, rho] dW.
    Equivalent to sme_step_ito with channel sqrt(Gamma_D/2) sigma_z at
    phase phi; the split is kept explicit for tests and pedagogy.
    """
    if rho.dim != 2:
        raise ShapeError("sme_step_phase acts on a single qubit")
    r = rho.data
    sz_r = _SZ @ r
    r_sz = r @ _SZ
    # (Gamma_D/2) D[sigma_z] = (Gamma_D/2)(sz rho sz - rho)
    drho = (gamma_d / 2.0) * dt * (_SZ @ r @ _SZ - r)
    k = np.sqrt(eta * gamma_d / 2.0)
    z = np.real(np.trace(sz_r))
    drho += k * np.cos(phi) * dw * (sz_r + r_sz - 2.0 * z * r)
    drho += 1j * k * np.sin(phi) * dw * (sz_r - r_sz)
    out = r + drho
    out /= np.real(np.trace(out))
    out = 0.5 * (out + out.conj().T)
    return DensityMatrix._trusted(rho.shape, out)


def generate_record(rho: DensityMatrix, channel: MeasurementChannel, dw: float,
                    dt: float) -> float:
    """Synthesize the scaled record value V for one step.

    Qubit sigma_z channels at phi = 0 use the conventional normalization
    V dt = <sigma_z> dt + dW / sqrt(2 eta Gamma_D); every other channel
    reports V = dy/dt with dy = sqrt(eta) <c e^{i phi} + h.c.> dt + dW.
    """
    if channel.eta <= 0.0:
        raise RecordUndefinedError("channel with eta = 0 produces no record")
    c = channel.c(0.0) if (callable(channel.c) and not isinstance(channel.c, Operator)) else channel.c
    if c.shape.dims != rho.shape.dims:
        raise ShapeError("channel and state live on different spaces")
    ph = np.exp(1j * channel.phi)
    sig = float(2.0 * np.real(ph * np.trace(rho.data @ c.data)))
    dy = np.sqrt(channel.eta) * sig * dt + dw
    scale = _eq15_scale(c.data, channel.eta, channel.phi)
    if scale is not None:
        return float(dy / (scale * dt))
    return float(dy / dt)


def povm_update(rho: DensityMatrix, v: float, dt: float,
                gamma_d: float) -> DensityMatrix:
    """Gaussian-POVM conditioning of a qubit on one record sample V.

    Applies Omega(V) = exp[-(Gamma_D/2)(V - sigma_z)^2 dt] and renormalizes.
    Raises UnderflowError when the outcome weight falls below 1e-300.
    """
    if rho.dim != 2:
        raise ShapeError("povm_update acts on a single qubit")
    # w_e, w_g are the squared Kraus weights Omega_e^2, Omega_g^2
    w_e = np.exp(-gamma_d * (v - 1.0) ** 2 * dt)
    w_g = np.exp(-gamma_d * (v + 1.0) ** 2 * dt)
    out = rho.data * np.array([[w_e, np.sqrt(w_e * w_g)],
                               [np.sqrt(w_e * w_g), w_g]])
    tr = np.real(np.trace(out))
    if tr < _UNDERFLOW:
        raise UnderflowError("POVM outcome weight underflowed")
    return DensityMatrix(rho.shape, out / tr)


def bayesian_update(priors, vbar: float, t: float, eta: float,
                    gamma_d: float) -> np.ndarray:
    """Posterior over (|e>, |g>) given the time-averaged record vbar.

    The integrated record is Gaussian with mean +/-1 and variance
    1 / (2 eta Gamma_D t) conditioned on the state.
    """
    p = np.asarray(priors, dtype=float)
    if p.shape != (2,) or np.any(p < 0):
        raise ShapeError("priors must be two nonnegative weights")
    inv_var = 2.0 * eta * gamma_d * t
    # likelihoods up to a common factor; subtract max exponent for safety
    ex = np.array([-0.5 * inv_var * (vbar - 1.0) ** 2,
                   -0.5 * inv_var * (vbar + 1.0) ** 2])
    ex -= ex.max()
    w = p * np.exp(ex)
    s = w.sum()
    if s < _UNDERFLOW:
        raise UnderflowError("posterior weight underflowed")
    return w / s


# ---------------------------------------------------------------------------
# trajectories

@dataclass
class ControlStep:
    """Per-step output of a feedback controller."""

    h_extra: np.ndarray | None = None        # added to H for this step
    phases: Sequence[float | None] | None = None   # per-channel LO phase override
    log: tuple = ()


class Controller:
    """Base class for in-loop controllers; subclasses override the hooks.

    control() runs before the step and may retune the Hamiltonian or the
    measurement phases; observe() runs after the step with the new state
    and the step's record values.  Both receive raw (d, d) arrays.
    """

    def control(self, step: int, t: float, rho: np.ndarray) -> ControlStep | None:
        return None

    def observe(self, step: int, t: float, rho: np.ndarray,
                v: np.ndarray) -> None:
        return None


@dataclass
class TrajectoryRecord:
    """Stored output of one conditioned trajectory.

    states_data holds the thinned states as a raw (S, d, d) stack (or
    (S, d) amplitudes for pure-state protocols); .states wraps them on
    demand.  records and increments hold per-step V values and Wiener
    increments, one column per channel.
    """

    space: SpaceShape
    times: np.ndarray
    state_times: np.ndarray
    states_data: np.ndarray | None
    records: np.ndarray | None
    increments: np.ndarray | None
    controller_log: tuple
    master_seed: int
    trajectory_index: int
    pure: bool = False
    meta: dict = field(default_factory=dict)

    @property
    def states(self):
        # states_data passed batched validation when the record was built,
        # so wrap without re-running per-state eigenvalue checks
        if self.states_data is None:
            return None
        if self.pure:
            return [PureState(self.space, a) for a in self.states_data]
        return [DensityMatrix._trusted(self.space, r) for r in self.states_data]

    def validate(self, strict_eigen: bool = True):
        """Check the alignment and state invariants of the record.

        strict_eigen=False skips the positivity floor; trajectory runners
        use it for the Euler integrator, whose states are hermitian and
        unit-trace but only positive up to the scheme's local error.
        """
        n = len(self.times) - 1
        if self.records is not None and len(self.records) != n:
            raise ShapeError("record length does not match step grid")
        if self.increments is not None and len(self.increments) != n:
            raise ShapeError("increment length does not match step grid")
        if self.states_data is not None and len(self.states_data) != len(self.state_times):
            raise ShapeError("state count does not match state_times")
        if self.states_data is not None:
            _validate_states(self.states_data, self.pure, strict_eigen)
        return self


def _validate_states(stack, pure, strict_eigen=True):
    if pure:
        nrm = np.linalg.norm(stack, axis=1)
        if np.max(np.abs(nrm - 1.0)) > 1e-9:
            raise ShapeError("stored pure state drifted from unit norm")
        return
    tr = np.einsum("nii->n", stack)
    if np.max(np.abs(tr - 1.0)) > 1e-9:
        raise ShapeError("stored state trace drifted from 1")
    if np.max(np.abs(stack - stack.conj().transpose(0, 2, 1))) > 1e-9:
        raise ShapeError("stored state not hermitian")
    if strict_eigen:
        w = np.linalg.eigvalsh(stack)
        if w.min() < -1e-9:
            raise ShapeError(f"stored state has eigenvalue {w.min():.3e}")


def _state_indices(n_steps: int, thin: int) -> np.ndarray:
    idx = np.arange(0, n_steps + 1, max(1, int(thin)))
    if idx[-1] != n_steps:
        idx = np.append(idx, n_steps)
    return idx


def simulate_trajectory(model: LindbladModel, duration: float, dt: float,
                        stream: WienerStream | None = None,
                        increments: np.ndarray | None = None,
                        controller: Controller | None = None,
                        integrator: str = "auto",
                        thin: int = DEFAULT_THIN,
                        store_states: bool = True,
                        rho0: DensityMatrix | None = None) -> TrajectoryRecord:
    """Integrate one conditioned trajectory.

    integrator is 'kraus' (default when channels are present), 'ito', or
    'rk4' (deterministic, the default when there are no channels).  Noise
    comes from ``stream`` unless an explicit (n_steps, n_channels)
    increment array is given, which replays a stored trajectory.
    """
    ctx = _StepContext(model)
    n_steps = int(round(duration / dt))
    if n_steps <= 0:
        raise ShapeError("duration must cover at least one step")
    if n_steps > _MAX_STEPS:
        raise ShapeError(f"{n_steps} steps exceeds the {_MAX_STEPS} cap")
    if integrator == "auto":
        integrator = "kraus" if ctx.n_channels else "rk4"
    if integrator not in ("kraus", "ito", "rk4"):
        raise ShapeError(f"unknown integrator {integrator!r}")
    if integrator == "rk4" and ctx.n_channels:
        raise ShapeError("rk4 integrator cannot condition on measurement channels")
    if integrator == "rk4" and dt * model.max_rate() > 0.05:
        raise StepSizeError("dt too large for the deterministic RK4 path")

    if rho0 is None:
        raise ShapeError("rho0 is required")
    rho = rho0.data[None].copy()

    if ctx.n_channels:
        if increments is not None:
            dws = np.asarray(increments, dtype=float)
            if dws.shape != (n_steps, ctx.n_channels):
                raise ShapeError("increment array has wrong shape")
        elif stream is not None:
            dws = stream.increment_block(n_steps, ctx.n_channels, dt)
        else:
            raise ShapeError("monitored model needs a stream or increments")
    else:
        dws = np.zeros((n_steps, 0))

    times = np.arange(n_steps + 1) * dt
    sidx = _state_indices(n_steps, thin)
    states = np.empty((len(sidx),) + rho.shape[1:], dtype=complex) if store_states else None
    if store_states:
        states[0] = rho[0]
    records = np.empty((n_steps, ctx.n_channels)) if ctx.n_channels else None
    logs = []
    s_next = 1

    for k in range(n_steps):
        t = times[k]
        phases = None
        h_extra = None
        if controller is not None:
            cs = controller.control(k, t, rho[0])
            if cs is not None:
                phases = cs.phases
                h_extra = cs.h_extra
                if cs.log:
                    logs.append(cs.log)
        try:
            if h_extra is not None:
                step_ctx = _augmented_ctx(ctx, h_extra, t)
            else:
                step_ctx = ctx
            if integrator == "kraus":
                rho, dy, _ = _kraus_step(rho, dws[k:k + 1], dt, step_ctx, t, phases)
            elif integrator == "ito":
                rho, dy, defects = _ito_step(rho, dws[k:k + 1], dt, step_ctx, t, phases)
                if not (defects[0] <= _TRACE_DEFECT_LIMIT):
                    raise IntegrationUnstableError(
                        f"trace defect {defects[0]:.3g} at step {k}", step_index=k)
            else:
                rho = _rk4_step(rho, dt, step_ctx, t)
                dy = np.zeros((1, 0))
        except IntegrationUnstableError as exc:
            if exc.step_index is None:
                exc.step_index = k
            raise
        except UnderflowError as exc:
            raise UnderflowError(f"{exc} (at step {k})") from exc

        if ctx.n_channels:
            v = _scale_records(dy[0], ctx, dt)
            records[k] = v
        else:
            v = np.zeros(0)
        if controller is not None:
            controller.observe(k, times[k + 1], rho[0], v)
        if store_states and s_next < len(sidx) and k + 1 == sidx[s_next]:
            states[s_next] = rho[0]
            s_next += 1

    rec = TrajectoryRecord(
        space=ctx.space,
        times=times,
        state_times=times[sidx],
        states_data=states,
        records=records,
        increments=dws if ctx.n_channels else None,
        controller_log=tuple(logs),
        master_seed=stream.master_seed if stream is not None else -1,
        trajectory_index=stream.trajectory_index if stream is not None else -1,
    )
    rec.meta["integrator"] = integrator
    return rec.validate(strict_eigen=(integrator != "ito"))


def _augmented_ctx(ctx, h_extra, t):
    """Shallow per-step context with an additive Hamiltonian term."""
    new = copy.copy(ctx)
    h = ctx.h_fun(t).data if ctx.h_fun is not None else ctx.h0
    new.h_fun = None
    new.h0 = h_extra if h is None else h + h_extra
    new.static = False       # disable the cached base matrix
    new._cache = None
    return new


def _scale_records(dy, ctx, dt):
    v = np.empty(ctx.n_channels)
    for i in range(ctx.n_channels):
        s = ctx.record_scale[i]
        v[i] = dy[i] / (s * dt) if s is not None else dy[i] / dt
    return v


def replay_trajectory(model: LindbladModel, record: TrajectoryRecord,
                      controller: Controller | None = None,
                      integrator: str = "auto",
                      thin: int = DEFAULT_THIN,
                      rho0: DensityMatrix | None = None) -> TrajectoryRecord:
    """Re-run a trajectory from its stored increments.

    With the same model, controller construction and options this is
    bit-identical to the original run, including controller_log.
    """
    if record.increments is None:
        raise ShapeError("record carries no increments to replay")
    duration = record.times[-1]
    dt = record.times[1] - record.times[0]
    out = simulate_trajectory(model, duration, dt, increments=record.increments,
                              controller=controller, integrator=integrator,
                              thin=thin, rho0=rho0)
    out.master_seed = record.master_seed
    out.trajectory_index = record.trajectory_index
    return out


# ---------------------------------------------------------------------------
# ensembles

#: trajectories per batch in ensemble runs; fixed so regrouping across
#: worker counts can never change the arithmetic
ENSEMBLE_CHUNK = 256


def simulate_ensemble(model: LindbladModel, duration: float, dt: float,
                      master_seed: int, n_trajectories: int,
                      rho0: DensityMatrix,
                      jobs: int = 1,
                      integrator: str = "kraus",
                      thin: int = DEFAULT_THIN,
                      store_states: bool = True,
                      store_records: bool = True,
                      first_index: int = 0) -> list[TrajectoryRecord]:
    """Run n trajectories with per-trajectory streams (master_seed, i).

    Trajectories are integrated in fixed-size batches; ``jobs`` only
    controls how many batches run concurrently, so results are identical
    for any worker count.
    """
    ctx = _StepContext(model)
    if not ctx.n_channels:
        raise ShapeError("ensemble runs need at least one monitored channel")
    n_steps = int(round(duration / dt))
    if n_steps <= 0 or n_steps > _MAX_STEPS:
        raise ShapeError("bad step count")
    idx = _state_indices(n_steps, thin)
    times = np.arange(n_steps + 1) * dt

    starts = list(range(0, n_trajectories, ENSEMBLE_CHUNK))

    def run_chunk(start):
        count = min(ENSEMBLE_CHUNK, n_trajectories - start)
        dws = np.empty((count, n_steps, ctx.n_channels))
        for j in range(count):
            stream = WienerStream(master_seed, first_index + start + j)
            dws[j] = stream.increment_block(n_steps, ctx.n_channels, dt)
        rho = np.broadcast_to(rho0.data, (count,) + rho0.data.shape).copy()
        states = (np.empty((len(idx), count) + rho0.data.shape, dtype=complex)
                  if store_states else None)
        if store_states:
            states[0] = rho
        recs = np.empty((count, n_steps, ctx.n_channels)) if store_records else None
        s_next = 1
        for k in range(n_steps):
            try:
                if integrator == "kraus":
                    rho, dy, _ = _kraus_step(rho, dws[:, k], dt, ctx, times[k])
                else:
                    rho, dy, defects = _ito_step(rho, dws[:, k], dt, ctx, times[k])
                    worst = int(np.argmax(defects))
                    if not (defects[worst] <= _TRACE_DEFECT_LIMIT):
                        raise IntegrationUnstableError(
                            f"trace defect {defects[worst]:.3g}",
                            step_index=k,
                            trajectory_index=first_index + start + worst)
            except IntegrationUnstableError as exc:
                if exc.step_index is None:
                    exc.step_index = k
                raise
            except UnderflowError as exc:
                raise UnderflowError(
                    f"{exc} (step {k}, trajectories {first_index + start}..)"
                ) from exc
            if store_records:
                for i in range(ctx.n_channels):
                    s = ctx.record_scale[i]
                    scale = (s * dt) if s is not None else dt
                    recs[:, k, i] = dy[:, i] / scale
            if store_states and s_next < len(idx) and k + 1 == idx[s_next]:
                states[s_next] = rho
                s_next += 1
        return states, recs, dws

    if jobs > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            chunks = list(pool.map(run_chunk, starts))
    else:
        chunks = [run_chunk(s) for s in starts]

    records = []
    for start, (states, recs, dws) in zip(starts, chunks):
        count = dws.shape[0]
        for j in range(count):
            rec = TrajectoryRecord(
                space=ctx.space,
                times=times,
                state_times=times[idx],
                states_data=states[:, j].copy() if states is not None else None,
                records=recs[j].copy() if recs is not None else None,
                increments=dws[j],
                controller_log=(),
                master_seed=master_seed,
                trajectory_index=first_index + start + j,
            )
            rec.meta["integrator"] = integrator
            records.append(rec.validate(strict_eigen=(integrator != "ito")))
    return records


def ensemble_average(records: Sequence[TrajectoryRecord]):
    """Pointwise mean of stored states over an ensemble.

    Returns (state_times, [DensityMatrix]).  All records must share the
    same state grid.
    """
    if not records:
        raise ShapeError("ensemble_average needs at least one record")
    t0 = records[0].state_times
    for r in records[1:]:
        if len(r.state_times) != len(t0) or np.any(r.state_times != t0):
            raise ShapeError("records have misaligned state grids")
    if records[0].states_data is None:
        raise ShapeError("records carry no stored states")
    d = records[0].space.dim
    acc = np.zeros((len(t0), d, d), dtype=complex)
    for r in records:
        if r.pure:
            acc += np.einsum("si,sj->sij", r.states_data, r.states_data.conj())
        else:
            acc += r.states_data
    acc /= len(records)
    space = records[0].space
    return t0, [DensityMatrix(space, a) for a in acc]


# ---------------------------------------------------------------------------
# exact propagation of static models (used by the cavity protocols)

def liouvillian_matrix(model: LindbladModel) -> np.ndarray:
    """Dense superoperator of a static model, acting on row-major vec(rho)."""
    if not model.is_static():
        raise ShapeError("liouvillian_matrix needs a time-independent model")
    d = model.space().dim
    eye = np.eye(d)
    L = np.zeros((d * d, d * d), dtype=complex)
    h = model.H.data if model.H is not None else None
    if h is not None:
        L += -1j * (np.kron(h, eye) - np.kron(eye, h.T))
    ops = [ch.c.data for ch in model.channels] + [u.data for u in model.unmonitored]
    for c in ops:
        cc = c.conj().T @ c
        L += np.kron(c, c.conj())
        L -= 0.5 * (np.kron(cc, eye) + np.kron(eye, cc.T))
    return L


def lindblad_propagate(model: LindbladModel, rho0: DensityMatrix,
                       times) -> list[DensityMatrix]:
    """Evolve a static model exactly through matrix-exponential propagators.

    times must be nondecreasing and start at >= 0; the state at each time
    is returned.  Propagators for repeated intervals are cached, so a
    uniform grid costs a single expm.
    """
    times = np.asarray(times, dtype=float)
    if times.ndim != 1 or len(times) == 0 or np.any(np.diff(times) < 0) or times[0] < 0:
        raise ShapeError("times must be a nondecreasing 1-d array from t >= 0")
    L = liouvillian_matrix(model)
    d = model.space().dim
    cache: dict[float, np.ndarray] = {}

    def prop(delta):
        key = round(float(delta), 15)
        if key not in cache:
            cache[key] = _expm(L * delta)
        return cache[key]

    out = []
    vec = rho0.data.reshape(-1)
    t_prev = 0.0
    for t in times:
        if t > t_prev:
            vec = prop(t - t_prev) @ vec
            t_prev = t
        rho = vec.reshape(d, d)
        rho = 0.5 * (rho + rho.conj().T)
        rho = rho / np.real(np.trace(rho))
        out.append(DensityMatrix(model.space(), rho))
    return out
