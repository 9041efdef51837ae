"""Measurement-based feedback laws and complete control protocols.

Builds on the trajectory machinery in `sme`: a FeedbackLaw bundles control
Hamiltonians with record-proportional gains, `apply_feedback` conjugates a
state by the resulting control unitary after each measurement update, and
`fme_step` integrates the deterministic feedback master equation that this
composition averages to.  On top of these sit the full protocols: stabilized
Rabi oscillations, deterministic half-parity entanglement, adaptive phase
measurement of a single photon, Zeno dragging and blockade, and
dissipative Kerr-cat stabilization.

Conventions follow the rest of the package: hbar = 1, rates in rad/us,
times in us, qubit basis ordered (|e>, |g>).
"""

from __future__ import annotations

import math
import warnings
from collections import deque
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .errors import (
    GainError,
    IntegrationUnstableError,
    RegimeWarning,
    ShapeError,
    StepSizeError,
    TruncationError,
)
from .hilbert import (
    DensityMatrix,
    Operator,
    PureState,
    SpaceShape,
    annihilation,
    basis_state,
    coherent_state,
    partial_trace,
    pauli,
)
from .models import (
    KerrCatParams,
    adiabatic_elimination,
    half_parity_operator,
    kerr_cat_hamiltonian,
    qubit_axis_operator,
)
from .sme import (
    ControlStep,
    Controller,
    LindbladModel,
    MeasurementChannel,
    TrajectoryRecord,
    WienerStream,
    _TRACE_DEFECT_LIMIT,
    _StepContext,
    _ito_step,
    _lindblad_rhs,
    _state_indices,
    lindblad_propagate,
    simulate_trajectory,
)

__all__ = [
    "FeedbackLaw",
    "ControllerState",
    "ZenoDragConfig",
    "HalfParityLaw",
    "EvolutionResult",
    "AdaptivePhaseResult",
    "fme_step",
    "apply_feedback",
    "feedback_ensemble_mean",
    "half_parity_feedback_controller",
    "analytic_half_parity_state",
    "half_parity_protocol",
    "rabi_correction",
    "RabiStabilizer",
    "rabi_ensemble",
    "oscillation_amplitude",
    "AdaptivePhaseReceiver",
    "adaptive_phase_model",
    "adaptive_phase_ensemble",
    "zeno_drag",
    "zeno_escape_times",
    "survival_fractions",
    "pointer_state",
    "zeno_blockade",
    "kerr_cat_stabilization",
    "kerr_dark_alpha",
    "cat_subspace_weight",
]

_SIGMA_Y = pauli("y").data
_SIGMA_Z = pauli("z").data
_SIGMA_X = pauli("x").data
_SIGMA_MINUS = pauli("minus").data
_HERM_TOL = 1e-9


# ---------------------------------------------------------------------------
# feedback law and controller state

@dataclass
class FeedbackLaw:
    """Proportional feedback law: control Hamiltonians with their gains.

    hamiltonians holds the H_j; b the deterministic drive gains B_j
    (rad/us); a the record gains A_ij with one row per monitored channel i
    and one column per Hamiltonian j (rad/us per unit dW).  Within each
    step the control strength is u_j = B_j dt + sum_i A_ij dW_i.
    """

    hamiltonians: Sequence[Operator]
    b: np.ndarray | Sequence[float] | None = None
    a: np.ndarray | Sequence[Sequence[float]] | None = None

    def __post_init__(self):
        hams = tuple(self.hamiltonians)
        if not hams:
            raise ShapeError("a feedback law needs at least one Hamiltonian")
        dims = hams[0].shape.dims
        for h in hams:
            if h.shape.dims != dims:
                raise ShapeError("feedback Hamiltonians on different spaces")
            if np.max(np.abs(h.data - h.data.conj().T)) > _HERM_TOL:
                raise ShapeError("feedback Hamiltonian is not Hermitian")
        self.hamiltonians = hams
        n = len(hams)
        b = np.zeros(n) if self.b is None else np.asarray(self.b, dtype=float)
        if b.shape != (n,):
            raise ShapeError(f"b must have shape ({n},), got {b.shape}")
        self.b = b
        a = np.zeros((0, n)) if self.a is None else np.asarray(self.a, dtype=float)
        if a.ndim != 2 or a.shape[1] != n:
            raise ShapeError(
                f"a must have one column per Hamiltonian ({n}), got shape {a.shape}"
            )
        self.a = a

    @property
    def n_channels(self) -> int:
        return self.a.shape[0]

    @property
    def space(self) -> SpaceShape:
        return self.hamiltonians[0].shape


@dataclass
class ControllerState:
    """Estimator state shared by the protocol controllers.

    The actuation buffer models loop delay as a FIFO of pending commands;
    its length round(delay/dt) is fixed when the state is created and
    never changes during a run.
    """

    theta: float = 0.0
    integrated: float = 0.0
    buffer: deque = field(default_factory=deque)

    @classmethod
    def with_delay(cls, delay_steps: int, fill: float = 0.0) -> "ControllerState":
        if delay_steps < 0:
            raise ShapeError("delay must be a nonnegative number of steps")
        return cls(buffer=deque([fill] * delay_steps))

    def actuate(self, command: float) -> float:
        """Push a command through the delay line, returning the one due now."""
        if not self.buffer:
            return command
        self.buffer.append(command)
        return self.buffer.popleft()


class HalfParityLaw(NamedTuple):
    law: FeedbackLaw
    gain: float
    singular: bool


class EvolutionResult(NamedTuple):
    times: np.ndarray
    states: list


class AdaptivePhaseResult(NamedTuple):
    estimates: np.ndarray
    slope: float | None
    slope_se: float | None


# ---------------------------------------------------------------------------
# feedback master equation and per-step conjugation

def _law_stack(law: FeedbackLaw):
    h = np.stack([op.data for op in law.hamiltonians])
    return h, law.b, law.a


def _opnorm(x) -> float:
    return float(np.linalg.norm(x, 2))


def _feedback_rate(law: FeedbackLaw, cs, eta) -> float:
    """Largest rate scale contributed by the feedback terms."""
    h, b, a = _law_stack(law)
    hnorm = np.array([_opnorm(x) for x in h])
    rate = float(np.abs(b) @ hnorm)
    for i in range(a.shape[0]):
        htn = _opnorm(np.einsum("j,jab->ab", a[i], h))
        rate += htn * htn + 2.0 * math.sqrt(eta[i]) * htn * _opnorm(cs[i])
    return rate


def fme_step(model: LindbladModel, law: FeedbackLaw, rho: DensityMatrix,
             dt: float, t: float = 0.0) -> DensityMatrix:
    """One deterministic step of the feedback master equation.

    The generator combines the model's full Lindblad part with the drive
    commutators -i B_j [H_j, rho], the information terms
    -i sqrt(eta_i) [Htil_i, M_i rho + rho M_i^dag - <M_i + M_i^dag> rho],
    and the feedback-noise dissipators D[Htil_i] rho, where
    Htil_i = sum_j A_ij H_j and M_i is the phase-adjusted channel operator.
    The heating term D[Htil_i] survives at eta = 0.  Integrated with
    classical RK4; the trace-subtracted term makes the generator nonlinear
    in rho, which RK4 handles like any autonomous ODE.
    """
    ctx = _StepContext(model)
    if law.space.dims != rho.shape.dims:
        raise ShapeError("feedback law and state live on different spaces")
    if law.n_channels != ctx.n_channels:
        raise ShapeError(
            f"law has {law.n_channels} channel rows, model has {ctx.n_channels}"
        )
    h, cs, c2, cdagc, base = ctx.at(t, dt)
    hstack, b, a = _law_stack(law)
    rate = model.max_rate() + _feedback_rate(law, cs, ctx.eta)
    if dt * rate > 0.05:
        raise StepSizeError(
            f"dt*rate = {dt * rate:.3g} exceeds 0.05; reduce dt below {0.05 / rate:.3g}"
        )

    n_laws = hstack.shape[0]
    htil = [np.einsum("j,jab->ab", a[i], hstack) for i in range(ctx.n_channels)]
    active = [np.linalg.norm(x) > 0.0 for x in htil]
    htil2 = [x @ x if act else None for x, act in zip(htil, active)]
    phases = np.exp(1j * ctx.phi)
    sqrt_eta = np.sqrt(ctx.eta)

    def rhs(r):
        out = _lindblad_rhs(r[None], h, cs, cdagc, ctx.unmon)[0]
        for j in range(n_laws):
            if b[j] != 0.0:
                hj = hstack[j]
                out += -1j * b[j] * (hj @ r - r @ hj)
        for i in range(ctx.n_channels):
            if not active[i]:
                continue
            ht = htil[i]
            if sqrt_eta[i] > 0.0:
                mr = (phases[i] * cs[i]) @ r
                p = mr + mr.conj().T
                p = p - np.trace(p).real * r
                out += -1j * sqrt_eta[i] * (ht @ p - p @ ht)
            out += ht @ r @ ht - 0.5 * (htil2[i] @ r + r @ htil2[i])
        return out

    r0 = rho.data
    k1 = rhs(r0)
    k2 = rhs(r0 + 0.5 * dt * k1)
    k3 = rhs(r0 + 0.5 * dt * k2)
    k4 = rhs(r0 + dt * k3)
    out = r0 + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    out = 0.5 * (out + out.conj().T)
    out /= np.trace(out).real
    return DensityMatrix._trusted(rho.shape, out)


def apply_feedback(rho: DensityMatrix, law: FeedbackLaw, dw,
                   dt: float) -> DensityMatrix:
    """Conjugate the state by the step's control unitary.

    u_j = B_j dt + sum_i A_ij dW_i and the state is rotated by the exact
    exponential exp(-i sum_j u_j H_j); called strictly after the
    measurement update of the same step.
    """
    hstack, b, a = _law_stack(law)
    if law.space.dims != rho.shape.dims:
        raise ShapeError("feedback law and state live on different spaces")
    dw = np.atleast_1d(np.asarray(dw, dtype=float))
    if dw.shape != (a.shape[0],):
        raise ShapeError(f"expected {a.shape[0]} increments, got {dw.shape}")
    u = b * dt + dw @ a
    g = np.einsum("j,jab->ab", u, hstack)
    w, v = np.linalg.eigh(g)
    un = (v * np.exp(-1j * w)) @ v.conj().T
    out = un @ rho.data @ un.conj().T
    out = 0.5 * (out + out.conj().T)
    return DensityMatrix._trusted(rho.shape, out)


def feedback_ensemble_mean(model: LindbladModel, law: FeedbackLaw,
                           duration: float, dt: float, master_seed: int,
                           n_trajectories: int,
                           rho0: DensityMatrix) -> tuple[np.ndarray, np.ndarray]:
    """Ensemble mean of composed {Ito measurement step + feedback unitary}.

    Runs n_trajectories Euler-Maruyama trajectories (per-trajectory
    WienerStream noise) with the law's control unitary applied after each
    measurement update, and returns (times, mean state stack).  Averaging
    this composition reproduces the feedback master equation, which is the
    Monte Carlo check behind fme_step.
    """
    ctx = _StepContext(model)
    if law.n_channels != ctx.n_channels:
        raise ShapeError("law channel rows do not match the model")
    n_steps = int(round(duration / dt))
    if n_steps <= 0:
        raise ShapeError("duration must cover at least one step")
    hstack, b, a = _law_stack(law)
    dws = np.empty((n_trajectories, n_steps, ctx.n_channels))
    for j in range(n_trajectories):
        dws[j] = WienerStream(master_seed, j).increment_block(
            n_steps, ctx.n_channels, dt)

    rho = np.broadcast_to(rho0.data, (n_trajectories,) + rho0.data.shape).copy()
    times = np.arange(n_steps + 1) * dt
    means = np.empty((n_steps + 1,) + rho0.data.shape, dtype=complex)
    means[0] = rho0.data
    bdt = b * dt
    for k in range(n_steps):
        dwk = dws[:, k, :]
        rho, _, defects = _ito_step(rho, dwk, dt, ctx, times[k])
        bad = ~(defects <= _TRACE_DEFECT_LIMIT)
        if np.any(bad):
            j = int(np.argmax(bad))
            raise IntegrationUnstableError(
                f"trace defect {defects[j]:.3g} at step {k}",
                step_index=k, trajectory_index=j)
        u = dwk @ a + bdt
        g = np.einsum("nj,jab->nab", u, hstack)
        w, v = np.linalg.eigh(g)
        un = (v * np.exp(-1j * w)[:, None, :]) @ v.conj().transpose(0, 2, 1)
        rho = un @ rho @ un.conj().transpose(0, 2, 1)
        rho = 0.5 * (rho + rho.conj().transpose(0, 2, 1))
        means[k + 1] = rho.mean(axis=0)
    return times, means


# ---------------------------------------------------------------------------
# half-parity entanglement by feedback

_TWO_QUBITS = SpaceShape((2, 2))
_PHI_PLUS = np.array([1.0, 0.0, 0.0, 1.0], dtype=complex) / math.sqrt(2.0)
_PSI_PLUS = np.array([0.0, 1.0, 1.0, 0.0], dtype=complex) / math.sqrt(2.0)


def _half_parity_generator() -> np.ndarray:
    """(sigma_y (x) I + I (x) sigma_y) / 2."""
    return 0.5 * (np.kron(_SIGMA_Y, np.eye(2)) + np.kron(np.eye(2), _SIGMA_Y))


def analytic_half_parity_state(gamma: float, t: float) -> PureState:
    """Closed-form trajectory of the half-parity feedback protocol.

    |psi(t)> = (e^{-Gamma t/4} |phi+> + sqrt(2 - e^{-Gamma t/2}) |psi+>)/sqrt(2),
    which starts at the uniform superposition and settles on |psi+>.
    The norm is exactly 1 for all t.
    """
    if gamma <= 0.0:
        raise ShapeError("gamma must be positive")
    if t < 0.0:
        raise ShapeError("t must be nonnegative")
    amp = (math.exp(-gamma * t / 4.0) * _PHI_PLUS
           + math.sqrt(2.0 - math.exp(-gamma * t / 2.0)) * _PSI_PLUS)
    return PureState(_TWO_QUBITS, amp / math.sqrt(2.0))


def half_parity_feedback_controller(state, gamma: float,
                                    eta: float = 1.0) -> HalfParityLaw:
    """Per-step proportional gain for the half-parity protocol.

    The feedback Hamiltonian is fixed to F = (sigma_y,1 + sigma_y,2)/2; the
    gain A(rho) solves the one-dimensional least-squares problem that
    zeroes the net dW coefficient of the composed measure-then-rotate
    step: minimize over A the norm of sqrt(eta) H[M] rho - i A [F, rho].
    When the state is orthogonal to the feedback direction ([F, rho] = 0)
    the equation is singular and A = 0 is returned with the flag set.
    """
    if isinstance(state, PureState):
        rho = np.outer(state.amplitudes, state.amplitudes.conj())
    else:
        rho = state.data
    if rho.shape != (4, 4):
        raise ShapeError("half-parity feedback needs a two-qubit state")
    m = half_parity_operator(gamma).data
    f = _half_parity_generator()
    mr = m @ rho
    s = mr + mr.conj().T
    s = math.sqrt(eta) * (s - np.trace(s).real * rho)
    g = -1j * (f @ rho - rho @ f)
    den = np.sum(np.abs(g) ** 2).real
    if den <= 1e-12:
        law = FeedbackLaw([Operator(_TWO_QUBITS, f)], b=[0.0], a=[[0.0]])
        return HalfParityLaw(law, 0.0, True)
    gain = -float(np.sum(g.conj() * s).real) / den
    law = FeedbackLaw([Operator(_TWO_QUBITS, f)], b=[0.0], a=[[gain]])
    return HalfParityLaw(law, gain, False)


def half_parity_protocol(gamma: float, duration: float, dt: float,
                         master_seed: int = 0, trajectory_index: int = 0,
                         thin: int = 10) -> TrajectoryRecord:
    """Run the deterministic entangling protocol at unit efficiency.

    Each step measures the half-parity operator M and applies the control
    rotation exp(-i A F dW) with A chosen so the two dW contributions
    cancel: (M - <M>)|psi> = i A F |psi>.  With the cancellation enforced
    the composed increment is the deterministic drift
    d|psi> = [-(M-<M>)^2/2 - i A F (M-<M>) - A^2 F^2 / 2] |psi> dt,
    integrated here with RK4; discretizing the two updates separately
    would leave an O(dt^{3/2}) seed-dependent residue instead of the
    protocol's exact record independence.  The Wiener increments are still
    drawn and reported: the measurement record remains stochastic even
    though the state path does not.
    """
    if gamma <= 0.0:
        raise ShapeError("gamma must be positive")
    n_steps = int(round(duration / dt))
    if n_steps <= 0:
        raise ShapeError("duration must cover at least one step")
    m = half_parity_operator(gamma).data
    f = _half_parity_generator()
    f2 = f @ f

    def gain_of(psi):
        e = np.vdot(psi, m @ psi).real
        x = m @ psi - e * psi
        fv = f @ psi
        den = np.vdot(fv, fv).real
        if den <= 1e-12:
            return 0.0, True, e
        return float(np.vdot(fv, x).imag) / den, False, e

    def drift(psi):
        a, _, e = gain_of(psi)
        x = m @ psi - e * psi
        out = -0.5 * (m @ x - e * x)
        out += -1j * a * (f @ x)
        out += -0.5 * a * a * (f2 @ psi)
        return out

    stream = WienerStream(master_seed, trajectory_index)
    dws = stream.increment_block(n_steps, 1, dt)
    psi = np.full(4, 0.5, dtype=complex)
    times = np.arange(n_steps + 1) * dt
    sidx = _state_indices(n_steps, thin)
    states = np.empty((len(sidx), 4), dtype=complex)
    states[0] = psi
    records = np.empty((n_steps, 1))
    logs = []
    s_next = 1
    for k in range(n_steps):
        a0, singular, e0 = gain_of(psi)
        logs.append((a0,))
        dy = 2.0 * e0 * dt + dws[k, 0]
        records[k, 0] = dy / dt
        k1 = drift(psi)
        k2 = drift(psi + 0.5 * dt * k1)
        k3 = drift(psi + 0.5 * dt * k2)
        k4 = drift(psi + dt * k3)
        psi = psi + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        psi = psi / np.linalg.norm(psi)
        if s_next < len(sidx) and k + 1 == sidx[s_next]:
            states[s_next] = psi
            s_next += 1
    rec = TrajectoryRecord(
        space=_TWO_QUBITS,
        times=times,
        state_times=times[sidx],
        states_data=states,
        records=records,
        increments=dws,
        controller_log=tuple(logs),
        master_seed=master_seed,
        trajectory_index=trajectory_index,
        pure=True,
    )
    rec.meta["protocol"] = "half_parity"
    rec.meta["gamma"] = gamma
    return rec.validate()


# ---------------------------------------------------------------------------
# Rabi stabilization

def rabi_correction(values, times, omega_r: float, gain: float) -> float:
    """Drive amplitude correction from a window of record samples.

    S = (2/W) sum_k V_k sin(Omega_R t_k) estimates the sine quadrature of
    the tracked oscillation; the returned correction is
    dOmega = -gain * Omega_R * S.  Gains outside [0, 2] destabilize the
    loop and are rejected.
    """
    if not (0.0 <= gain <= 2.0):
        raise GainError(f"gain {gain} outside the stable range [0, 2]")
    values = np.asarray(values, dtype=float)
    times = np.asarray(times, dtype=float)
    if values.shape != times.shape:
        raise ShapeError("record window and time window differ in length")
    if values.size == 0:
        return 0.0
    s = 2.0 * float(np.mean(values * np.sin(omega_r * times)))
    return -gain * omega_r * s


class RabiStabilizer(Controller):
    """Sliding-window demodulating controller for driven Rabi oscillations.

    Keeps the most recent window (default one Rabi period) of record
    samples, demodulates them against sin(Omega_R t), and retunes the
    sigma_y drive by dOmega = -gain * Omega_R * S each step.  The hooks
    are deterministic functions of the stored record history, so replaying
    a trajectory reproduces the controller log bit for bit.
    """

    def __init__(self, omega_r: float, gain: float, dt: float,
                 window: float | None = None):
        if not (0.0 <= gain <= 2.0):
            raise GainError(f"gain {gain} outside the stable range [0, 2]")
        if omega_r <= 0.0 or dt <= 0.0:
            raise ShapeError("omega_r and dt must be positive")
        self.omega_r = omega_r
        self.gain = gain
        self.dt = dt
        span = 2.0 * math.pi / omega_r if window is None else window
        steps = max(1, int(round(span / dt)))
        self._v = deque(maxlen=steps)
        self._t = deque(maxlen=steps)

    def control(self, step, t, rho):
        if self._v:
            d_omega = rabi_correction(np.array(self._v), np.array(self._t),
                                      self.omega_r, self.gain)
        else:
            d_omega = 0.0
        return ControlStep(h_extra=0.5 * d_omega * _SIGMA_Y, log=(d_omega,))

    def observe(self, step, t, rho, v):
        # sample is tagged with the step's start time, the demod reference
        self._t.append(t - self.dt)
        self._v.append(float(v[0]))


def rabi_ensemble(omega_r: float, gamma_d: float, eta: float, gain: float,
                  duration: float, dt: float, master_seed: int,
                  n_trajectories: int, feedback: bool = True,
                  window: float | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Ensemble mean <sigma_z>(t) for the stabilized Rabi experiment.

    The qubit starts in |g>, is driven by (Omega_R/2) sigma_y, and is
    monitored along sigma_z at strength Gamma_D with efficiency eta; with
    feedback enabled every trajectory runs its own demodulating controller
    (the batched arithmetic mirrors RabiStabilizer on the Kraus
    integrator).  Returns (times, mean sigma_z).
    """
    if not (0.0 <= gain <= 2.0):
        raise GainError(f"gain {gain} outside the stable range [0, 2]")
    if eta <= 0.0 or eta > 1.0:
        raise ShapeError("eta must lie in (0, 1] for a usable record")
    n_steps = int(round(duration / dt))
    if n_steps <= 0:
        raise ShapeError("duration must cover at least one step")
    w_steps = max(1, int(round((2.0 * math.pi / omega_r if window is None
                                else window) / dt)))
    n = n_trajectories
    dws = np.empty((n, n_steps))
    for j in range(n):
        dws[j] = WienerStream(master_seed, j).increment_block(n_steps, 1, dt)[:, 0]

    beta = math.sqrt(gamma_d / 2.0)
    scale = math.sqrt(2.0 * eta * gamma_d)
    sy = _SIGMA_Y
    sz = _SIGMA_Z
    eye = np.eye(2, dtype=complex)
    base0 = (1.0 - 0.25 * gamma_d * dt) * eye - 0.5j * dt * omega_r * sy
    czz = 0.5 * gamma_d   # c^2 and c^dag c are both (Gamma_D/2) I

    rho = np.zeros((n, 2, 2), dtype=complex)
    rho[:, 1, 1] = 1.0
    zbar = np.empty(n_steps + 1)
    zbar[0] = -1.0
    window_prod = np.zeros((n, w_steps))
    wsum = np.zeros(n)
    wpos = 0
    wfill = 0
    sqrt_eta = math.sqrt(eta)
    for k in range(n_steps):
        if feedback and wfill > 0:
            s_est = 2.0 * wsum / wfill
            d_omega = -gain * omega_r * s_est
        else:
            d_omega = np.zeros(n)
        z = np.real(rho[:, 0, 0] - rho[:, 1, 1])
        dy = sqrt_eta * math.sqrt(2.0 * gamma_d) * z * dt + dws[:, k]
        coef1 = sqrt_eta * dy * beta
        coef2 = 0.5 * eta * (dy * dy - dt) * czz
        m = np.broadcast_to(base0, (n, 2, 2)).copy()
        m -= (0.5j * dt * d_omega)[:, None, None] * sy
        m += coef1[:, None, None] * sz
        m += coef2[:, None, None] * eye
        out = m @ rho @ m.conj().transpose(0, 2, 1)
        if eta < 1.0:
            out += ((1.0 - eta) * dt * czz) * (sz @ rho @ sz)
        tr = np.real(np.einsum("nii->n", out))
        out /= tr[:, None, None]
        rho = 0.5 * (out + out.conj().transpose(0, 2, 1))
        zbar[k + 1] = np.mean(np.real(rho[:, 0, 0] - rho[:, 1, 1]))
        v = dy / (scale * dt)
        prod = v * math.sin(omega_r * k * dt)
        wsum += prod - window_prod[:, wpos]
        window_prod[:, wpos] = prod
        wpos = (wpos + 1) % w_steps
        wfill = min(wfill + 1, w_steps)
    return np.arange(n_steps + 1) * dt, zbar


def oscillation_amplitude(times, signal, omega: float,
                          t_start: float, t_end: float) -> float:
    """Quadrature amplitude of a signal demodulated at omega over a window."""
    times = np.asarray(times, dtype=float)
    signal = np.asarray(signal, dtype=float)
    mask = (times >= t_start) & (times <= t_end)
    if not np.any(mask):
        raise ShapeError("demodulation window contains no samples")
    tt = times[mask]
    ss = signal[mask]
    c = 2.0 * np.mean(ss * np.cos(omega * tt))
    s = 2.0 * np.mean(ss * np.sin(omega * tt))
    return float(np.hypot(c, s))


# ---------------------------------------------------------------------------
# adaptive phase measurement of a single photon

def _flat_mode_rate(t: float, duration: float, cap: float) -> float:
    """Decay rate shaping a flat emission profile, capped near the end."""
    rem = duration - t
    if rem <= 1.0 / cap:
        return cap
    return 1.0 / rem


def adaptive_phase_model(duration: float, eta: float,
                         cap_factor: float = 200.0) -> LindbladModel:
    """Two-level source emitting one photon in a flat mode of length T.

    The photon-or-vacuum superposition maps onto the qubit (|1> = |e>)
    with a time-dependent emission rate gamma(t) = 1/(T - t), capped at
    cap_factor/T so the final steps stay integrable; the cap strands a
    residual excitation of order e/cap_factor.
    """
    if duration <= 0.0:
        raise ShapeError("duration must be positive")
    cap = cap_factor / duration
    shape = SpaceShape((2,))

    def cfun(t):
        g = _flat_mode_rate(t, duration, cap)
        return Operator(shape, math.sqrt(g) * _SIGMA_MINUS)

    return LindbladModel(H=None,
                         channels=[MeasurementChannel(c=cfun, eta=eta, phi=0.0)])


class AdaptivePhaseReceiver(Controller):
    """Controller maintaining the canonical phase condition phi = theta + pi/2.

    Runs its own conditional filter from the unpolarized prior
    diag(1/2, 1/2); theta(t) is the argument of the filter's coherence
    <e|rho|g> and the commanded pump phase phi = theta + pi/2 (phi = 0
    before any record).  The channel convention measures the quadrature
    at minus the channel phase, so the command enters as -phi.  Loop delay
    is a FIFO of whole steps.
    """

    def __init__(self, duration: float, dt: float, eta: float,
                 delay_steps: int = 0, cap_factor: float = 200.0,
                 heterodyne: bool = False):
        self.duration = duration
        self.dt = dt
        self.eta = eta
        self.cap = cap_factor / duration
        self.heterodyne = heterodyne
        self.state = ControllerState.with_delay(delay_steps)
        self.filter = np.diag([0.5, 0.5]).astype(complex)
        self._applied = 0.0

    @property
    def theta(self) -> float:
        return float(np.angle(self.filter[0, 1]))

    def control(self, step, t, rho):
        if self.heterodyne:
            phi = 0.0 if step % 2 == 0 else 0.5 * math.pi
        elif step == 0:
            phi = 0.0
        else:
            phi = self.theta + 0.5 * math.pi
        self._applied = self.state.actuate(-phi)
        return ControlStep(phases=[self._applied], log=(phi,))

    def observe(self, step, t, rho, v):
        dt = self.dt
        dy = float(v[0]) * dt
        g = _flat_mode_rate(t - dt, self.duration, self.cap)
        ph = np.exp(1j * self._applied)
        m = np.eye(2, dtype=complex)
        m[0, 0] -= 0.5 * g * dt
        m += (math.sqrt(self.eta * g) * dy * ph) * _SIGMA_MINUS
        out = m @ self.filter @ m.conj().T
        if self.eta < 1.0:
            jump = _SIGMA_MINUS @ self.filter @ _SIGMA_MINUS.conj().T
            out += (1.0 - self.eta) * g * dt * jump
        out /= np.trace(out).real
        self.filter = 0.5 * (out + out.conj().T)


def adaptive_phase_ensemble(theta_true: float, duration: float, dt: float,
                            eta: float, master_seed: int, n_runs: int,
                            delay_steps: int = 0, heterodyne: bool = False,
                            collect_regression: bool = False,
                            exact_condition: bool = False,
                            cap_factor: float = 200.0) -> AdaptivePhaseResult:
    """Batched adaptive (or fixed-pair heterodyne) phase measurement runs.

    Each run prepares (|g> + e^{i Theta}|e>)/sqrt(2), lets it emit through
    the flat-mode channel, and drives a per-run conditional filter with the
    shared record; the final estimate is the filter coherence phase.  With
    collect_regression=True the pooled regression slope of the record
    increments against the undetected amplitude quadrature is returned,
    normalized by the slope a directly amplitude-coupled record would have
    (sqrt(eta) dt); at the phase condition it vanishes.
    exact_condition=True enforces that condition from the true conditional
    state instead of the filter estimate, isolating the quadrature
    orthogonality from estimator lag.

    Noise comes from per-run WienerStream blocks, so run j reproduces the
    single-trajectory path of simulate_trajectory with
    WienerStream(master_seed, j) exactly, and adaptive/heterodyne runs at
    the same master_seed consume identical increments.
    """
    if eta <= 0.0 or eta > 1.0:
        raise ShapeError("eta must lie in (0, 1]")
    n_steps = int(round(duration / dt))
    if n_steps <= 0:
        raise ShapeError("duration must cover at least one step")
    cap = cap_factor / duration
    if cap * dt > 0.05:
        raise StepSizeError("dt too large for the capped emission rate")
    n = n_runs
    dws = np.empty((n, n_steps))
    for j in range(n):
        dws[j] = WienerStream(master_seed, j).increment_block(n_steps, 1, dt)[:, 0]
    amp = np.array([np.exp(1j * theta_true), 1.0], dtype=complex) / math.sqrt(2.0)
    rho_true = np.broadcast_to(np.outer(amp, amp.conj()), (n, 2, 2)).copy()
    rho_filt = np.broadcast_to(np.diag([0.5, 0.5]).astype(complex), (n, 2, 2)).copy()
    delay_buf = np.zeros((delay_steps, n)) if delay_steps > 0 else None
    dpos = 0
    sqrt_eta = math.sqrt(eta)
    # per-run regression sums; runs are the independent units, so the
    # slope error bar comes from clustering over them
    u_run = np.zeros(n)
    v_run = np.zeros(n)
    sm = _SIGMA_MINUS
    sp = sm.conj().T
    for k in range(n_steps):
        t = k * dt
        g = _flat_mode_rate(t, duration, cap)
        if heterodyne:
            phi = np.full(n, 0.0 if k % 2 == 0 else 0.5 * math.pi)
        elif exact_condition:
            phi = np.angle(rho_true[:, 0, 1]) + 0.5 * math.pi
        elif k == 0:
            phi = np.zeros(n)
        else:
            phi = np.angle(rho_filt[:, 0, 1]) + 0.5 * math.pi
        cmd = -phi
        if delay_buf is not None:
            applied = delay_buf[dpos].copy()
            delay_buf[dpos] = cmd
            dpos = (dpos + 1) % delay_steps
        else:
            applied = cmd
        ph = np.exp(1j * applied)
        sig = 2.0 * math.sqrt(g) * np.real(ph * rho_true[:, 0, 1])
        dy = sqrt_eta * sig * dt + dws[:, k]
        if collect_regression:
            x = 2.0 * math.sqrt(g) * np.real(np.exp(1j * (applied + 0.5 * math.pi))
                                             * rho_true[:, 0, 1])
            u_run += x * dy
            v_run += x * x
        m = np.broadcast_to(np.eye(2, dtype=complex), (n, 2, 2)).copy()
        m[:, 0, 0] -= 0.5 * g * dt
        m += (math.sqrt(eta * g) * dy * ph)[:, None, None] * sm
        mdag = m.conj().transpose(0, 2, 1)
        for rho in (rho_true, rho_filt):
            out = m @ rho @ mdag
            if eta < 1.0:
                out += ((1.0 - eta) * g * dt) * (sm @ rho @ sp)
            out /= np.real(np.einsum("nii->n", out))[:, None, None]
            rho[...] = 0.5 * (out + out.conj().transpose(0, 2, 1))
    estimates = np.angle(rho_filt[:, 0, 1])
    slope = slope_se = None
    if collect_regression:
        v_tot = float(v_run.sum())
        raw = float(u_run.sum()) / v_tot
        # cluster-robust over independent runs
        raw_se = math.sqrt(float(np.sum((u_run - raw * v_run) ** 2))) / v_tot
        slope = raw / (sqrt_eta * dt)
        slope_se = raw_se / (sqrt_eta * dt)
    return AdaptivePhaseResult(estimates, slope, slope_se)


# ---------------------------------------------------------------------------
# Zeno dragging

@dataclass
class ZenoDragConfig:
    """Rotating-axis measurement protocol parameters.

    The monitored operator is sigma_delta(t) = cos(nu t) sigma_x +
    sin(nu t) sigma_y at strength Gamma_D; only the equatorial xy plane
    is supported.
    """

    nu: float
    gamma_d: float
    eta: float = 1.0
    duration: float = 10.0
    plane: str = "xy"

    def __post_init__(self):
        if self.nu < 0.0:
            raise ShapeError("nu must be nonnegative")
        if self.gamma_d <= 0.0:
            raise ShapeError("gamma_d must be positive")
        if not (0.0 <= self.eta <= 1.0):
            raise ShapeError("eta must lie in [0, 1]")
        if self.duration <= 0.0:
            raise ShapeError("duration must be positive")
        if self.plane != "xy":
            raise ShapeError("only the xy measurement plane is supported")


def pointer_state(delta: float) -> PureState:
    """+1 eigenstate of sigma_delta: (|e> + e^{i delta}|g>)/sqrt(2)."""
    amp = np.array([1.0, np.exp(1j * delta)], dtype=complex) / math.sqrt(2.0)
    return PureState(SpaceShape((2,)), amp)


def _drag_regime_check(config: ZenoDragConfig):
    if config.nu > 0.0 and config.gamma_d / config.nu < 5.0:
        warnings.warn(
            f"Gamma_D/nu = {config.gamma_d / config.nu:.2f} below the adiabatic "
            "guard of 5; dragging is unreliable here", RegimeWarning,
            stacklevel=3)


def _drag_dt(config: ZenoDragConfig, dt: float | None) -> float:
    if dt is not None:
        return dt
    out = 0.02 / config.gamma_d
    if config.nu > 0.0:
        out = min(out, 0.01 / config.nu)
    return out


def zeno_drag(config: ZenoDragConfig, stream: WienerStream,
              dt: float | None = None, thin: int = 10):
    """One monitored trajectory under the rotating measurement axis.

    Starts in the delta = 0 pointer state and conditions on the record of
    sigma_delta(t), delta = nu t.  Returns (TrajectoryRecord, success)
    where success means the final overlap with the rotated pointer state
    is at least 1/2; the final overlap is stored in record.meta.
    """
    _drag_regime_check(config)
    dt = _drag_dt(config, dt)
    beta = math.sqrt(config.gamma_d / 2.0)
    shape = SpaceShape((2,))
    if config.nu == 0.0:
        channel = MeasurementChannel(
            c=Operator(shape, beta * _SIGMA_X), eta=config.eta, phi=0.0)
    else:
        nu = config.nu

        def cfun(t):
            return Operator(shape, beta * qubit_axis_operator(nu * t).data)

        channel = MeasurementChannel(c=cfun, eta=config.eta, phi=0.0)
    model = LindbladModel(H=None, channels=[channel])
    rho0 = pointer_state(0.0).to_density_matrix()
    rec = simulate_trajectory(model, config.duration, dt, stream=stream,
                              integrator="kraus", thin=thin, rho0=rho0)
    target = pointer_state(config.nu * config.duration).amplitudes
    overlap = float(np.real(target.conj() @ rec.states_data[-1] @ target))
    rec.meta["protocol"] = "zeno_drag"
    rec.meta["final_overlap"] = overlap
    return rec, overlap >= 0.5


def zeno_escape_times(config: ZenoDragConfig, master_seed: int,
                      n_trajectories: int, dt: float | None = None,
                      t_max: float | None = None) -> np.ndarray:
    """First times at which trajectories lose the dragged pointer state.

    Works in the frame co-rotating with the measurement axis, where the
    channel is a static sigma_x measurement and the rotation becomes the
    Hamiltonian -(nu/2) sigma_z; the frame change is exactly unitary, so
    escape statistics are unchanged.  A trajectory escapes when its
    overlap with the rotating pointer state first drops below 1/2; entries
    are NaN for trajectories that never escape within t_max.  Pure-state
    evolution requires eta = 1.  Noise comes from one counter-based
    stream keyed on master_seed, drawn per step across the whole batch.
    """
    if config.eta != 1.0:
        raise ShapeError("escape-time batch runs at eta = 1 only")
    _drag_regime_check(config)
    dt = _drag_dt(config, dt)
    t_max = config.duration if t_max is None else t_max
    n_steps = int(round(t_max / dt))
    if n_steps <= 0:
        raise ShapeError("t_max must cover at least one step")
    gen = np.random.Generator(np.random.Philox(key=(master_seed, 0)))
    n = n_trajectories
    ps_e = np.full(n, 1.0 / math.sqrt(2.0), dtype=complex)
    ps_g = np.full(n, 1.0 / math.sqrt(2.0), dtype=complex)
    beta = math.sqrt(config.gamma_d / 2.0)
    half_rate = 0.25 * config.gamma_d * dt
    czz = 0.5 * config.gamma_d
    bz = 0.5j * config.nu * dt
    sqrt_dt = math.sqrt(dt)
    escape = np.full(n, np.nan)
    alive = np.ones(n, dtype=bool)
    for k in range(n_steps):
        sig = 2.0 * np.real(np.conj(ps_e) * ps_g)
        dy = math.sqrt(2.0 * config.gamma_d) * sig * dt \
            + gen.standard_normal(n) * sqrt_dt
        a = 1.0 - half_rate + 0.5 * (dy * dy - dt) * czz
        fcoef = beta * dy
        new_e = (a + bz) * ps_e + fcoef * ps_g
        new_g = (a - bz) * ps_g + fcoef * ps_e
        nrm = np.sqrt(np.abs(new_e) ** 2 + np.abs(new_g) ** 2)
        ps_e = new_e / nrm
        ps_g = new_g / nrm
        overlap = 0.5 * np.abs(ps_e + ps_g) ** 2
        crossed = alive & (overlap < 0.5)
        if np.any(crossed):
            escape[crossed] = (k + 1) * dt
            alive &= ~crossed
    return escape


def survival_fractions(escape_times: np.ndarray, grid) -> np.ndarray:
    """Fraction of trajectories still dragged at each grid time."""
    escape_times = np.asarray(escape_times, dtype=float)
    grid = np.asarray(grid, dtype=float)
    esc = np.where(np.isnan(escape_times), np.inf, escape_times)
    return np.array([(esc > t).mean() for t in grid])


# ---------------------------------------------------------------------------
# Zeno blockade of a driven cavity

def zeno_blockade(n_blocked: int, omega_r: float, gamma: float, drive: float,
                  n_max: int, duration: float,
                  n_times: int = 41) -> EvolutionResult:
    """Driven cavity with a measurement blockade at one Fock level.

    In the number-split regime the qubit line conditioned on n = n_blocked
    can be driven resonantly without touching other levels, modeled here
    as the selective coupling (Omega_R/2) sigma_x (x) |N><N| together with
    qubit decay gamma and the cavity drive.  Returns the cavity reduced
    states on a uniform time grid.
    """
    if n_blocked < 1:
        raise ShapeError("the blocked level index must be at least 1")
    if n_max < n_blocked + 4:
        raise TruncationError(
            f"n_max = {n_max} below the guard {n_blocked + 4} for N = {n_blocked}")
    if omega_r < 0.0 or gamma < 0.0:
        raise ShapeError("omega_r and gamma must be nonnegative")
    if duration <= 0.0 or n_times < 2:
        raise ShapeError("need a positive duration and at least two times")
    if omega_r == 0.0:
        # free displacement grows as |alpha| = drive * t
        a_final = abs(drive) * duration
        need = a_final * a_final + 5.0 * a_final + 4.0
        if n_max < need:
            raise TruncationError(
                f"n_max = {n_max} cannot hold the driven coherent state "
                f"(needs >= {need:.1f})")
    nc = n_max + 1
    shape = SpaceShape((2, nc))
    ad = annihilation(n_max).data
    h_cav = drive * (ad + ad.conj().T)
    proj = np.zeros((nc, nc))
    proj[n_blocked, n_blocked] = 1.0
    h = np.kron(np.eye(2), h_cav) + 0.5 * omega_r * np.kron(_SIGMA_X, proj)
    decay = math.sqrt(gamma) * np.kron(_SIGMA_MINUS, np.eye(nc))
    model = LindbladModel(H=Operator(shape, h), channels=[],
                          unmonitored=[Operator(shape, decay)])
    rho0 = basis_state(shape, nc).to_density_matrix()   # |g, 0>
    times = np.linspace(0.0, duration, n_times)
    joint = lindblad_propagate(model, rho0, times)
    states = [partial_trace(s, keep=(1,)) for s in joint]
    for t, s in zip(times, states):
        tail = float(np.real(s.data[n_max, n_max] + s.data[n_max - 1, n_max - 1]))
        if tail > 1e-3:
            raise TruncationError(
                f"cavity weight {tail:.2e} at the truncation edge by t = {t:.3g}")
    return EvolutionResult(times, states)


# ---------------------------------------------------------------------------
# Kerr-cat stabilization

def kerr_dark_alpha(params: KerrCatParams, kappa2: float) -> complex:
    """Coherent amplitude left dark by the pumped two-photon dissipation.

    The Kerr-plus-pump Hamiltonian combined with D[a^2] leaves span{|a>,
    |-a>} invariant at a^2 = eps2 / (K + i kappa2/2): the a^dag^2
    components of the no-jump drift cancel there and a^2 jumps act as
    scalars.
    """
    return complex(np.sqrt(params.eps2 / (params.K + 0.5j * kappa2)))


def cat_subspace_weight(rho: DensityMatrix, alpha: complex) -> float:
    """Weight of a single-mode state inside span{|alpha>, |-alpha>}."""
    if len(rho.shape.dims) != 1:
        raise ShapeError("subspace weight is defined for a single mode")
    n_max = rho.shape.dim - 1
    v1 = coherent_state(alpha, n_max).amplitudes
    v2 = coherent_state(-alpha, n_max).amplitudes
    q, _ = np.linalg.qr(np.stack([v1, v2], axis=1))
    p = q @ q.conj().T
    return float(np.real(np.trace(p @ rho.data)))


def kerr_cat_stabilization(params: KerrCatParams, kappa1: float,
                           duration: float, kappa2: float | None = None,
                           n_max: int | None = None, n_times: int = 41,
                           rho0: DensityMatrix | None = None) -> EvolutionResult:
    """Dissipative formation of a cat state from vacuum.

    Evolves the Kerr-plus-two-photon-pump Hamiltonian with the engineered
    pair-loss dissipator sqrt(kappa2) a^2 and optional single-photon loss
    sqrt(kappa1) a.  kappa2 defaults to the adiabatically eliminated rate
    4|g2|^2/kappa_r of the params' buffer mode.  Pair processes preserve
    photon parity, so the even vacuum flows into the even cat on
    span{|alpha>, |-alpha>}; kappa1 > 0 decays the parity while the
    support stays in the manifold.
    """
    if kappa1 < 0.0:
        raise ShapeError("kappa1 must be nonnegative")
    if duration <= 0.0 or n_times < 2:
        raise ShapeError("need a positive duration and at least two times")
    if kappa2 is None:
        if params.kappa_r > 0.0 and params.g2 != 0.0:
            kappa2 = adiabatic_elimination(params).kappa2
        else:
            raise ShapeError(
                "kappa2 is not derivable from the params; pass kappa2 explicitly")
    if kappa2 <= 0.0:
        raise ShapeError("kappa2 must be positive")
    alpha = params.alpha
    if n_max is None:
        n_max = int(math.ceil(alpha * alpha + 5.0 * alpha + 4.0))
    h = kerr_cat_hamiltonian(params.K, params.eps2, n_max)
    ad = annihilation(n_max)
    unmon = [Operator(h.shape, math.sqrt(kappa2) * (ad.data @ ad.data))]
    if kappa1 > 0.0:
        unmon.append(Operator(h.shape, math.sqrt(kappa1) * ad.data))
    model = LindbladModel(H=h, channels=[], unmonitored=unmon)
    if rho0 is None:
        rho0 = basis_state(h.shape, 0).to_density_matrix()
    elif rho0.shape.dims != h.shape.dims:
        raise ShapeError("rho0 does not match the truncated mode")
    times = np.linspace(0.0, duration, n_times)
    states = lindblad_propagate(model, rho0, times)
    for t, s in zip(times, states):
        tail = float(np.real(s.data[n_max, n_max] + s.data[n_max - 1, n_max - 1]))
        if tail > 1e-3:
            raise TruncationError(
                f"mode weight {tail:.2e} at the truncation edge by t = {t:.3g}")
    return EvolutionResult(times, states)
