"""Tests for observables, Wigner tomography, and protocol scoring."""

import warnings

import numpy as np
import pytest
from scipy.linalg import expm

from qtraj import analysis
from qtraj.errors import FitFailedError, RegimeWarning, ShapeError
from qtraj.hilbert import (
    DensityMatrix,
    PureState,
    SpaceShape,
    basis_state,
    cat_state,
    coherent_state,
)


def random_density(rng, d):
    z = rng.normal(size=(d, d)) + 1j * rng.normal(size=(d, d))
    m = z @ z.conj().T
    return m / np.trace(m).real


def random_unitary(rng, d):
    z = rng.normal(size=(d, d)) + 1j * rng.normal(size=(d, d))
    q, r = np.linalg.qr(z)
    return q * (np.diag(r) / np.abs(np.diag(r)))


# ---------------------------------------------------------------------------
# Bloch vector and purity

def test_bloch_maximally_mixed():
    v = analysis.bloch_vector(np.eye(2, dtype=complex) / 2)
    assert v.x == v.y == v.z == 0.0


def test_bloch_cardinal_states():
    plus = PureState(SpaceShape((2,)), np.array([1, 1]) / np.sqrt(2))
    v = analysis.bloch_vector(plus)
    assert v.x == pytest.approx(1.0, abs=1e-12)
    assert v.y == pytest.approx(0.0, abs=1e-12)
    assert v.z == pytest.approx(0.0, abs=1e-12)
    e = analysis.bloch_vector(basis_state((2,), 0))
    assert e.z == pytest.approx(1.0, abs=1e-12)


def test_bloch_general_mixed():
    rng = np.random.default_rng(2)
    for _ in range(20):
        rho = random_density(rng, 2)
        v = analysis.bloch_vector(rho)
        assert v.norm() <= 1.0 + 1e-9
        # reconstruct: rho = (I + r . sigma)/2
        from qtraj.hilbert import pauli
        rec = 0.5 * (np.eye(2) + v.x * pauli("x").data
                     + v.y * pauli("y").data + v.z * pauli("z").data)
        assert np.abs(rec - rho).max() < 1e-12


def test_bloch_norm_invariant():
    with pytest.raises(ShapeError):
        analysis.BlochVector(0.8, 0.8, 0.8)


def test_bloch_requires_qubit():
    with pytest.raises(ShapeError):
        analysis.bloch_vector(np.eye(3, dtype=complex) / 3)


def test_purity():
    assert analysis.purity(np.eye(2, dtype=complex) / 2) == pytest.approx(0.5)
    assert analysis.purity(basis_state((5,), 2)) == pytest.approx(1.0)
    rng = np.random.default_rng(4)
    rho = random_density(rng, 4)
    assert 0.25 <= analysis.purity(rho) <= 1.0


# ---------------------------------------------------------------------------
# fidelity

def test_fidelity_identity_and_orthogonal():
    rng = np.random.default_rng(6)
    rho = random_density(rng, 3)
    assert analysis.fidelity(rho, rho) == pytest.approx(1.0, abs=1e-9)
    e, g = basis_state((2,), 0), basis_state((2,), 1)
    assert analysis.fidelity(e, g) == 0.0


def test_fidelity_ground_vs_plus():
    g = basis_state((2,), 1)
    plus = PureState(SpaceShape((2,)), np.array([1, 1]) / np.sqrt(2))
    assert analysis.fidelity(g, plus) == pytest.approx(0.5, abs=1e-12)


def test_fidelity_symmetric_and_bounded():
    rng = np.random.default_rng(8)
    for _ in range(20):
        a, b = random_density(rng, 3), random_density(rng, 3)
        f_ab = analysis.fidelity(a, b)
        f_ba = analysis.fidelity(b, a)
        assert abs(f_ab - f_ba) < 1e-10
        assert 0.0 <= f_ab <= 1.0


def test_fidelity_pure_shortcut_consistent():
    rng = np.random.default_rng(10)
    amp = rng.normal(size=4) + 1j * rng.normal(size=4)
    amp /= np.linalg.norm(amp)
    psi = PureState(SpaceShape((4,)), amp)
    rho = random_density(rng, 4)
    direct = analysis.fidelity(psi, rho)
    via_matrix = analysis.fidelity(np.outer(amp, amp.conj()), rho)
    assert abs(direct - via_matrix) < 1e-7


def test_fidelity_pure_pure_overlap_square():
    rng = np.random.default_rng(12)
    for _ in range(10):
        a = rng.normal(size=3) + 1j * rng.normal(size=3)
        b = rng.normal(size=3) + 1j * rng.normal(size=3)
        a /= np.linalg.norm(a)
        b /= np.linalg.norm(b)
        pa, pb = PureState(SpaceShape((3,)), a), PureState(SpaceShape((3,)), b)
        assert analysis.fidelity(pa, pb) == pytest.approx(
            abs(np.vdot(a, b)) ** 2, abs=1e-12)


def test_fidelity_shape_mismatch():
    with pytest.raises(ShapeError):
        analysis.fidelity(np.eye(2) / 2, np.eye(3) / 3)


# ---------------------------------------------------------------------------
# concurrence

BELL_PLUS = np.zeros(4, dtype=complex)
BELL_PLUS[1] = BELL_PLUS[2] = 1 / np.sqrt(2)


def test_concurrence_bell():
    assert analysis.concurrence(np.outer(BELL_PLUS, BELL_PLUS.conj())) == \
        pytest.approx(1.0, abs=1e-9)


def test_concurrence_product_state():
    rho = np.zeros((4, 4), dtype=complex)
    rho[0, 0] = 1.0
    assert analysis.concurrence(rho) == 0.0


def test_concurrence_unheralded_mixture():
    # 1/4 |00> + 1/4 |11> + 1/2 |psi+>: classically correlated, unentangled
    rho = 0.25 * np.diag([1.0, 0.0, 0.0, 1.0]).astype(complex)
    rho += 0.5 * np.outer(BELL_PLUS, BELL_PLUS.conj())
    assert analysis.concurrence(rho) == pytest.approx(0.0, abs=1e-9)


def test_concurrence_werner_family():
    # p |psi-><psi-| + (1-p) I/4 has concurrence max(0, (3p-1)/2)
    psim = np.zeros(4, dtype=complex)
    psim[1], psim[2] = 1 / np.sqrt(2), -1 / np.sqrt(2)
    for p in (0.2, 0.5, 0.9):
        rho = p * np.outer(psim, psim.conj()) + (1 - p) * np.eye(4) / 4
        assert analysis.concurrence(rho) == pytest.approx(
            max(0.0, (3 * p - 1) / 2), abs=1e-9)


def test_concurrence_local_unitary_invariant():
    rng = np.random.default_rng(21)
    for _ in range(100):
        rho = random_density(rng, 4)
        u = np.kron(random_unitary(rng, 2), random_unitary(rng, 2))
        c1 = analysis.concurrence(rho)
        c2 = analysis.concurrence(u @ rho @ u.conj().T)
        assert abs(c1 - c2) < 1e-8


def test_concurrence_requires_two_qubits():
    with pytest.raises(ShapeError):
        analysis.concurrence(np.eye(3, dtype=complex) / 3)


# ---------------------------------------------------------------------------
# Wigner function

def test_displacement_elements_exact():
    # compare against expm in a much larger space, restricted to the corner
    rng = np.random.default_rng(5)
    d_small, d_big = 14, 60
    a = np.diag(np.sqrt(np.arange(1, d_big)), k=1)
    for _ in range(5):
        b = rng.normal(scale=1.6) + 1j * rng.normal(scale=1.6)
        ref = expm(b * a.conj().T - np.conj(b) * a)[:d_small, :d_small]
        mine = analysis._displacement_block(np.array([b]), d_small)[0]
        assert np.abs(ref - mine).max() < 1e-9


def test_wigner_vacuum_origin():
    grid = np.linspace(-1.0, 1.0, 21)
    w = analysis.wigner(basis_state((12,), 0), grid)
    assert not w.extent_warning
    assert w.values[10, 10] == pytest.approx(2 / np.pi, abs=1e-12)
    # Gaussian profile (2/pi) e^{-2|b|^2}
    expect = (2 / np.pi) * np.exp(
        -2 * (grid[:, None] ** 2 + grid[None, :] ** 2))
    assert np.abs(w.values - expect).max() < 1e-12


def test_wigner_vacuum_normalized():
    w = analysis.wigner(basis_state((29,), 0), np.linspace(-3.0, 3.0, 81))
    assert not w.extent_warning
    assert w.integral() == pytest.approx(1.0, abs=0.02)
    assert np.abs(w.values).max() <= 2 / np.pi + 1e-12


def test_wigner_odd_cat_origin():
    w = analysis.wigner(cat_state(2.0, "odd", 18), np.array([-0.1, 0.0, 0.1]))
    assert not w.extent_warning
    assert abs(w.values[1, 1] - (-2 / np.pi)) < 1e-3


def test_wigner_odd_cat_normalized():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RegimeWarning)
        w = analysis.wigner(cat_state(2.0, "odd", 18), np.linspace(-4, 4, 81))
    assert w.integral() == pytest.approx(1.0, abs=0.02)


def test_wigner_coherent_peak_location():
    grid = np.linspace(-3.0, 3.0, 81)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RegimeWarning)
        w = analysis.wigner(coherent_state(1.0, 12), grid)
    i, j = np.unravel_index(np.argmax(w.values), w.values.shape)
    spacing = grid[1] - grid[0]
    assert abs(grid[i] - 1.0) <= spacing
    assert abs(grid[j]) <= spacing


def test_wigner_marginals_nonnegative():
    # quadrature distributions of a fringed state stay nonnegative when
    # the window holds the full support
    grid = np.linspace(-4.0, 4.0, 161)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RegimeWarning)
        w = analysis.wigner(cat_state(1.0, "odd", 12), grid)
    assert w.marginal_re().min() >= -1e-6
    assert w.marginal_im().min() >= -1e-6
    assert w.integral() == pytest.approx(1.0, abs=0.02)


def test_wigner_extent_warning():
    with pytest.warns(RegimeWarning):
        w = analysis.wigner(basis_state((6,), 0), np.linspace(-5, 5, 11))
    assert w.extent_warning


def test_wigner_axis_pair_and_empty():
    re_axis = np.linspace(-1, 1, 11)
    im_axis = np.linspace(-0.5, 0.5, 5)
    w = analysis.wigner(basis_state((12,), 0), (re_axis, im_axis))
    assert w.values.shape == (11, 5)
    with pytest.raises(ShapeError):
        analysis.wigner(basis_state((12,), 0), np.array([]))


def test_wigner_mixed_state_average():
    # W is linear in rho
    a = coherent_state(1.0, 14)
    b = coherent_state(-1.0, 14)
    rho = 0.5 * np.outer(a.amplitudes, a.amplitudes.conj())
    rho += 0.5 * np.outer(b.amplitudes, b.amplitudes.conj())
    grid = np.linspace(-0.5, 0.5, 5)
    wm = analysis.wigner(rho, grid)
    wa = analysis.wigner(a, grid)
    wb = analysis.wigner(b, grid)
    assert np.abs(wm.values - 0.5 * (wa.values + wb.values)).max() < 1e-12


# ---------------------------------------------------------------------------
# survival fit

def test_survival_fit_exact_exponential():
    t = np.linspace(0.5, 5.0, 10)
    fit = analysis.survival_fit(t, np.exp(-0.3 * t), n_samples=1000)
    assert fit.rate == pytest.approx(0.3, abs=1e-6)
    assert fit.ci_low <= 0.3 <= fit.ci_high
    assert fit.ci_high - fit.ci_low < 1e-6


def test_survival_fit_noisy_recovers_rate():
    rng = np.random.default_rng(9)
    t = np.linspace(0.5, 5.0, 10)
    s = np.exp(-0.3 * t) * np.exp(rng.normal(scale=0.01, size=t.size))
    s = np.minimum.accumulate(np.clip(s, 1e-6, 1.0))
    fit = analysis.survival_fit(t, s, n_samples=1000)
    assert fit.ci_low <= 0.3 <= fit.ci_high


def test_survival_fit_rejects_non_monotone():
    t = np.linspace(0.0, 4.0, 9)
    s = np.exp(-0.5 * t)
    s[5] = s[3]
    with pytest.raises(FitFailedError):
        analysis.survival_fit(t, s, n_samples=500)


def test_survival_fit_rejects_nonpositive():
    t = np.linspace(0.0, 4.0, 9)
    s = np.exp(-0.5 * t)
    s[-1] = 0.0
    with pytest.raises(FitFailedError):
        analysis.survival_fit(t, s, n_samples=500)


def test_survival_fit_preconditions():
    t = np.linspace(0.0, 4.0, 4)
    with pytest.raises(ShapeError):
        analysis.survival_fit(t, np.exp(-t), n_samples=500)
    t = np.linspace(0.0, 4.0, 9)
    with pytest.raises(ShapeError):
        analysis.survival_fit(t, np.exp(-t), n_samples=99)


# ---------------------------------------------------------------------------
# phase statistics

def test_phase_stats_perfect_estimates():
    assert analysis.phase_error_stats(np.full(200, 0.7), 0.7) == 0.0


def test_phase_stats_uniform_estimates():
    # evenly spaced angles sum to zero resultant exactly
    n = 2000
    theta = 0.7
    roots = theta + 2 * np.pi * np.arange(n) / n
    assert analysis.phase_error_stats(roots, theta) == pytest.approx(1.0, abs=1e-9)
    rng = np.random.default_rng(17)
    cv = analysis.phase_error_stats(rng.uniform(-np.pi, np.pi, n), theta)
    assert abs(cv - 1.0) < 3 / np.sqrt(n)


def test_phase_stats_concentrated():
    # small gaussian spread sigma: circular variance ~ sigma^2/2
    rng = np.random.default_rng(17)
    est = rng.normal(0.7, 0.1, size=5000)
    cv = analysis.phase_error_stats(est, 0.7)
    assert cv == pytest.approx(0.005, rel=0.2)


def test_phase_stats_wraparound_safe():
    # estimates straddling the -pi/pi cut are not penalized
    est = np.concatenate([np.full(100, np.pi - 0.01), np.full(100, -np.pi + 0.01)])
    cv = analysis.phase_error_stats(est, np.pi)
    assert cv < 1e-3


def test_phase_stats_preconditions():
    with pytest.raises(ShapeError):
        analysis.phase_error_stats(np.zeros(99), 0.0)
