"""Dense operators and states on small tensor-product Hilbert spaces.

Everything is plain numpy under the hood: an Operator is a square complex
matrix tagged with the tensor factorization of the space it acts on, and
states are either unit vectors (PureState) or validated density matrices
(DensityMatrix).  Factor ordering is significant: the first factor in a
SpaceShape varies slowest in the Kronecker layout, i.e. tensor(A, B) is
numpy.kron(A, B).

Qubit convention used throughout the package: basis order (|e>, |g>) so
that sigma_z |e> = +|e>, and sigma_plus |g> = |e>.
"""

from __future__ import annotations

from dataclasses import dataclass
import math
import numbers

import numpy as np

from .errors import ShapeError, TruncationError

#: Largest total dimension accepted by default; raise per-call when needed.
DEFAULT_MAX_DIM = 4096

# validation tolerances for state containers
_TRACE_TOL = 1e-9
_HERM_TOL = 1e-9
_EIG_FLOOR = -1e-9
_NORM_TOL = 1e-9


@dataclass(frozen=True)
class SpaceShape:
    """Ordered factor dimensions of a tensor-product space."""

    dims: tuple[int, ...]

    def __init__(self, dims, max_dim: int | None = None):
        dims = tuple(int(d) for d in dims)
        if not dims:
            raise ShapeError("a space needs at least one factor")
        if any(d < 2 for d in dims):
            raise ShapeError(f"every factor dimension must be >= 2, got {dims}")
        cap = DEFAULT_MAX_DIM if max_dim is None else int(max_dim)
        total = math.prod(dims)
        if total > cap:
            raise ShapeError(f"total dimension {total} exceeds cap {cap}")
        object.__setattr__(self, "dims", dims)

    @property
    def dim(self) -> int:
        return math.prod(self.dims)

    def __iter__(self):
        return iter(self.dims)

    def __len__(self):
        return len(self.dims)


def _as_shape(shape) -> SpaceShape:
    if isinstance(shape, SpaceShape):
        return shape
    return SpaceShape(tuple(shape))


class Operator:
    """A square complex matrix acting on a fixed SpaceShape.

    The wrapped array is made read-only; arithmetic returns new objects.
    Hot numerical loops should work on ``.data`` directly.
    """

    __slots__ = ("shape", "data")

    def __init__(self, shape, data):
        shape = _as_shape(shape)
        data = np.asarray(data, dtype=complex)
        if data.ndim != 2 or data.shape[0] != data.shape[1]:
            raise ShapeError(f"operator data must be square, got {data.shape}")
        if data.shape[0] != shape.dim:
            raise ShapeError(
                f"data dimension {data.shape[0]} does not match space {shape.dims}"
            )
        data = data.copy()
        data.setflags(write=False)
        self.shape = shape
        self.data = data

    @property
    def dim(self) -> int:
        return self.shape.dim

    def dag(self) -> "Operator":
        return Operator(self.shape, self.data.conj().T)

    def is_hermitian(self, tol: float = 1e-12) -> bool:
        return bool(np.max(np.abs(self.data - self.data.conj().T)) <= tol)

    def norm2(self) -> float:
        """Spectral norm."""
        return float(np.linalg.norm(self.data, 2))

    def _check_same_space(self, other):
        if self.shape.dims != other.shape.dims:
            raise ShapeError(
                f"operands on different spaces: {self.shape.dims} vs {other.shape.dims}"
            )

    def __add__(self, other):
        self._check_same_space(other)
        return Operator(self.shape, self.data + other.data)

    def __sub__(self, other):
        self._check_same_space(other)
        return Operator(self.shape, self.data - other.data)

    def __neg__(self):
        return Operator(self.shape, -self.data)

    def __mul__(self, scalar):
        if not isinstance(scalar, numbers.Number):
            return NotImplemented
        return Operator(self.shape, self.data * scalar)

    __rmul__ = __mul__

    def __matmul__(self, other):
        self._check_same_space(other)
        return Operator(self.shape, self.data @ other.data)

    def __repr__(self):
        return f"Operator(dims={self.shape.dims})"


class PureState:
    """Unit-norm state vector on a SpaceShape."""

    __slots__ = ("shape", "amplitudes")

    def __init__(self, shape, amplitudes):
        shape = _as_shape(shape)
        amplitudes = np.asarray(amplitudes, dtype=complex).reshape(-1)
        if amplitudes.size != shape.dim:
            raise ShapeError(
                f"amplitude length {amplitudes.size} does not match space {shape.dims}"
            )
        nrm = np.linalg.norm(amplitudes)
        if abs(nrm - 1.0) > _NORM_TOL:
            raise ShapeError(f"state norm {nrm!r} differs from 1 beyond {_NORM_TOL}")
        amplitudes = amplitudes.copy()
        amplitudes.setflags(write=False)
        self.shape = shape
        self.amplitudes = amplitudes

    @property
    def dim(self) -> int:
        return self.shape.dim

    def to_density_matrix(self) -> "DensityMatrix":
        rho = np.outer(self.amplitudes, self.amplitudes.conj())
        return DensityMatrix(self.shape, rho)

    def overlap(self, other: "PureState") -> complex:
        return complex(np.vdot(self.amplitudes, other.amplitudes))

    def __repr__(self):
        return f"PureState(dims={self.shape.dims})"


class DensityMatrix(Operator):
    """Hermitian, unit-trace, positive-semidefinite operator.

    Construction validates trace to 1e-9, hermiticity to 1e-9 elementwise
    and the smallest eigenvalue against a -1e-9 floor.
    """

    __slots__ = ()

    def __init__(self, shape, data):
        super().__init__(shape, data)
        tr = np.trace(self.data)
        if abs(tr - 1.0) > _TRACE_TOL:
            raise ShapeError(f"density matrix trace {tr!r} differs from 1")
        if np.max(np.abs(self.data - self.data.conj().T)) > _HERM_TOL:
            raise ShapeError("density matrix is not hermitian within 1e-9")
        w = np.linalg.eigvalsh(self.data)
        if w[0] < _EIG_FLOOR:
            raise ShapeError(f"density matrix has eigenvalue {w[0]:.3e} below floor")

    @classmethod
    def from_pure(cls, psi: PureState) -> "DensityMatrix":
        return psi.to_density_matrix()

    @classmethod
    def _trusted(cls, shape, data) -> "DensityMatrix":
        """Wrap without the eigenvalue check.

        For integrator internals whose output is hermitian and unit-trace
        by construction but, like any Euler-Maruyama step, may dip a few
        parts in 1e6 below positivity.  Not part of the public API.
        """
        obj = object.__new__(cls)
        Operator.__init__(obj, shape, data)
        return obj

    def __repr__(self):
        return f"DensityMatrix(dims={self.shape.dims})"


# ---------------------------------------------------------------------------
# constructors

_QUBIT = SpaceShape((2,))

_PAULI = {
    "x": np.array([[0, 1], [1, 0]], dtype=complex),
    "y": np.array([[0, -1j], [1j, 0]], dtype=complex),
    "z": np.array([[1, 0], [0, -1]], dtype=complex),
    "plus": np.array([[0, 1], [0, 0]], dtype=complex),
    "minus": np.array([[0, 0], [1, 0]], dtype=complex),
}


def pauli(axis: str) -> Operator:
    """Pauli operator on the (|e>, |g>) qubit basis.

    axis is one of 'x', 'y', 'z', 'plus', 'minus'; sigma_plus maps |g> to
    |e> and sigma_z |e> = +|e>.
    """
    try:
        return Operator(_QUBIT, _PAULI[axis])
    except KeyError:
        raise ShapeError(f"unknown Pauli axis {axis!r}") from None


def identity(shape) -> Operator:
    shape = _as_shape(shape)
    return Operator(shape, np.eye(shape.dim))


def annihilation(n_max: int) -> Operator:
    """Truncated mode lowering operator a on Fock levels 0..n_max."""
    n_max = int(n_max)
    if n_max < 1:
        raise TruncationError(f"n_max must be >= 1, got {n_max}")
    n = np.arange(1, n_max + 1)
    data = np.diag(np.sqrt(n).astype(complex), k=1)
    return Operator(SpaceShape((n_max + 1,)), data)


def number_operator(n_max: int) -> Operator:
    a = annihilation(n_max)
    return Operator(a.shape, a.data.conj().T @ a.data)


def basis_state(shape, index: int) -> PureState:
    shape = _as_shape(shape)
    amp = np.zeros(shape.dim, dtype=complex)
    amp[index] = 1.0
    return PureState(shape, amp)


def tensor(*ops: Operator) -> Operator:
    """Kronecker product; the first operand varies slowest."""
    if not ops:
        raise ShapeError("tensor() needs at least one operand")
    data = ops[0].data
    dims = list(ops[0].shape.dims)
    for op in ops[1:]:
        data = np.kron(data, op.data)
        dims.extend(op.shape.dims)
    return Operator(SpaceShape(tuple(dims)), data)


def tensor_states(*states: PureState) -> PureState:
    amp = states[0].amplitudes
    dims = list(states[0].shape.dims)
    for s in states[1:]:
        amp = np.kron(amp, s.amplitudes)
        dims.extend(s.shape.dims)
    return PureState(SpaceShape(tuple(dims)), amp)


def partial_trace(rho: DensityMatrix, keep) -> DensityMatrix:
    """Trace out all factors not listed in ``keep`` (indices into dims)."""
    dims = rho.shape.dims
    keep = sorted(set(int(k) for k in keep))
    if not keep or any(k < 0 or k >= len(dims) for k in keep):
        raise ShapeError(f"keep={keep} invalid for dims {dims}")
    n = len(dims)
    tens = rho.data.reshape(dims + dims)
    # contract traced-out row/column index pairs one at a time
    traced = [i for i in range(n) if i not in keep]
    for count, i in enumerate(sorted(traced, reverse=True)):
        m = tens.ndim // 2
        tens = np.trace(tens, axis1=i, axis2=m + i)
    new_dims = tuple(dims[i] for i in keep)
    d = math.prod(new_dims)
    return DensityMatrix(SpaceShape(new_dims), tens.reshape(d, d))


def coherent_state(alpha: complex, n_max: int) -> PureState:
    """Truncated coherent state, renormalized on the kept levels.

    Requires |alpha|^2 + 5|alpha| + 4 <= n_max so the discarded tail is
    negligible at the package's working tolerances.
    """
    n_max = int(n_max)
    if n_max < 1:
        raise TruncationError(f"n_max must be >= 1, got {n_max}")
    amag = abs(alpha)
    need = amag * amag + 5.0 * amag + 4.0
    if need > n_max:
        raise TruncationError(
            f"n_max={n_max} too small for |alpha|={amag:.3f}; need >= {need:.1f}"
        )
    n = np.arange(n_max + 1)
    # log-domain amplitudes to stay finite for larger alpha
    if amag == 0.0:
        amp = np.zeros(n_max + 1, dtype=complex)
        amp[0] = 1.0
    else:
        logmag = n * math.log(amag) - 0.5 * _log_factorial(n) - amag * amag / 2.0
        phase = np.angle(complex(alpha)) * n
        amp = np.exp(logmag + 1j * phase)
    amp = amp / np.linalg.norm(amp)
    return PureState(SpaceShape((n_max + 1,)), amp)


def _log_factorial(n):
    from scipy.special import gammaln

    return gammaln(np.asarray(n) + 1.0)


def cat_state(alpha: complex, parity: str, n_max: int) -> PureState:
    """Even or odd coherent superposition |alpha> +/- |-alpha>, renormalized.

    The untruncated normalization is 1/sqrt(2(1 +/- exp(-2|alpha|^2)));
    here the truncated vector is renormalized numerically instead.
    """
    if parity not in ("even", "odd"):
        raise ShapeError(f"parity must be 'even' or 'odd', got {parity!r}")
    plus = coherent_state(alpha, n_max).amplitudes
    minus = coherent_state(-alpha, n_max).amplitudes
    amp = plus + minus if parity == "even" else plus - minus
    nrm = np.linalg.norm(amp)
    if nrm < 1e-12:
        raise TruncationError("cat state has vanishing norm (alpha too small)")
    return PureState(SpaceShape((n_max + 1,)), amp / nrm)


# ---------------------------------------------------------------------------
# functionals

def dagger(op: Operator) -> Operator:
    return op.dag()


def commutator(a: Operator, b: Operator) -> Operator:
    return a @ b - b @ a


def expectation(op: Operator, state) -> complex:
    """<op> in a PureState or DensityMatrix."""
    if isinstance(state, PureState):
        v = state.amplitudes
        if op.dim != v.size:
            raise ShapeError("operator and state dimensions differ")
        return complex(np.vdot(v, op.data @ v))
    if isinstance(state, Operator):
        if op.dim != state.dim:
            raise ShapeError("operator and state dimensions differ")
        return complex(np.trace(op.data @ state.data))
    raise ShapeError(f"cannot take expectation in {type(state).__name__}")


def eigenspace_projector(op: Operator, value: float, atol: float = 1e-9) -> Operator:
    """Projector onto the eigenspace of a hermitian operator at ``value``."""
    w, v = np.linalg.eigh(op.data)
    cols = np.abs(w - value) <= atol
    if not np.any(cols):
        raise ShapeError(f"no eigenvalue within {atol} of {value}")
    vec = v[:, cols]
    return Operator(op.shape, vec @ vec.conj().T)


def projective_outcome(op: Operator, psi: PureState, value: float,
                       atol: float = 1e-9) -> tuple[float, PureState]:
    """Probability and post-state for a projective outcome of hermitian op."""
    proj = eigenspace_projector(op, value, atol)
    vec = proj.data @ psi.amplitudes
    p = float(np.real(np.vdot(vec, vec)))
    if p < 1e-300:
        raise ShapeError("projective outcome has zero probability")
    return p, PureState(psi.shape, vec / math.sqrt(p))
