"""Exact statevector simulation of the quantum convolutional head.

Qubit 0 is the most significant bit of the basis index, so ``|10>`` is index 2.
Gate conventions (half-angle)::

    Ry(t) = [[cos t/2, -sin t/2], [sin t/2, cos t/2]]
    Rz(t) = diag(exp(-i t/2), exp(i t/2))
    Rx(t) = [[cos t/2, -i sin t/2], [-i sin t/2, cos t/2]]

The ansatz is a ladder: each layer pairs adjacent active qubits
``(a0, a1), (a2, a3), ...``, applies ``CNOT(a->b) . Ry(t0) (x) Ry(t1)`` to every
pair, then pools each pair with ``CRz(phi; drop->keep)``, ``X(drop)``,
``CRx(phi; drop->keep)`` and retires the odd member.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import EncodingError, ShapeError
from .nn.tensor import Tensor, as_tensor

NORM_TOL = 1e-10

# Four-term shift rule for controlled rotations (generator spectrum {0, +-1/2}).  In the
# ladder every control is retired right after its pool, so the two-term rule would give the
# same numbers there; the four-term rule stays exact wherever the control is reused.
_C1 = (np.sqrt(2) + 1) / (4 * np.sqrt(2))
_C2 = (np.sqrt(2) - 1) / (4 * np.sqrt(2))
SHIFT_RULES = {
    "ry": ((np.pi / 2, 0.5), (-np.pi / 2, -0.5)),
    "controlled": ((np.pi / 2, _C1), (-np.pi / 2, -_C1), (3 * np.pi / 2, -_C2), (-3 * np.pi / 2, _C2)),
}


# -- 2x2 blocks, vectorized over a leading row axis -----------------------------------

def _ry(theta):
    c, s = np.cos(np.asarray(theta) / 2), np.sin(np.asarray(theta) / 2)
    return np.array([[c, -s], [s, c]])


def _rz(phi):
    e = np.exp(-0.5j * np.asarray(phi))
    return np.array([[e, np.zeros_like(e)], [np.zeros_like(e), np.conj(e)]], dtype=complex)


def _rx(phi):
    c, s = np.cos(np.asarray(phi) / 2), np.sin(np.asarray(phi) / 2)
    return np.array([[c, -1j * s], [-1j * s, c]], dtype=complex)


_X = np.array([[0.0, 1.0], [1.0, 0.0]])
_ROTATIONS = {"ry": _ry, "rz": _rz, "rx": _rx}


def _entries(u: np.ndarray, ndim: int) -> tuple:
    # u: (2, 2) or (2, 2, R); entries broadcastable against a (R, ...) block of rank ndim
    if u.ndim == 2:
        return u[0, 0], u[0, 1], u[1, 0], u[1, 1]
    u = u.reshape(u.shape + (1,) * (ndim - 1))
    return u[0, 0], u[0, 1], u[1, 0], u[1, 1]


def _mix(out: np.ndarray, v: np.ndarray, u: np.ndarray, lo: tuple, hi: tuple) -> None:
    a0, a1 = v[lo], v[hi]
    u00, u01, u10, u11 = _entries(u, a0.ndim)
    out[lo] = u00 * a0 + u01 * a1
    out[hi] = u10 * a0 + u11 * a1


def _gate_1q(psi: np.ndarray, u: np.ndarray, q: int, n: int) -> np.ndarray:
    rows = psi.shape[0]
    v = psi.reshape(rows, 2**q, 2, 2 ** (n - q - 1))
    out = np.empty(v.shape, dtype=np.result_type(psi, u))
    _mix(out, v, u, (slice(None), slice(None), 0), (slice(None), slice(None), 1))
    return out.reshape(rows, -1)


def _gate_controlled(psi: np.ndarray, u: np.ndarray, control: int, target: int, n: int) -> np.ndarray:
    rows = psi.shape[0]
    a, b = sorted((control, target))
    v = psi.reshape(rows, 2**a, 2, 2 ** (b - a - 1), 2, 2 ** (n - b - 1))
    out = v.astype(np.result_type(psi, u), copy=True)
    c_axis, t_axis = (2, 4) if control < target else (4, 2)
    lo = [slice(None)] * 6
    lo[c_axis] = 1
    hi = list(lo)
    lo[t_axis], hi[t_axis] = 0, 1
    _mix(out, v, u, tuple(lo), tuple(hi))
    return out.reshape(rows, -1)


def _check_qubits(n: int, *qs: int) -> None:
    for q in qs:
        if not 0 <= q < n:
            raise IndexError(f"qubit {q} out of range for {n} qubits")
    if len(set(qs)) != len(qs):
        raise ValueError(f"qubits must be distinct, got {qs}")


# -- public state API ------------------------------------------------------------------

@dataclass(frozen=True)
class StateVector:
    n_qubits: int
    amplitudes: np.ndarray

    def __post_init__(self):
        if self.amplitudes.shape != (2**self.n_qubits,):
            raise ShapeError(f"expected {2**self.n_qubits} amplitudes, got {self.amplitudes.shape}")

    @classmethod
    def zero(cls, n_qubits: int) -> "StateVector":
        amps = np.zeros(2**n_qubits, dtype=complex)
        amps[0] = 1.0
        return cls(n_qubits, amps)

    @classmethod
    def basis(cls, bits: str) -> "StateVector":
        amps = np.zeros(2 ** len(bits), dtype=complex)
        amps[int(bits, 2)] = 1.0
        return cls(len(bits), amps)

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.amplitudes))

    def probabilities(self) -> np.ndarray:
        return np.abs(self.amplitudes) ** 2

    def _wrap(self, rows: np.ndarray) -> "StateVector":
        return StateVector(self.n_qubits, rows[0])

    def _rows(self) -> np.ndarray:
        return self.amplitudes.reshape(1, -1)


def amplitude_encode(v) -> StateVector:
    v = np.asarray(v, dtype=np.float64)
    n = int(round(np.log2(v.size))) if v.size else -1
    if v.ndim != 1 or v.size < 2 or 2**n != v.size:
        raise ValueError(f"length {v.size} is not a power of two >= 2")
    norm = np.linalg.norm(v)
    if norm == 0.0:
        raise EncodingError("cannot amplitude-encode the zero vector")
    return StateVector(n, (v / norm).astype(complex))


def apply_ry(s: StateVector, q: int, theta: float) -> StateVector:
    _check_qubits(s.n_qubits, q)
    return s._wrap(_gate_1q(s._rows(), _ry(theta), q, s.n_qubits))


def apply_x(s: StateVector, q: int) -> StateVector:
    _check_qubits(s.n_qubits, q)
    return s._wrap(_gate_1q(s._rows(), _X, q, s.n_qubits))


def apply_cnot(s: StateVector, control: int, target: int) -> StateVector:
    _check_qubits(s.n_qubits, control, target)
    return s._wrap(_gate_controlled(s._rows(), _X, control, target, s.n_qubits))


def apply_crz(s: StateVector, control: int, target: int, phi: float) -> StateVector:
    _check_qubits(s.n_qubits, control, target)
    return s._wrap(_gate_controlled(s._rows(), _rz(phi), control, target, s.n_qubits))


def apply_crx(s: StateVector, control: int, target: int, phi: float) -> StateVector:
    _check_qubits(s.n_qubits, control, target)
    return s._wrap(_gate_controlled(s._rows(), _rx(phi), control, target, s.n_qubits))


def conv_unitary(s: StateVector, pair: tuple[int, int], theta0: float, theta1: float) -> StateVector:
    qa, qb = pair
    s = apply_ry(s, qa, theta0)
    s = apply_ry(s, qb, theta1)
    return apply_cnot(s, qa, qb)


def pool_op(s: StateVector, pair: tuple[int, int], phi: float) -> StateVector:
    keep, drop = pair
    s = apply_crz(s, drop, keep, phi)
    s = apply_x(s, drop)
    return apply_crx(s, drop, keep, phi)


def _marginal(rows: np.ndarray, wire: int, n: int) -> np.ndarray:
    probs = np.abs(rows.reshape((rows.shape[0],) + (2,) * n)) ** 2
    axes = tuple(1 + q for q in range(n) if q != wire)
    return probs.sum(axis=axes) if axes else probs


def measure_probs(s: StateVector, wire: int) -> np.ndarray:
    _check_qubits(s.n_qubits, wire)
    return _marginal(s._rows(), wire, s.n_qubits)[0]


# -- ansatz ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Gate:
    kind: str  # "ry", "cnot", "x", "crz", "crx"
    qubits: tuple[int, ...]
    angle: int | None = None  # index into the flat angle vector


@dataclass(frozen=True)
class QcnLayout:
    """Gate list of the conv/pool ladder plus where each angle lives."""

    n_qubits: int
    layers: int
    gates: tuple[Gate, ...]
    n_angles: int
    final_active: tuple[int, ...]
    conv_index: tuple[tuple[tuple[int, int], ...], ...]  # per layer, per pair: (t0, t1)
    pool_index: tuple[tuple[int, ...], ...]  # per layer, per pair
    pairs: tuple[tuple[tuple[int, int], ...], ...]

    @classmethod
    def build(cls, n_qubits: int = 8, layers: int = 3) -> "QcnLayout":
        if n_qubits < 1 or n_qubits > 12:
            raise ValueError("between 1 and 12 qubits are supported")
        active = list(range(n_qubits))
        gates: list[Gate] = []
        conv_index, pool_index, all_pairs = [], [], []
        k = 0
        for _ in range(layers):
            if len(active) < 2:
                raise ValueError(f"{layers} layers need more than {n_qubits} qubits")
            pairs = [(active[i], active[i + 1]) for i in range(0, len(active) - 1, 2)]
            conv_l = []
            for qa, qb in pairs:
                gates += [Gate("ry", (qa,), k), Gate("ry", (qb,), k + 1), Gate("cnot", (qa, qb))]
                conv_l.append((k, k + 1))
                k += 2
            pool_l = []
            for keep, drop in pairs:
                gates += [Gate("crz", (drop, keep), k), Gate("x", (drop,)), Gate("crx", (drop, keep), k)]
                pool_l.append(k)
                k += 1
            dropped = {drop for _, drop in pairs}
            active = [q for q in active if q not in dropped]
            conv_index.append(tuple(conv_l))
            pool_index.append(tuple(pool_l))
            all_pairs.append(tuple(pairs))
        return cls(n_qubits, layers, tuple(gates), k, tuple(active), tuple(conv_index),
                   tuple(pool_index), tuple(all_pairs))

    @property
    def default_wire(self) -> int:
        return self.final_active[-1]

    def occurrences(self) -> list[tuple[int, Gate]]:
        return [(i, g) for i, g in enumerate(self.gates) if g.angle is not None]


@dataclass
class QcnParams:
    """Flat angle vector (radians) for a :class:`QcnLayout`."""

    layout: QcnLayout
    angles: Tensor = field(default=None)

    def __post_init__(self):
        if self.angles is None:
            self.angles = Tensor(np.zeros(self.layout.n_angles), requires_grad=True)
        if self.angles.shape != (self.layout.n_angles,):
            raise ShapeError(f"expected {self.layout.n_angles} angles, got {self.angles.shape}")
        if not np.all(np.isfinite(self.angles.data)):
            raise ValueError("angles must be finite")

    @classmethod
    def random(cls, rng: np.random.Generator, n_qubits: int = 8, layers: int = 3) -> "QcnParams":
        layout = QcnLayout.build(n_qubits, layers)
        return cls(layout, Tensor(rng.uniform(0, 2 * np.pi, layout.n_angles), requires_grad=True))

    def conv_angles(self, layer: int) -> list[tuple[float, float]]:
        a = self.angles.data
        return [(a[i], a[j]) for i, j in self.layout.conv_index[layer]]

    def pool_angles(self, layer: int) -> list[float]:
        a = self.angles.data
        return [a[i] for i in self.layout.pool_index[layer]]


def _apply_gate(psi: np.ndarray, gate: Gate, theta, n: int) -> np.ndarray:
    """``theta`` is a scalar or one angle per row of ``psi``."""
    if gate.kind == "x":
        return _gate_1q(psi, _X, gate.qubits[0], n)
    if gate.kind == "cnot":
        return _gate_controlled(psi, _X, gate.qubits[0], gate.qubits[1], n)
    u = _ROTATIONS[gate.kind[-2:]](theta)
    if gate.kind == "ry":
        return _gate_1q(psi, u, gate.qubits[0], n)
    return _gate_controlled(psi, u, gate.qubits[0], gate.qubits[1], n)


def _run(layout: QcnLayout, psi: np.ndarray, angles: np.ndarray) -> np.ndarray:
    """Apply the ansatz with the flat angle vector ``angles`` to every row of ``psi``."""
    for gate in layout.gates:
        theta = None if gate.angle is None else angles[gate.angle]
        psi = _apply_gate(psi, gate, theta, layout.n_qubits)
    return psi


def _run_adjoint(layout: QcnLayout, psi: np.ndarray, angles: np.ndarray) -> np.ndarray:
    for gate in reversed(layout.gates):
        theta = None if gate.angle is None else -angles[gate.angle]
        psi = _apply_gate(psi, gate, theta, layout.n_qubits)
    return psi


def _encode_rows(v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(v, axis=1)
    if np.any(norms == 0.0):
        raise EncodingError("cannot amplitude-encode the zero vector")
    return v / norms[:, None], norms


def qcn_probs(v: np.ndarray, params: QcnParams, wire: int | None = None) -> np.ndarray:
    """Rows of ``v`` (length ``2**n``) -> rows of ``[p(0), p(1)]`` on ``wire``."""
    layout = params.layout
    wire = layout.default_wire if wire is None else wire
    _check_qubits(layout.n_qubits, wire)
    v = np.atleast_2d(np.asarray(v, dtype=np.float64))
    if v.shape[1] != 2**layout.n_qubits:
        raise ShapeError(f"input length {v.shape[1]} != 2**{layout.n_qubits}")
    psi, _ = _encode_rows(v)
    out = _run(layout, psi, params.angles.data)
    return _marginal(out, wire, layout.n_qubits)


def qcn_forward(v, params: QcnParams, wire: int | None = None) -> np.ndarray:
    """Encode one vector, run the ladder, and return ``[p(0), p(1)]``."""
    return qcn_probs(np.asarray(v, dtype=np.float64).reshape(1, -1), params, wire)[0]


def _shift_grads(layout: QcnLayout, psi: np.ndarray, angles: np.ndarray, wire: int) -> np.ndarray:
    """d p(0) / d angle for every row of ``psi``: shape ``(rows, n_angles)``.

    Every gate occurrence of an angle gets its own shifted circuits.  A shifted
    circuit shares the unshifted prefix, so it branches off the running state
    just before its gate and is carried through the remaining gates.
    """
    n = layout.n_qubits
    rows = psi.shape[0]
    state = psi
    branches = np.zeros((0, psi.shape[1]))
    owners: list[tuple[int, float]] = []
    for gate in layout.gates:
        theta = None if gate.angle is None else angles[gate.angle]
        if len(branches):
            branches = _apply_gate(branches, gate, theta, n)
        if gate.angle is not None:
            rule = SHIFT_RULES["ry" if gate.kind == "ry" else "controlled"]
            shifted = np.repeat([theta + shift for shift, _ in rule], rows)
            new = _apply_gate(np.tile(state, (len(rule), 1)), gate, shifted, n)
            branches = np.concatenate([branches, new])
            owners += [(gate.angle, coeff) for _, coeff in rule]
        state = _apply_gate(state, gate, theta, n)
    p0 = _marginal(branches, wire, n)[:, 0].reshape(len(owners), rows)
    grads = np.zeros((rows, layout.n_angles))
    for j, (a_idx, coeff) in enumerate(owners):
        grads[:, a_idx] += coeff * p0[j]
    return grads


def parameter_shift_grad(v, params: QcnParams, angle_index: int, wire: int | None = None) -> float:
    """Exact d p(0) / d angle via shift rules applied to every gate using the angle."""
    layout = params.layout
    if not 0 <= angle_index < layout.n_angles:
        raise IndexError(f"angle index {angle_index} out of range")
    wire = layout.default_wire if wire is None else wire
    psi, _ = _encode_rows(np.asarray(v, dtype=np.float64).reshape(1, -1))
    return float(_shift_grads(layout, psi, params.angles.data, wire)[0, angle_index])


def qcn_layer(features, params: QcnParams, wire: int | None = None) -> Tensor:
    """Differentiable QCN head: ``[B, 2**n]`` features -> ``[B, 2]`` probabilities.

    Input gradients use the adjoint state; angle gradients use shift rules.
    """
    features = as_tensor(features)
    layout = params.layout
    wire = layout.default_wire if wire is None else wire
    _check_qubits(layout.n_qubits, wire)
    v = features.data
    if v.ndim != 2 or v.shape[1] != 2**layout.n_qubits:
        raise ShapeError(f"expected [B, {2**layout.n_qubits}] features, got {v.shape}")
    psi, norms = _encode_rows(v)
    angles = params.angles.data.copy()
    final = _run(layout, psi, angles)
    probs = _marginal(final, wire, layout.n_qubits)

    def backward(g):
        dp0 = g[:, 0] - g[:, 1]
        projected = final.reshape((len(v),) + (2,) * layout.n_qubits).copy()
        sel = [slice(None)] * (layout.n_qubits + 1)
        sel[1 + wire] = 1
        projected[tuple(sel)] = 0.0
        back = _run_adjoint(layout, projected.reshape(len(v), -1), angles)
        dpsi = 2.0 * back.real
        radial = (dpsi * psi).sum(axis=1, keepdims=True)
        dv = (dpsi - radial * psi) / norms[:, None] * dp0[:, None]
        dangles = None
        if params.angles.requires_grad:
            dangles = (dp0[:, None] * _shift_grads(layout, psi, angles, wire)).sum(axis=0)
        return dv, dangles

    return Tensor._from_op(probs, (features, params.angles), backward, "qcn")
