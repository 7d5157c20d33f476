"""Single-hidden-layer tanh network standing in for the venular pressure ODE.

The network maps (P2, P4, P5) to the per-step increment of P4; the time step
is absorbed into the weights. Trainable weights are flattened in the fixed
order ``w1`` (row-major, 20x3), ``b1`` (20), ``w2`` (20), ``b2`` (1). The
affine input scaling and the output gain are configuration, not weights.
"""

import dataclasses
from dataclasses import dataclass

import numpy as np

from hybridckf.errors import LengthMismatch

N_INPUT = 3
N_HIDDEN = 20
N_WEIGHTS = N_HIDDEN * N_INPUT + N_HIDDEN + N_HIDDEN + 1  # 101

#: Nominal (low, high) ranges in mmHg for the inputs (P2, P4, P5).
NOMINAL_RANGES = ((35.0, 55.0), (20.0, 36.0), (14.0, 24.0))

_W1 = slice(0, N_HIDDEN * N_INPUT)
_B1 = slice(_W1.stop, _W1.stop + N_HIDDEN)
_W2 = slice(_B1.stop, _B1.stop + N_HIDDEN)
_B2 = _W2.stop


@dataclass(frozen=True, eq=False)
class MlpParams:
    w1: np.ndarray  # (20, 3)
    b1: np.ndarray  # (20,)
    w2: np.ndarray  # (20,), the single output row
    b2: float
    in_offset: np.ndarray  # (3,)
    in_gain: np.ndarray  # (3,)
    out_gain: float = 1.0

    def __post_init__(self):
        if np.shape(self.w1) != (N_HIDDEN, N_INPUT) or np.shape(self.b1) != (N_HIDDEN,):
            raise LengthMismatch("hidden layer must be 20x3 with 20 biases")
        if np.shape(self.w2) != (N_HIDDEN,):
            raise LengthMismatch("output layer must have 20 weights")
        if np.shape(self.in_offset) != (N_INPUT,) or np.shape(self.in_gain) != (N_INPUT,):
            raise LengthMismatch("input scaling needs 3 offsets and 3 gains")
        if np.any(np.asarray(self.in_gain) == 0):
            raise ValueError("input gains must be nonzero")

    def __eq__(self, other):
        if not isinstance(other, MlpParams):
            return NotImplemented
        return (
            np.array_equal(flatten(self), flatten(other))
            and np.array_equal(self.in_offset, other.in_offset)
            and np.array_equal(self.in_gain, other.in_gain)
            and self.out_gain == other.out_gain
        )


def scaling_from_ranges(ranges=NOMINAL_RANGES):
    """Offsets (range midpoints) and gains (2 / width) mapping ranges to [-1, 1]."""
    lo, hi = np.asarray(ranges, dtype=np.float64).T
    return 0.5 * (lo + hi), 2.0 / (hi - lo)


def zero_params(ranges=NOMINAL_RANGES, out_gain=1.0):
    offset, gain = scaling_from_ranges(ranges)
    return MlpParams(
        w1=np.zeros((N_HIDDEN, N_INPUT)),
        b1=np.zeros(N_HIDDEN),
        w2=np.zeros(N_HIDDEN),
        b2=0.0,
        in_offset=offset,
        in_gain=gain,
        out_gain=out_gain,
    )


def mlp_init(seed, scheme="uniform_glorot", ranges=NOMINAL_RANGES, out_gain=1.0):
    """Glorot-uniform weights, zero biases, scaling from nominal pressure ranges."""
    if scheme != "uniform_glorot":
        raise ValueError(f"unknown initialization scheme {scheme!r}")
    rng = np.random.default_rng(seed)
    lim1 = np.sqrt(6.0 / (N_INPUT + N_HIDDEN))
    lim2 = np.sqrt(6.0 / (N_HIDDEN + 1))
    base = zero_params(ranges, out_gain)
    return dataclasses.replace(
        base,
        w1=rng.uniform(-lim1, lim1, size=(N_HIDDEN, N_INPUT)),
        w2=rng.uniform(-lim2, lim2, size=N_HIDDEN),
    )


def flatten(params):
    return np.concatenate(
        [np.ravel(params.w1), params.b1, params.w2, [params.b2]]
    ).astype(np.float64)


def unflatten(v, template):
    """Weights from a flat vector; scaling constants come from ``template``."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (N_WEIGHTS,):
        raise LengthMismatch(f"expected {N_WEIGHTS} weights, got shape {v.shape}")
    return dataclasses.replace(
        template,
        w1=v[_W1].reshape(N_HIDDEN, N_INPUT).copy(),
        b1=v[_B1].copy(),
        w2=v[_W2].copy(),
        b2=float(v[_B2]),
    )


def _scale(params, x):
    return (np.asarray(x, dtype=np.float64) - params.in_offset) * params.in_gain


def mlp_forward(params, x):
    """P4 increment for input (P2, P4, P5); ``x`` may also be an (n, 3) batch."""
    z = _scale(params, x)
    h = np.tanh(z @ params.w1.T + params.b1)
    return params.out_gain * (h @ params.w2 + params.b2)


def forward_batch(weights, x, template):
    """Evaluate one network per row: ``weights`` is (n, 101), ``x`` is (n, 3).

    Used to push cubature points, each carrying its own weights, through the
    network in one vectorized call.
    """
    weights = np.asarray(weights, dtype=np.float64)
    n = weights.shape[0]
    w1 = weights[:, _W1].reshape(n, N_HIDDEN, N_INPUT)
    z = _scale(template, x)
    h = np.tanh(np.einsum("nij,nj->ni", w1, z) + weights[:, _B1])
    return template.out_gain * (np.einsum("ni,ni->n", h, weights[:, _W2]) + weights[:, _B2])


def input_jacobian_batch(weights, x, template):
    """d(output)/d(input) for every row of a batch, shape (n, 3)."""
    weights = np.asarray(weights, dtype=np.float64)
    n = weights.shape[0]
    w1 = weights[:, _W1].reshape(n, N_HIDDEN, N_INPUT)
    z = _scale(template, x)
    h = np.tanh(np.einsum("nij,nj->ni", w1, z) + weights[:, _B1])
    da = template.out_gain * weights[:, _W2] * (1.0 - h * h)
    return np.einsum("ni,nij->nj", da, w1) * template.in_gain


def mlp_gradient(params, x, upstream=1.0):
    """Reverse-mode derivatives of ``upstream * mlp_forward(params, x)``.

    Returns ``(d_weights, d_input)`` with ``d_weights`` in flat layout.
    """
    z = _scale(params, x)
    h = np.tanh(params.w1 @ z + params.b1)
    g = upstream * params.out_gain
    da = g * params.w2 * (1.0 - h * h)
    d_weights = np.empty(N_WEIGHTS)
    d_weights[_W1] = np.outer(da, z).ravel()
    d_weights[_B1] = da
    d_weights[_W2] = g * h
    d_weights[_B2] = g
    d_input = (params.w1.T @ da) * params.in_gain
    return d_weights, d_input


def init_like(seed, template, scheme="uniform_glorot"):
    """``mlp_init(seed)`` weights carrying ``template``'s scaling constants."""
    start = mlp_init(seed, scheme)
    return dataclasses.replace(
        start, in_offset=template.in_offset, in_gain=template.in_gain, out_gain=template.out_gain
    )
