"""Hybrid discrete-time model: known Euler branches plus a neural P4 branch.

The augmented state is ``x = [w (101 network weights) | s (P1, P2, P4, P5)]``.
Weights follow a random walk (identity transition plus process noise owned by
the filter); P1, P2 and P5 advance by ``dt * F_i``; P4 advances by the
network output, which already includes the time step. The measurement
selects (P1, P2, P5). The measurement model has no parameters, so the
measurement-parameter block of the layout is empty.
"""

import dataclasses
import json
from dataclasses import dataclass, field

import numpy as np

from hybridckf import mlp
from hybridckf.errors import LayoutMismatch, LengthMismatch, NonFinite
from hybridckf.retina import OBSERVED, RetinaParams, retina_derivatives, retina_jacobian, steady_state

LAYOUT_VERSION = "aug-v1"


@dataclass(frozen=True)
class Layout:
    n_weights: int = mlp.N_WEIGHTS
    n_meas_params: int = 0
    n_pressures: int = 4
    version: str = LAYOUT_VERSION

    @property
    def dim(self):
        return self.n_weights + self.n_meas_params + self.n_pressures

    @property
    def weights(self):
        return slice(0, self.n_weights)

    @property
    def meas_params(self):
        return slice(self.n_weights, self.n_weights + self.n_meas_params)

    @property
    def pressures(self):
        return slice(self.n_weights + self.n_meas_params, self.dim)


LAYOUT = Layout()
DIM = LAYOUT.dim  # 105


@dataclass(frozen=True)
class HybridModelConfig:
    """Everything the transition and noise models need.

    ``meas_noise`` is the measurement noise variance: a scalar or one value per
    observed channel. ``p4_branch="oracle"`` replaces the network by
    ``dt * F4`` (used to check the wiring against the full simulator).
    """

    dt: float = 0.01
    params: RetinaParams = field(default_factory=RetinaParams)
    nn_template: mlp.MlpParams = field(default_factory=mlp.zero_params)
    q_omega: float = 1e-7
    q_s: float = 1e-4
    meas_noise: object = 1e-2
    p4_branch: str = "nn"

    def __post_init__(self):
        if not self.dt >= 0:
            raise ValueError("dt must be nonnegative")
        if np.any(np.asarray(self.meas_noise) <= 0):
            raise ValueError("measurement noise variance must be positive")
        if self.q_omega < 0 or np.any(np.asarray(self.q_s) < 0):
            raise ValueError("process noise variances must be nonnegative")
        if self.p4_branch not in ("nn", "oracle"):
            raise ValueError(f"unknown p4_branch {self.p4_branch!r}")

    def process_noise(self, with_weights=True):
        """Diagonal of Q for the augmented (or pressure-only) state."""
        q_s = np.broadcast_to(np.asarray(self.q_s, dtype=np.float64), (LAYOUT.n_pressures,)).copy()
        if not with_weights:
            return q_s
        return np.concatenate([np.full(LAYOUT.n_weights, self.q_omega), q_s])

    def measurement_noise(self):
        r = np.broadcast_to(np.asarray(self.meas_noise, dtype=np.float64), (len(OBSERVED),))
        return np.diag(r)

    def with_(self, **changes):
        return dataclasses.replace(self, **changes)


def assemble(weights, pressures):
    weights = np.asarray(weights, dtype=np.float64)
    pressures = np.asarray(pressures, dtype=np.float64)
    if weights.shape != (LAYOUT.n_weights,) or pressures.shape != (LAYOUT.n_pressures,):
        raise LengthMismatch(
            f"need {LAYOUT.n_weights} weights and {LAYOUT.n_pressures} pressures, "
            f"got {weights.shape} and {pressures.shape}"
        )
    return np.concatenate([weights, pressures])


def split(x):
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != DIM:
        raise LengthMismatch(f"augmented state must have length {DIM}, got {x.shape[-1]}")
    return x[..., LAYOUT.weights], x[..., LAYOUT.pressures]


def state_to_json(x):
    weights, pressures = split(x)
    return json.dumps(
        {"layout": LAYOUT.version, "weights": weights.tolist(), "pressures": pressures.tolist()}
    )


def state_from_json(text):
    data = json.loads(text)
    if data.get("layout") != LAYOUT.version:
        raise LayoutMismatch(f"layout {data.get('layout')!r} != {LAYOUT.version!r}")
    return assemble(data["weights"], data["pressures"])


def _known_rates(s, pin, pout, cfg):
    return retina_derivatives(s, pin, pout, cfg.params)


def step_pressures(s, weights, u, cfg):
    """Advance a batch of pressure vectors ``s`` (n, 4) one step.

    ``weights`` is either an (n, 101) array (one network per row) or a single
    :class:`~hybridckf.mlp.MlpParams` shared by all rows.
    """
    s = np.atleast_2d(np.asarray(s, dtype=np.float64))
    pin, pout = u
    # non-finite results are reported by the callers as NonFinite
    with np.errstate(invalid="ignore", over="ignore"):
        rates = _known_rates(s, pin, pout, cfg)
        out = s + cfg.dt * rates
    if cfg.p4_branch == "nn":
        nn_in = s[:, [1, 2, 3]]
        if isinstance(weights, mlp.MlpParams):
            inc = mlp.mlp_forward(weights, nn_in)
        else:
            inc = mlp.forward_batch(weights, nn_in, cfg.nn_template)
        out[:, 2] = s[:, 2] + inc
    return out


def hybrid_transition_batch(x, u, cfg):
    """Augmented transition for an (n, 105) batch of states."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    weights, pressures = split(x)
    out = np.empty_like(x)
    out[:, LAYOUT.weights] = weights
    out[:, LAYOUT.pressures] = step_pressures(pressures, weights, u, cfg)
    if not np.all(np.isfinite(out)):
        raise NonFinite("hybrid transition produced a non-finite state")
    return out


def hybrid_transition(x, u, cfg):
    """One step of the augmented model: weights copied, pressures advanced."""
    return hybrid_transition_batch(x, u, cfg)[0]


def measurement_matrix():
    h = np.zeros((len(OBSERVED), DIM))
    for row, idx in enumerate(OBSERVED):
        h[row, LAYOUT.pressures.start + idx] = 1.0
    return h


def measure(x):
    """Observed pressures (P1, P2, P5) of an augmented state or batch."""
    _, pressures = split(x)
    return pressures[..., list(OBSERVED)]


def rollout(weights, s0, inputs, cfg):
    """Open-loop pressure trajectory from ``s0`` under a driver sequence.

    ``inputs`` is (n_t, 2); the returned array is (n_t, 4) with row 0 = ``s0``.
    """
    n_t = len(inputs)
    traj = np.empty((n_t, 4))
    s = np.asarray(s0, dtype=np.float64)[None, :]
    traj[0] = s[0]
    for k in range(1, n_t):
        s = step_pressures(s, weights, inputs[k - 1], cfg)
        traj[k] = s[0]
    if not np.all(np.isfinite(traj)):
        raise NonFinite("open-loop rollout diverged")
    return traj


def initial_pressures(ds, params, mode="from_first_measurement"):
    """Starting pressures for a filter or rollout over ``ds``.

    ``"from_first_measurement"`` takes P1, P2, P5 from the first observation
    and puts P4 between P2 and P5 at its steady-state fraction;
    ``"steady_state"`` uses the fixed point under the first drivers; any
    4-vector is used as given.
    """
    pin0, pout0 = ds.inputs[0]
    if isinstance(mode, str):
        ss = steady_state(params, pin0, pout0)
        if mode == "steady_state":
            return ss
        if mode != "from_first_measurement":
            raise ValueError(f"unknown initial pressure mode {mode!r}")
        y0 = ds.observations[0]
        frac = (ss[2] - ss[3]) / (ss[1] - ss[3])
        return np.array([y0[0], y0[1], y0[2] + frac * (y0[1] - y0[2]), y0[2]])
    s0 = np.asarray(mode, dtype=np.float64)
    if s0.shape != (4,):
        raise ValueError("explicit initial pressures must have 4 entries")
    return s0


def linear_part(cfg):
    """``(M, B)`` with the Euler step of the known branches ``s' = M s + B u``.

    Row 2 (P4) of ``M`` is the identity row; the network increment is added on
    top. Exact because the ladder is linear.
    """
    jac_s, jac_u = retina_jacobian(cfg.params)
    m = np.eye(4) + cfg.dt * jac_s
    b = cfg.dt * jac_u
    m[2] = 0.0
    m[2, 2] = 1.0
    b[2] = 0.0
    return m, b


def estimate_meas_noise(ds, floor=1e-8):
    """Per-channel observation noise variance implied by the dataset's SNR.

    Uses only the noisy observables: their AC power is signal plus noise, so
    the noise share is ``power / (10**(snr/10) + 1)``.
    """
    if not ds.is_noisy or ds.snr_db is None or np.isinf(ds.snr_db):
        return np.full(len(OBSERVED), floor)
    y = ds.y_noisy
    power = ((y - y.mean(axis=0)) ** 2).mean(axis=0)
    return np.maximum(power / (10.0 ** (ds.snr_db / 10.0) + 1.0), floor)


def hybrid_dataset(weights, cfg, n_t, s0=None, t0=0.0):
    """Noise-free dataset whose 'truth' is the hybrid model itself.

    Drivers come from ``cfg.params.drivers``; ``s0`` defaults to the steady
    state under the first drivers.
    """
    from hybridckf.retina import TimeSeriesDataset

    drivers = cfg.params.drivers
    times = t0 + cfg.dt * np.arange(n_t)
    pin, pout = drivers.pin(times), drivers.pout(times)
    if s0 is None:
        s0 = steady_state(cfg.params, pin[0], pout[0])
    traj = rollout(weights, s0, np.column_stack([pin, pout]), cfg)
    return TimeSeriesDataset(dt=cfg.dt, times=times, pin=pin, pout=pout, p_true=traj)


def linearized_oracle_params(cfg, eps=1e-4):
    """Network that reproduces ``dt * F4`` up to O(eps^2) tanh curvature.

    Three hidden units work in tanh's linear regime, one per input; the rest
    are zero. Handy as known-good weights for self-consistency checks.
    """
    template = cfg.nn_template
    p = cfg.params
    # dt * F4 = a * P2 + b * P4 + c * P5
    coef = cfg.dt / p.c4 * np.array([1.0 / p.r_24, -(1.0 / p.r_24 + 1.0 / p.r_45), 1.0 / p.r_45])
    w1 = np.zeros((mlp.N_HIDDEN, mlp.N_INPUT))
    w2 = np.zeros(mlp.N_HIDDEN)
    for j in range(3):
        w1[j, j] = eps
        # unit j sees eps * gain_j * (x_j - offset_j)
        w2[j] = coef[j] / (eps * template.in_gain[j] * template.out_gain)
    b2 = float(coef @ template.in_offset) / template.out_gain
    return dataclasses.replace(template, w1=w1, b1=np.zeros(mlp.N_HIDDEN), w2=w2, b2=b2)
