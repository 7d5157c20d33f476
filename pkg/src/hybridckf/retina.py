"""Five-compartment electric-analog model of the retinal circulation.

Compartments are the central retinal artery (P1), arterioles (P2),
capillaries (P3, folded into the series resistances), venules (P4) and the
central retinal vein (P5). Each node balance is

    C_i dP_i/dt = Q_in,i - Q_out,i,    Q = (P_upstream - P_downstream) / R

with a pulsatile inlet pressure ``pin`` and a constant outlet ``pout``.
Pressures are in mmHg, time in seconds.
"""

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from hybridckf.errors import NonFinite

#: Order of the pressure states everywhere in the package.
PRESSURE_LABELS = ("p1", "p2", "p4", "p5")
OBSERVED_LABELS = ("p1", "p2", "p5")
#: Indices of the observed pressures inside the 4-state pressure vector.
OBSERVED = (0, 1, 3)


@dataclass(frozen=True)
class DriverConfig:
    """Sinusoidal inlet pressure and constant outlet pressure."""

    pin_mean: float = 62.0
    pin_amplitude: float = 8.0
    pin_frequency: float = 1.0
    pout_mean: float = 14.0

    def __post_init__(self):
        if self.pin_amplitude < 0:
            raise ValueError("pin_amplitude must be nonnegative")
        if self.pin_frequency <= 0:
            raise ValueError("pin_frequency must be positive")
        if not self.pin_mean - self.pin_amplitude > self.pout_mean:
            raise ValueError("pin must exceed pout at all times")

    def pin(self, t):
        t = np.asarray(t, dtype=np.float64)
        return self.pin_mean + self.pin_amplitude * np.sin(2.0 * math.pi * self.pin_frequency * t)

    def pout(self, t):
        return np.full_like(np.asarray(t, dtype=np.float64), self.pout_mean)


@dataclass(frozen=True)
class RetinaParams:
    """Series resistances (mmHg s / flow) and node compliances (flow s / mmHg)."""

    r_in1: float = 0.8
    r_12: float = 1.2
    r_24: float = 2.0
    r_45: float = 1.0
    r_out5: float = 0.6
    c1: float = 0.05
    c2: float = 0.08
    c4: float = 0.12
    c5: float = 0.10
    drivers: DriverConfig = field(default_factory=DriverConfig)

    def __post_init__(self):
        for name in ("r_in1", "r_12", "r_24", "r_45", "r_out5", "c1", "c2", "c4", "c5"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be strictly positive")

    @property
    def resistances(self):
        return np.array([self.r_in1, self.r_12, self.r_24, self.r_45, self.r_out5])

    def scaled(self, compliance_factor=1.0):
        """Copy with every compliance multiplied by ``compliance_factor``."""
        return dataclasses.replace(
            self,
            c1=self.c1 * compliance_factor,
            c2=self.c2 * compliance_factor,
            c4=self.c4 * compliance_factor,
            c5=self.c5 * compliance_factor,
        )

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        drivers = DriverConfig(**data.pop("drivers", {}))
        return cls(drivers=drivers, **data)


@dataclass(frozen=True)
class TimeSeriesDataset:
    """Uniformly sampled drivers, true pressures and (optionally) noisy copies.

    ``p_true`` holds (P1, P2, P4, P5) column-wise; ``y_noisy`` holds the
    noisy observables (P1, P2, P5). Noise-free datasets carry ``None`` in the
    noisy fields and ``snr_db=None``.
    """

    dt: float
    times: np.ndarray
    pin: np.ndarray
    pout: np.ndarray
    p_true: np.ndarray
    pin_noisy: np.ndarray = None
    pout_noisy: np.ndarray = None
    y_noisy: np.ndarray = None
    snr_db: float = None
    seed: int = None

    def __post_init__(self):
        n = len(self.times)
        if n < 2:
            raise ValueError("a dataset needs at least two samples")
        if self.p_true.shape != (n, 4):
            raise ValueError("p_true must have shape (n_t, 4)")
        for name in ("pin", "pout", "pin_noisy", "pout_noisy"):
            value = getattr(self, name)
            if value is not None and value.shape != (n,):
                raise ValueError(f"{name} must have shape (n_t,)")
        if self.y_noisy is not None and self.y_noisy.shape != (n, 3):
            raise ValueError("y_noisy must have shape (n_t, 3)")

    @property
    def n_t(self):
        return len(self.times)

    @property
    def is_noisy(self):
        return self.y_noisy is not None

    @property
    def y_clean(self):
        return self.p_true[:, OBSERVED]

    @property
    def inputs(self):
        """Drivers seen by an estimator: the noisy ones when present."""
        if self.is_noisy:
            return np.column_stack([self.pin_noisy, self.pout_noisy])
        return np.column_stack([self.pin, self.pout])

    @property
    def observations(self):
        return self.y_noisy if self.is_noisy else self.y_clean

    def window(self, start, stop):
        """Sub-dataset over sample indices ``[start, stop)``."""
        sl = slice(start, stop)
        pick = lambda a: None if a is None else a[sl].copy()
        return TimeSeriesDataset(
            dt=self.dt,
            times=self.times[sl].copy(),
            pin=self.pin[sl].copy(),
            pout=self.pout[sl].copy(),
            p_true=self.p_true[sl].copy(),
            pin_noisy=pick(self.pin_noisy),
            pout_noisy=pick(self.pout_noisy),
            y_noisy=pick(self.y_noisy),
            snr_db=self.snr_db,
            seed=self.seed,
        )


def retina_derivatives(p, pin, pout, params):
    """Pressure rates (dP1, dP2, dP4, dP5)/dt of the RC ladder.

    ``p`` may be a single 4-vector or an ``(n, 4)`` batch; ``pin``/``pout``
    broadcast against the batch.
    """
    p = np.asarray(p, dtype=np.float64)
    p1, p2, p4, p5 = p[..., 0], p[..., 1], p[..., 2], p[..., 3]
    q_in = (pin - p1) / params.r_in1
    q_12 = (p1 - p2) / params.r_12
    q_24 = (p2 - p4) / params.r_24
    q_45 = (p4 - p5) / params.r_45
    q_out = (p5 - pout) / params.r_out5
    return np.stack(
        [
            (q_in - q_12) / params.c1,
            (q_12 - q_24) / params.c2,
            (q_24 - q_45) / params.c4,
            (q_45 - q_out) / params.c5,
        ],
        axis=-1,
    )


def branch_flows(p, pin, pout, params):
    """The five series flows (inlet, 1-2, 2-4, 4-5, outlet)."""
    p1, p2, p4, p5 = np.asarray(p, dtype=np.float64)
    return np.array(
        [
            (pin - p1) / params.r_in1,
            (p1 - p2) / params.r_12,
            (p2 - p4) / params.r_24,
            (p4 - p5) / params.r_45,
            (p5 - pout) / params.r_out5,
        ]
    )


def steady_state(params, pin, pout):
    """Fixed point of the ladder for constant drivers (a resistor divider)."""
    r = params.resistances
    q = (pin - pout) / r.sum()
    p1 = pin - q * params.r_in1
    p2 = p1 - q * params.r_12
    p4 = p2 - q * params.r_24
    p5 = p4 - q * params.r_45
    return np.array([p1, p2, p4, p5])


def _euler_step(p, t, dt, params):
    d = params.drivers
    return p + dt * retina_derivatives(p, d.pin(t), d.pout(t), params)


def _rk4_step(p, t, dt, params):
    d = params.drivers
    f = lambda tt, pp: retina_derivatives(pp, d.pin(tt), d.pout(tt), params)
    k1 = f(t, p)
    k2 = f(t + 0.5 * dt, p + 0.5 * dt * k1)
    k3 = f(t + 0.5 * dt, p + 0.5 * dt * k2)
    k4 = f(t + dt, p + dt * k3)
    return p + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


_STEPPERS = {"euler": _euler_step, "rk4": _rk4_step}


def simulate_ground_truth(params, dt, n_t, method="rk4", initial="steady", t0=0.0):
    """Integrate the full retina model on a uniform grid of ``n_t`` samples.

    ``initial`` is a 4-vector or ``"steady"`` (fixed point under the drivers
    at ``t0``). The drivers are evaluated analytically, so RK4 sees the true
    mid-step inlet pressure.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    if n_t < 2:
        raise ValueError("n_t must be at least 2")
    try:
        step = _STEPPERS[method]
    except KeyError:
        raise ValueError(f"unknown integrator {method!r}") from None
    times = t0 + dt * np.arange(n_t)
    drivers = params.drivers
    if isinstance(initial, str):
        if initial != "steady":
            raise ValueError(f"unknown initial condition {initial!r}")
        p = steady_state(params, float(drivers.pin(t0)), drivers.pout_mean)
    else:
        p = np.array(initial, dtype=np.float64)
    out = np.empty((n_t, 4))
    out[0] = p
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(1, n_t):
            p = step(p, times[k - 1], dt, params)
            if not np.all(np.isfinite(p)):
                raise NonFinite(f"state became non-finite at step {k}; dt={dt} is too large")
            out[k] = p
    return TimeSeriesDataset(
        dt=dt,
        times=times,
        pin=drivers.pin(times),
        pout=drivers.pout(times),
        p_true=out,
    )


def ac_power(x):
    """Mean squared deviation from the time mean."""
    x = np.asarray(x, dtype=np.float64)
    return float(np.mean((x - x.mean()) ** 2))


def inject_noise(ds, snr_db, seed):
    """Add white Gaussian noise to pin, pout, P1, P2 and P5 at ``snr_db``.

    Each channel gets variance ``ac_power / 10**(snr_db/10)`` from its own
    substream of ``seed``. A channel with no AC power (the constant outlet)
    gets the mean standard deviation of the channels that have one.
    ``snr_db=None`` or ``inf`` returns noise-free copies.
    """
    if ds.is_noisy:
        raise ValueError("dataset already carries noise")
    clean = [ds.pin, ds.pout, ds.p_true[:, 0], ds.p_true[:, 1], ds.p_true[:, 3]]
    if snr_db is None or math.isinf(snr_db):
        sigmas = np.zeros(len(clean))
        snr_db = math.inf
    else:
        powers = np.array([ac_power(c) for c in clean])
        sigmas = np.sqrt(powers / 10.0 ** (snr_db / 10.0))
        silent = powers == 0.0
        if silent.all():
            raise ValueError("no channel has AC power; SNR is undefined")
        sigmas[silent] = sigmas[~silent].mean()
    streams = np.random.SeedSequence(seed).spawn(len(clean))
    noisy = [
        c + s * np.random.default_rng(ss).standard_normal(c.shape)
        for c, s, ss in zip(clean, sigmas, streams)
    ]
    return dataclasses.replace(
        ds,
        p_true=ds.p_true.copy(),
        pin_noisy=noisy[0],
        pout_noisy=noisy[1],
        y_noisy=np.column_stack(noisy[2:]),
        snr_db=float(snr_db),
        seed=seed,
    )


def make_train_test(params, dt, train_seconds, test_seconds, snr_db, train_seed, test_seed, method="rk4"):
    """One continuous RK4 trajectory split into noisy train and test datasets.

    The test segment starts where training ends, so the test filter sees an
    unseen stretch of the same physiology.
    """
    n_train = int(round(train_seconds / dt))
    n_test = int(round(test_seconds / dt))
    full = simulate_ground_truth(params, dt, n_train + n_test, method=method)
    train = inject_noise(full.window(0, n_train), snr_db, train_seed)
    test = inject_noise(full.window(n_train, n_train + n_test), snr_db, test_seed)
    return train, test


def retina_jacobian(params):
    """Constant partials of :func:`retina_derivatives`: ``(d/dp (4x4), d/d(pin, pout) (4x2))``."""
    g_in, g_12, g_24, g_45, g_out = 1.0 / params.resistances
    c = np.array([params.c1, params.c2, params.c4, params.c5])
    jac_s = np.array(
        [
            [-(g_in + g_12), g_12, 0.0, 0.0],
            [g_12, -(g_12 + g_24), g_24, 0.0],
            [0.0, g_24, -(g_24 + g_45), g_45],
            [0.0, 0.0, g_45, -(g_45 + g_out)],
        ]
    ) / c[:, None]
    jac_u = np.array([[g_in, 0.0], [0.0, 0.0], [0.0, 0.0], [0.0, g_out]]) / c[:, None]
    return jac_s, jac_u
