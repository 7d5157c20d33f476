"""Third-degree cubature Kalman filter over the weight-augmented hybrid model.

Gaussian integrals are approximated with the 2d points ``mu + sqrt(d) L e_i``
and ``mu - sqrt(d) L e_i`` (``L`` the lower Cholesky factor of the
covariance), all weighted ``1/(2d)``. Training filters the 105-dimensional
state (weights and pressures); testing freezes the weights inside the
transition and filters the 4 pressures only.
"""

import dataclasses
import logging
from dataclasses import dataclass, field

import numpy as np

from hybridckf import mlp
from hybridckf.errors import Diverged, NonFinite, NotPositiveDefinite, SingularInnovation
from hybridckf.gaussian_core import DEFAULT_JITTER, cholesky, stabilize
from hybridckf.metrics import windowed_nrmse
from hybridckf import state_space
from hybridckf.retina import OBSERVED
from hybridckf.state_space import (
    DIM,
    LAYOUT,
    HybridModelConfig,
    assemble,
    hybrid_transition_batch,
    measurement_matrix,
    split,
    step_pressures,
)

logger = logging.getLogger(__name__)

DIVERGENCE_BOUND = 500.0  # mmHg


@dataclass(frozen=True, eq=False)
class GaussianBelief:
    mean: np.ndarray
    cov: np.ndarray

    @property
    def dim(self):
        return len(self.mean)


@dataclass(frozen=True, eq=False)
class CubatureSet:
    points: np.ndarray  # (2d, d)
    weight: float
    rung: int = 0  # jitter rung needed to factor the covariance


@dataclass(frozen=True)
class FilterConfig:
    """Filter settings around a :class:`HybridModelConfig`.

    ``init_pressures`` is ``"from_first_measurement"`` (observed channels from
    y_0, P4 placed between P2 and P5 at its steady-state fraction),
    ``"steady_state"`` or an explicit 4-vector. ``test_q_p4`` replaces the
    P4 process noise in :func:`ckf_test`, where the network is no longer
    adapted; ``None`` keeps the training value.
    """

    model: HybridModelConfig = field(default_factory=HybridModelConfig)
    init_weight_var: float = 0.3**2
    init_pressure_var: float = 5.0**2
    init_pressures: object = "from_first_measurement"
    jitter_base: float = DEFAULT_JITTER
    linear_update: bool = True
    window: int = 50
    # frozen-weight filter: process noise on P4 stands in for network error
    test_q_p4: float = 1e-2

    def __post_init__(self):
        if not (self.init_weight_var > 0 and self.init_pressure_var > 0):
            raise ValueError("initial variances must be positive")
        if self.window < 1:
            raise ValueError("window must be at least one step")

    def with_(self, **changes):
        return dataclasses.replace(self, **changes)

    def with_model(self, **changes):
        return dataclasses.replace(self, model=dataclasses.replace(self.model, **changes))


@dataclass(eq=False)
class FilterResult:
    """Per-step posterior pressure means/variances and diagnostics."""

    times: np.ndarray
    means: np.ndarray  # (n_t, 4)
    variances: np.ndarray  # (n_t, 4)
    innovations: np.ndarray  # (n_t, 3), row 0 is the initializing residual (zero)
    learning_curve: np.ndarray  # (n_t,) windowed NRMSE against ground truth
    weights: mlp.MlpParams = None
    max_rung: int = 0


def cubature_points(belief, jitter_base=DEFAULT_JITTER):
    d = belief.dim
    _, factor, rung = stabilize(belief.cov, jitter_base)
    spread = np.sqrt(d) * factor.T  # row i is sqrt(d) * L e_i
    points = np.concatenate([belief.mean + spread, belief.mean - spread])
    return CubatureSet(points=points, weight=1.0 / (2 * d), rung=rung)


def _point_statistics(values, points, weight):
    mean = weight * values.sum(axis=0)
    dv = values - mean
    dp = points - weight * points.sum(axis=0)
    return mean, weight * dv.T @ dv, weight * dp.T @ dv


def cubature_expectation(fn, belief, jitter_base=DEFAULT_JITTER):
    """Cubature estimates of ``E[fn(x)]``, ``Cov[fn(x)]`` and ``Cov[x, fn(x)]``.

    ``fn`` maps a d-vector to a vector (or scalar) and is evaluated once per
    cubature point.
    """
    cs = cubature_points(belief, jitter_base)
    values = np.array([np.atleast_1d(fn(p)) for p in cs.points], dtype=np.float64)
    if not np.all(np.isfinite(values)):
        raise NonFinite("function is non-finite at a cubature point")
    return _point_statistics(values, cs.points, cs.weight)


def predict(posterior, transition, q_diag, jitter_base=DEFAULT_JITTER):
    """Time update for a batch transition ``(n, d) -> (n, d)``; returns (prior, rung)."""
    cs = cubature_points(posterior, jitter_base)
    propagated = transition(cs.points)
    if not np.all(np.isfinite(propagated)):
        raise NonFinite("transition is non-finite at a cubature point")
    mean = cs.weight * propagated.sum(axis=0)
    dev = propagated - mean
    cov = cs.weight * dev.T @ dev
    cov[np.diag_indices_from(cov)] += q_diag
    return GaussianBelief(mean, cov), cs.rung


def update_linear(prior, y, h, r, jitter_base=DEFAULT_JITTER):
    """Exact measurement update for ``y = H x + noise(R)``.

    Returns ``(posterior, innovation, rung)``.
    """
    y_hat = h @ prior.mean
    pxy = prior.cov @ h.T
    syy = h @ pxy + r
    gain = _gain(pxy, syy)
    innovation = y - y_hat
    mean = prior.mean + gain @ innovation
    cov = prior.cov - gain @ syy @ gain.T
    stable, _, rung = stabilize(cov, jitter_base)
    return GaussianBelief(mean, stable), innovation, rung


def update_cubature(prior, y, h_fn, r, jitter_base=DEFAULT_JITTER):
    """Measurement update with point-propagated moments for a nonlinear ``h``.

    ``h_fn`` maps an (n, d) batch to (n, m).
    """
    cs = cubature_points(prior, jitter_base)
    values = h_fn(cs.points)
    y_hat, pyy, pxy = _point_statistics(values, cs.points, cs.weight)
    syy = pyy + r
    gain = _gain(pxy, syy)
    innovation = y - y_hat
    mean = prior.mean + gain @ innovation
    cov = prior.cov - gain @ syy @ gain.T
    stable, _, rung = stabilize(cov, jitter_base)
    return GaussianBelief(mean, stable), innovation, max(rung, cs.rung)


def _gain(pxy, syy):
    try:
        factor = cholesky(0.5 * (syy + syy.T))
    except NotPositiveDefinite:
        raise SingularInnovation("innovation covariance is not positive definite") from None
    if np.linalg.cond(factor) > 1e8:
        raise SingularInnovation("innovation covariance is numerically singular")
    # K = Pxy S^-1, solved through the Cholesky factor of S
    tmp = np.linalg.solve(factor, pxy.T)
    return np.linalg.solve(factor.T, tmp).T


def _augmented_h():
    return measurement_matrix()


def _pressure_h():
    h = np.zeros((len(OBSERVED), 4))
    h[np.arange(len(OBSERVED)), list(OBSERVED)] = 1.0
    return h


def ckf_predict(posterior, u, cfg):
    """Time update of an augmented (105) or pressure-only (4) belief.

    Pressure-only beliefs need frozen weights and are handled by
    :func:`ckf_test`; here the dimension must be the augmented one.
    """
    model = cfg.model
    if posterior.dim != DIM:
        raise ValueError(f"ckf_predict expects a {DIM}-dimensional belief")
    prior, _ = predict(
        posterior,
        lambda pts: hybrid_transition_batch(pts, u, model),
        model.process_noise(),
        cfg.jitter_base,
    )
    return prior


def ckf_update(prior, y, cfg):
    """Measurement update with the zero/one selection of (P1, P2, P5)."""
    h = _augmented_h() if prior.dim == DIM else _pressure_h()
    r = cfg.model.measurement_noise()
    if cfg.linear_update:
        posterior, innovation, _ = update_linear(prior, y, h, r, cfg.jitter_base)
    else:
        posterior, innovation, _ = update_cubature(prior, y, lambda pts: pts @ h.T, r, cfg.jitter_base)
    return posterior, innovation


def initial_pressures(ds, cfg):
    """Starting pressure mean per ``cfg.init_pressures``."""
    return state_space.initial_pressures(ds, cfg.model.params, cfg.init_pressures)


def _check_bounds(mean_pressures, k):
    if not np.all(np.abs(mean_pressures) <= DIVERGENCE_BOUND):
        raise Diverged(f"pressure estimate left [-{DIVERGENCE_BOUND}, {DIVERGENCE_BOUND}] mmHg at step {k}")


def _run(ds, belief, step_fn, h, cfg, pressure_slice):
    """Shared predict/update loop; ``step_fn(points, u)`` is the batch transition."""
    n_t = ds.n_t
    inputs = ds.inputs
    ys = ds.observations
    r = cfg.model.measurement_noise()
    q = cfg.model.process_noise(with_weights=belief.dim == DIM)
    means = np.empty((n_t, 4))
    variances = np.empty((n_t, 4))
    innovations = np.zeros((n_t, len(OBSERVED)))
    means[0] = belief.mean[pressure_slice]
    variances[0] = np.diag(belief.cov)[pressure_slice]
    max_rung = 0
    for k in range(1, n_t):
        u = inputs[k - 1]
        prior, rung_p = predict(belief, lambda pts: step_fn(pts, u), q, cfg.jitter_base)
        if cfg.linear_update:
            belief, innovation, rung_u = update_linear(prior, ys[k], h, r, cfg.jitter_base)
        else:
            belief, innovation, rung_u = update_cubature(
                prior, ys[k], lambda pts: pts @ h.T, r, cfg.jitter_base
            )
        max_rung = max(max_rung, rung_p, rung_u)
        means[k] = belief.mean[pressure_slice]
        variances[k] = np.diag(belief.cov)[pressure_slice]
        innovations[k] = innovation
        _check_bounds(means[k], k)
    if max_rung > 2:
        logger.warning("covariance repair escalated to jitter rung %d", max_rung)
    curve = windowed_nrmse(means, ds.p_true, cfg.window)
    return belief, FilterResult(
        times=ds.times.copy(),
        means=means,
        variances=variances,
        innovations=innovations,
        learning_curve=curve,
        max_rung=max_rung,
    )


def initial_belief(ds, cfg, weights):
    s0 = initial_pressures(ds, cfg)
    w0 = mlp.flatten(weights)
    cov = np.diag(
        np.concatenate(
            [np.full(LAYOUT.n_weights, cfg.init_weight_var), np.full(4, cfg.init_pressure_var)]
        )
    )
    return GaussianBelief(assemble(w0, s0), cov)


def ckf_train(ds, cfg, seed=0, init_params=None):
    """Filter the augmented state over a training dataset.

    Weight means start at ``init_params`` or at ``mlp_init(seed)`` with the
    scaling of ``cfg.model.nn_template``. Returns a :class:`FilterResult`
    whose ``weights`` are the final posterior weight means.
    """
    model = cfg.model
    template = model.nn_template
    if init_params is None:
        init_params = mlp.init_like(seed, template)
    belief = initial_belief(ds, cfg, init_params)
    belief, result = _run(
        ds,
        belief,
        lambda pts, u: hybrid_transition_batch(pts, u, model),
        _augmented_h(),
        cfg,
        LAYOUT.pressures,
    )
    w_final, _ = split(belief.mean)
    result.weights = mlp.unflatten(w_final, template)
    return result


def ckf_test(ds, weights, cfg):
    """Pressure-only filter with the network frozen at ``weights``."""
    model = cfg.model
    if cfg.test_q_p4 is not None:
        q_s = model.process_noise(with_weights=False)
        q_s[2] = cfg.test_q_p4
        model = dataclasses.replace(model, q_s=q_s)
        cfg = dataclasses.replace(cfg, model=model)
    s0 = initial_pressures(ds, cfg)
    belief = GaussianBelief(s0, np.eye(4) * cfg.init_pressure_var)

    def transition(pts, u):
        out = step_pressures(pts, weights, u, model)
        if not np.all(np.isfinite(out)):
            raise NonFinite("pressure transition produced a non-finite state")
        return out

    _, result = _run(ds, belief, transition, _pressure_h(), cfg, slice(0, 4))
    result.weights = weights
    return result
