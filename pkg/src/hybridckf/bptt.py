"""Backpropagation-through-time baseline with Adam.

The hybrid recursion is unrolled open-loop over a whole training sequence
(noisy drivers in, no measurement feedback) and the network weights are
fitted to the noisy observables by one Adam step per epoch on the exact
reverse-mode gradient.
"""

import dataclasses
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from hybridckf import mlp
from hybridckf.errors import Diverged
from hybridckf.metrics import nrmse
from hybridckf.retina import OBSERVED
from hybridckf.state_space import HybridModelConfig, initial_pressures, linear_part

logger = logging.getLogger(__name__)

_NN_INPUTS = [1, 2, 3]  # (P2, P4, P5) inside the pressure vector
MAX_BAD_EPOCHS = 10


@dataclass(frozen=True)
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step_count: int = 0
    lr: float = 5e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n, lr=5e-3):
        return cls(m=np.zeros(n), v=np.zeros(n), lr=lr)


def adam_step(state, omega, grad):
    """One bias-corrected Adam update; returns ``(new_state, new_omega)``."""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != np.shape(omega) or grad.shape != state.m.shape:
        raise ValueError("parameter, gradient and moment lengths differ")
    t = state.step_count + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    omega = omega - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return dataclasses.replace(state, m=m, v=v, step_count=t), omega


@dataclass(frozen=True)
class BpttConfig:
    """``truncation_window`` is ``"full"`` or the number of transitions a loss
    term is backpropagated through. ``train_initial_state`` also fits the
    initial pressures (known to work poorly; kept for reproducing that)."""

    epochs: int = 300
    truncation_window: object = "full"
    init_p4: object = "steady_state"
    lr: float = 5e-3
    seed: int = 0
    model: HybridModelConfig = field(default_factory=HybridModelConfig)
    train_initial_state: bool = False

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        tw = self.truncation_window
        if tw != "full" and not (isinstance(tw, int) and tw >= 0):
            raise ValueError("truncation_window must be 'full' or a nonnegative integer")

    def with_(self, **changes):
        return dataclasses.replace(self, **changes)


def rollout_start(ds, cfg):
    """Initial pressures: observed channels from y_0, P4 per ``cfg.init_p4``."""
    if isinstance(cfg.init_p4, str) and cfg.init_p4 == "steady_state":
        return initial_pressures(ds, cfg.model.params, "from_first_measurement")
    s0 = initial_pressures(ds, cfg.model.params, "from_first_measurement")
    s0[2] = float(cfg.init_p4)
    return s0


class _Unrolled:
    """Forward pass with the intermediates the backward pass needs."""

    def __init__(self, params, s0, inputs, model):
        m, b = linear_part(model)
        n_t = len(inputs)
        states = np.empty((n_t, 4))
        states[0] = s0
        s = np.asarray(s0, dtype=np.float64)
        w1, b1, w2 = params.w1, params.b1, params.w2
        off, gain, og, b2 = params.in_offset, params.in_gain, params.out_gain, params.b2
        hidden = np.empty((n_t, mlp.N_HIDDEN))
        scaled = np.empty((n_t, mlp.N_INPUT))
        drive = inputs @ b.T
        finite = True
        for k in range(n_t - 1):
            z = (s[_NN_INPUTS] - off) * gain
            h = np.tanh(w1 @ z + b1)
            scaled[k] = z
            hidden[k] = h
            s = m @ s + drive[k]
            s[2] += og * (w2 @ h + b2)
            states[k + 1] = s
            if not np.isfinite(s).all():
                finite = False
                break
        self.m = m
        self.states = states
        self.hidden = hidden
        self.scaled = scaled
        self.finite = finite and np.isfinite(states).all()


def _loss(states, ys):
    resid = states[:, list(OBSERVED)] - ys
    with np.errstate(over="ignore"):
        return float(np.mean(resid * resid)), resid


def unroll_loss(omega, ds, cfg, s0=None):
    """Mean squared error of the open-loop rollout against the noisy observables.

    Returns ``(loss, trajectory)``; a divergent rollout gives ``(inf, None)``.
    """
    params = mlp.unflatten(omega, cfg.model.nn_template)
    s0 = rollout_start(ds, cfg) if s0 is None else s0
    with np.errstate(over="ignore", invalid="ignore"):
        fwd = _Unrolled(params, s0, ds.inputs, cfg.model)
    if not fwd.finite:
        return math.inf, None
    loss, _ = _loss(fwd.states, ds.observations)
    if not math.isfinite(loss):
        return math.inf, None
    return loss, fwd.states


def _backward(params, fwd, resid, window, n_params):
    """Reverse accumulation; returns (d loss / d omega, d loss / d s0)."""
    n_t = len(fwd.states)
    scale = 2.0 / resid.size
    direct = np.zeros((n_t, 4))
    direct[:, list(OBSERVED)] = scale * resid
    grad = np.zeros(n_params)
    w1, w2, og, gain = params.w1, params.w2, params.out_gain, params.in_gain
    mt = fwd.m.T
    lam = np.zeros(4)
    if window == 0:
        return grad, np.zeros(4)
    for k in range(n_t - 1, 0, -1):
        lam = lam + direct[k]
        # transition k-1 -> k: NN evaluated at state k-1
        h = fwd.hidden[k - 1]
        g = lam[2] * og
        da = g * w2 * (1.0 - h * h)
        grad[: mlp.N_HIDDEN * mlp.N_INPUT] += np.outer(da, fwd.scaled[k - 1]).ravel()
        grad[mlp.N_HIDDEN * mlp.N_INPUT : mlp.N_HIDDEN * (mlp.N_INPUT + 1)] += da
        grad[mlp.N_HIDDEN * (mlp.N_INPUT + 1) : mlp.N_WEIGHTS - 1] += g * h
        grad[mlp.N_WEIGHTS - 1] += g
        same_chunk = k - 1 >= 1 and (k - 2) // window == (k - 1) // window
        if same_chunk or k - 1 == 0:
            back = mt @ lam
            back[_NN_INPUTS] += (w1.T @ da) * gain
            lam = back
        else:
            lam = np.zeros(4)
    lam = lam + direct[0]
    d_s0 = lam if (window is None or n_t - 1 <= window) else np.zeros(4)
    return grad, d_s0


def _window(cfg, n_t):
    tw = cfg.truncation_window
    return n_t if tw == "full" else int(tw)


def loss_and_gradient(omega, ds, cfg, s0=None):
    """``(loss, grad_omega, grad_s0, trajectory)`` for one unrolled sequence."""
    params = mlp.unflatten(omega, cfg.model.nn_template)
    s0 = rollout_start(ds, cfg) if s0 is None else np.asarray(s0, dtype=np.float64)
    with np.errstate(over="ignore", invalid="ignore"):
        fwd = _Unrolled(params, s0, ds.inputs, cfg.model)
    if not fwd.finite:
        return math.inf, None, None, None
    loss, resid = _loss(fwd.states, ds.observations)
    if not math.isfinite(loss):
        return math.inf, None, None, None
    grad, d_s0 = _backward(params, fwd, resid, _window(cfg, ds.n_t), mlp.N_WEIGHTS)
    return loss, grad, d_s0, fwd.states


def bptt_gradient(omega, ds, cfg):
    """Exact gradient of :func:`unroll_loss` with respect to the flat weights."""
    loss, grad, _, _ = loss_and_gradient(omega, ds, cfg)
    if not math.isfinite(loss):
        return np.full(mlp.N_WEIGHTS, np.nan)
    return grad


def open_loop_nrmse(params, ds, cfg):
    """NRMSE against true pressures of an open-loop rollout (no feedback)."""
    s0 = rollout_start(ds, cfg)
    with np.errstate(over="ignore", invalid="ignore"):
        fwd = _Unrolled(params, s0, ds.inputs, cfg.model)
    if not fwd.finite:
        return math.inf, None
    return nrmse(fwd.states, ds.p_true), fwd.states


@dataclass(eq=False)
class BpttResult:
    weights: mlp.MlpParams
    learning_curve: np.ndarray  # (epochs, 3): epoch, train_nrmse, test_nrmse
    losses: np.ndarray
    initial_state: np.ndarray


def bptt_train(ds, cfg, test_ds=None):
    """Full-batch BPTT from ``mlp_init(cfg.seed)``.

    Each epoch records the training NRMSE of the current weights (and the
    open-loop test NRMSE when ``test_ds`` is given) and then takes one Adam
    step. Epochs whose rollout diverges are skipped; ten in a row raise
    :class:`Diverged`.
    """
    template = cfg.model.nn_template
    omega = mlp.flatten(mlp.init_like(cfg.seed, template))
    s0 = rollout_start(ds, cfg)
    n_extra = 4 if cfg.train_initial_state else 0
    theta = np.concatenate([omega, s0]) if n_extra else omega
    adam = AdamState.zeros(len(theta), lr=cfg.lr)
    curve = np.full((cfg.epochs, 3), np.nan)
    losses = np.full(cfg.epochs, np.nan)
    bad = 0
    for epoch in range(cfg.epochs):
        w = theta[: mlp.N_WEIGHTS]
        start_state = theta[mlp.N_WEIGHTS :] if n_extra else s0
        loss, grad, d_s0, traj = loss_and_gradient(w, ds, cfg, s0=start_state)
        curve[epoch, 0] = epoch
        losses[epoch] = loss
        if not math.isfinite(loss):
            bad += 1
            curve[epoch, 1] = math.inf
            if bad >= MAX_BAD_EPOCHS:
                raise Diverged(f"{MAX_BAD_EPOCHS} consecutive divergent rollouts at epoch {epoch}")
            continue
        bad = 0
        curve[epoch, 1] = nrmse(traj, ds.p_true)
        if test_ds is not None:
            curve[epoch, 2], _ = open_loop_nrmse(mlp.unflatten(w, template), test_ds, cfg)
        full_grad = np.concatenate([grad, d_s0]) if n_extra else grad
        adam, theta = adam_step(adam, theta, full_grad)
    weights = mlp.unflatten(theta[: mlp.N_WEIGHTS], template)
    return BpttResult(
        weights=weights,
        learning_curve=curve,
        losses=losses,
        initial_state=theta[mlp.N_WEIGHTS :] if n_extra else s0,
    )
