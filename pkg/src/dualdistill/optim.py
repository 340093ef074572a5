"""LAMB and Adam over named numpy parameters.

LAMB variant used here, per tensor::

    m = b1 m + (1 - b1) g ;  v = b2 v + (1 - b2) g^2
    u = m_hat / (sqrt(v_hat) + eps) + wd * theta
    phi = clip(||theta|| / ||u||, 0, max_trust)   (1 if either norm is 0)
    theta -= lr * phi * u

Rank-1 tensors (biases, layer-norm gains and shifts) get no weight decay.
"""

from __future__ import annotations

import dataclasses
from collections.abc import Mapping
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, WorkbenchError
from .tensor import Tensor


@dataclass
class OptimConfig:
    algorithm: str = "lamb"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-6
    weight_decay: float = 0.01
    max_trust: float = 10.0
    warmup_fraction: float = 0.1

    def __post_init__(self):
        if self.algorithm not in ("lamb", "adam"):
            raise ConfigError("bad-config", f"unknown optimizer {self.algorithm!r}")
        if self.lr < 0 or not 0 <= self.beta1 < 1 or not 0 <= self.beta2 < 1:
            raise ConfigError("bad-config", "optimizer hyperparameters out of range")

    @classmethod
    def from_dict(cls, d: Mapping) -> OptimConfig:
        known = {f.name for f in dataclasses.fields(cls)}
        if set(d) - known:
            raise ConfigError("bad-config", f"unknown optim keys {sorted(set(d) - known)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class OptimState:
    config: OptimConfig = field(default_factory=OptimConfig)
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0
    last_trust: dict[str, float] = field(default_factory=dict)


def decays(arr: np.ndarray) -> bool:
    return arr.ndim >= 2


def _moments(name, theta, g, state):
    c = state.config
    if name not in state.m:
        state.m[name] = np.zeros_like(theta)
        state.v[name] = np.zeros_like(theta)
    m, v = state.m[name], state.v[name]
    if m.shape != theta.shape:
        raise WorkbenchError("shape-mismatch", f"optimizer state for {name} has wrong shape")
    m *= c.beta1
    m += (1 - c.beta1) * g
    v *= c.beta2
    v += (1 - c.beta2) * (g * g)
    m_hat = m / (1 - c.beta1**state.t)
    v_hat = v / (1 - c.beta2**state.t)
    return m_hat, v_hat


def _direction(name, theta, g, state):
    c = state.config
    m_hat, v_hat = _moments(name, theta, g, state)
    u = m_hat / (np.sqrt(v_hat) + c.eps)
    if c.weight_decay and decays(theta):
        u = u + c.weight_decay * theta
    return u


def trust_ratio(theta: np.ndarray, update: np.ndarray, max_trust: float = 10.0) -> float:
    w = float(np.linalg.norm(theta))
    u = float(np.linalg.norm(update))
    if w == 0.0 or u == 0.0:
        return 1.0
    return min(max(w / u, 0.0), max_trust)


def _check_grads(grads):
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise WorkbenchError("non-finite-grad", name)


def _as_array(p):
    return p.data if isinstance(p, Tensor) else p


def lamb_step(
    params: Mapping[str, Tensor | np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: OptimState,
    lr: float | None = None,
    use_trust_ratio: bool = True,
) -> OptimState:
    """One in-place LAMB update of every parameter that has a gradient."""
    _check_grads(grads)
    lr = state.config.lr if lr is None else lr
    state.t += 1
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        theta = _as_array(p)
        u = _direction(name, theta, g.astype(theta.dtype, copy=False), state)
        phi = trust_ratio(theta, u, state.config.max_trust) if use_trust_ratio else 1.0
        state.last_trust[name] = phi
        theta -= (lr * phi) * u
    return state


def adam_step(
    params: Mapping[str, Tensor | np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: OptimState,
    lr: float | None = None,
) -> OptimState:
    """Bias-corrected Adam with decoupled weight decay (same exclusions as LAMB)."""
    _check_grads(grads)
    c = state.config
    lr = c.lr if lr is None else lr
    state.t += 1
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        theta = _as_array(p)
        m_hat, v_hat = _moments(name, theta, g.astype(theta.dtype, copy=False), state)
        if c.weight_decay and decays(theta):
            theta -= lr * c.weight_decay * theta
        theta -= lr * m_hat / (np.sqrt(v_hat) + c.eps)
    return state


def step(params, grads, state: OptimState, lr: float | None = None) -> OptimState:
    if state.config.algorithm == "adam":
        return adam_step(params, grads, state, lr)
    return lamb_step(params, grads, state, lr)


def collect_grads(params: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    return {n: t.grad for n, t in params.items() if t.grad is not None}


def linear_warmup_decay(step_idx: int, total_steps: int, peak_lr: float,
                        warmup_fraction: float = 0.1) -> float:
    """Learning rate for 1-based ``step_idx``: linear warmup, then linear decay to 0."""
    warmup = max(1, int(round(warmup_fraction * total_steps))) if warmup_fraction > 0 else 0
    if warmup and step_idx <= warmup:
        return peak_lr * step_idx / warmup
    remaining = total_steps - warmup
    if remaining <= 0:
        return peak_lr
    return peak_lr * max(0.0, (total_steps - step_idx + 1) / remaining)
