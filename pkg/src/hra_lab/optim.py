"""Gradient-descent updates over named parameter stores, with freeze masks."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NumericError

Array = np.ndarray


@dataclass
class OptimizerState:
    """SGD or Adam state; moment tensors are keyed like the parameters."""

    kind: str
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, Array] = field(default_factory=dict)
    v: dict[str, Array] = field(default_factory=dict)


def make_optimizer(kind: str = "adam", lr: float = 1e-3, beta1: float = 0.9,
                   beta2: float = 0.999, eps: float = 1e-8) -> OptimizerState:
    if kind not in ("sgd", "adam"):
        raise ConfigError(f"optimizer.kind must be 'sgd' or 'adam', got {kind!r}")
    return OptimizerState(kind=kind, lr=lr, beta1=beta1, beta2=beta2, eps=eps)


def freeze_by_prefix(params: dict[str, Array], *prefixes: str) -> frozenset[str]:
    """Names of parameters whose path starts with any of the prefixes."""
    return frozenset(n for n in params if any(n.startswith(p) for p in prefixes))


def optimizer_step(params: dict[str, Array], grads: dict[str, Array],
                   opt: OptimizerState, freeze: frozenset[str] = frozenset()) -> None:
    """Apply one update in place; frozen names are left untouched entirely.

    Raises :class:`NumericError` (naming the parameter and step index) if a
    gradient carries non-finite values, before anything is modified.
    """
    names = sorted(params)
    for name in names:
        if name in freeze:
            continue
        g = grads.get(name)
        if g is None:
            raise ConfigError(f"missing gradient for parameter {name!r}")
        if np.asarray(g).shape != params[name].shape:
            raise ConfigError(
                f"gradient shape {np.asarray(g).shape} != parameter shape "
                f"{params[name].shape} for {name!r}")
        if not np.all(np.isfinite(g)):
            raise NumericError(
                f"non-finite gradient for {name!r} at step {opt.step}")

    opt.step += 1
    for name in names:
        if name in freeze:
            continue
        p = params[name]
        g = np.asarray(grads[name], dtype=np.float64)
        if opt.kind == "sgd":
            p -= opt.lr * g
            continue
        m = opt.m.get(name)
        if m is None:
            m = opt.m[name] = np.zeros_like(p)
            opt.v[name] = np.zeros_like(p)
        v = opt.v[name]
        m *= opt.beta1
        m += (1.0 - opt.beta1) * g
        v *= opt.beta2
        v += (1.0 - opt.beta2) * g * g
        m_hat = m / (1.0 - opt.beta1**opt.step)
        v_hat = v / (1.0 - opt.beta2**opt.step)
        p -= opt.lr * m_hat / (np.sqrt(v_hat) + opt.eps)
