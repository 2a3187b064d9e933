"""Hand-differentiated dense networks, a parameter registry with Adam, and a
central-difference gradient checker.

Modules own their parameter arrays and register the very same objects with a
:class:`ParamStore`; the optimizer updates them in place.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import NonFiniteGradientError, ShapeError, StateError

ACTIVATIONS = ("relu", "sigmoid", "tanh", "identity", "exp")


def sigmoid(x):
    # branchless and overflow-free
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def logit(p):
    return np.log(p) - np.log1p(-p)


def _act(kind, z):
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "sigmoid":
        return sigmoid(z)
    if kind == "tanh":
        return np.tanh(z)
    if kind == "exp":
        return np.exp(z)
    return z


def _act_grad(kind, z, a, g):
    if kind == "relu":
        return g * (z > 0)
    if kind == "sigmoid":
        return g * a * (1.0 - a)
    if kind == "tanh":
        return g * (1.0 - a * a)
    if kind == "exp":
        return g * a
    return g


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    lim = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=(fan_in, fan_out))


class DenseNet:
    """Stack of affine layers, each followed by its own activation.

    Parameters are named ``{name}.W{i}`` and ``{name}.b{i}``.
    """

    def __init__(self, name: str, widths, activations, rng: np.random.Generator,
                 zero_last: bool = False):
        widths = list(widths)
        if len(widths) < 2:
            raise ShapeError("need at least input and output width")
        if isinstance(activations, str):
            activations = [activations] * (len(widths) - 1)
        if len(activations) != len(widths) - 1:
            raise ShapeError("one activation per layer")
        for a in activations:
            if a not in ACTIVATIONS:
                raise ValueError(f"unknown activation {a!r}")
        self.name = name
        self.widths = widths
        self.activations = list(activations)
        self.params: dict[str, np.ndarray] = {}
        n = len(widths) - 1
        for i in range(n):
            if zero_last and i == n - 1:
                W = np.zeros((widths[i], widths[i + 1]))
            else:
                W = glorot(rng, widths[i], widths[i + 1])
            self.params[f"{name}.W{i}"] = W
            self.params[f"{name}.b{i}"] = np.zeros(widths[i + 1])

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1

    def W(self, i):
        return self.params[f"{self.name}.W{i}"]

    def b(self, i):
        return self.params[f"{self.name}.b{i}"]

    def forward(self, x: np.ndarray):
        """Returns ``(output, cache)``; ``x`` is (B, F_in)."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.widths[0]:
            raise ShapeError(f"{self.name}: expected (B, {self.widths[0]}), got {x.shape}")
        cache = [x]
        h = x
        for i in range(self.n_layers):
            z = h @ self.W(i) + self.b(i)
            h = _act(self.activations[i], z)
            cache.append((z, h))
        return h, cache

    def __call__(self, x):
        return self.forward(x)[0]

    def backward(self, cache, grad_out: np.ndarray):
        """Returns ``(param_grads, grad_input)``."""
        if not cache:
            raise StateError(f"{self.name}: backward without forward cache")
        grads = {}
        g = grad_out
        for i in reversed(range(self.n_layers)):
            z, a = cache[i + 1]
            h_in = cache[0] if i == 0 else cache[i][1]
            gz = _act_grad(self.activations[i], z, a, g)
            grads[f"{self.name}.W{i}"] = h_in.T @ gz
            grads[f"{self.name}.b{i}"] = gz.sum(axis=0)
            g = gz @ self.W(i).T
        return grads, g

    def register(self, store: "ParamStore", group: str = "net"):
        for k, v in self.params.items():
            store.register(k, v, group)
        return self


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0


class ParamStore:
    """Named trainable arrays with per-parameter Adam state and lr groups."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-15):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.params: dict[str, np.ndarray] = {}
        self.groups: dict[str, str] = {}
        self.state: dict[str, AdamState] = {}
        self.lr: dict[str, float] = {}

    def register(self, name: str, array: np.ndarray, group: str = "net") -> np.ndarray:
        if name in self.params:
            raise ValueError(f"parameter '{name}' registered twice")
        if array.dtype != np.float64:
            raise TypeError(f"parameter '{name}' must be float64")
        self.params[name] = array
        self.groups[name] = group
        self.state[name] = AdamState(np.zeros_like(array), np.zeros_like(array))
        return array

    def replace(self, name: str, array: np.ndarray, m=None, v=None, step=None):
        """Swap in a resized array (densification); optimizer state follows."""
        st = self.state[name]
        self.params[name] = array
        self.state[name] = AdamState(np.zeros_like(array) if m is None else m,
                                     np.zeros_like(array) if v is None else v,
                                     st.step if step is None else step)

    def __contains__(self, name):
        return name in self.params

    def __getitem__(self, name):
        return self.params[name]

    def names(self, group: str | None = None):
        return [k for k in self.params if group is None or self.groups[k] == group]

    def step(self, grads: dict[str, np.ndarray], lr_overrides: dict[str, float] | None = None):
        """One Adam update for every parameter present in ``grads``.

        ``lr_overrides`` maps a parameter name or group name to a learning
        rate; names take precedence. Raises before touching anything if any
        gradient is non-finite.
        """
        lr_overrides = lr_overrides or {}
        for name, g in grads.items():
            if name not in self.params:
                raise KeyError(name)
            if g.shape != self.params[name].shape:
                raise ShapeError(f"gradient shape {g.shape} != parameter '{name}' {self.params[name].shape}")
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradientError(name)
        b1, b2 = self.beta1, self.beta2
        for name in sorted(grads):
            g = grads[name]
            group = self.groups[name]
            lr = lr_overrides.get(name, lr_overrides.get(group, self.lr.get(group)))
            if lr is None:
                raise KeyError(f"no learning rate for group '{group}'")
            st = self.state[name]
            st.step += 1
            st.m *= b1
            st.m += (1 - b1) * g
            st.v *= b2
            st.v += (1 - b2) * g * g
            mhat = st.m / (1 - b1 ** st.step)
            vhat = st.v / (1 - b2 ** st.step)
            self.params[name] -= lr * mhat / (np.sqrt(vhat) + self.eps)


def cosine_lr(base: float, it: int, total: int, final_ratio: float = 0.1) -> float:
    if total <= 0:
        return base
    t = min(max(it / total, 0.0), 1.0)
    return base * (final_ratio + (1 - final_ratio) * 0.5 * (1 + math.cos(math.pi * t)))


def exp_lr(start: float, end: float, it: int, total: int) -> float:
    if total <= 0:
        return start
    t = min(max(it / total, 0.0), 1.0)
    return math.exp((1 - t) * math.log(start) + t * math.log(end))


@dataclass
class GradcheckReport:
    max_rel_err: float
    worst_param: str | None
    worst_index: tuple | None
    analytic: float
    numeric: float
    n_checked: int
    per_param: dict[str, float] = field(default_factory=dict)

    def passed(self, tol: float) -> bool:
        return self.max_rel_err < tol

    def __str__(self):
        return (f"max rel err {self.max_rel_err:.3e} at {self.worst_param}{list(self.worst_index or [])} "
                f"(analytic {self.analytic:.6e}, numeric {self.numeric:.6e}, {self.n_checked} entries)")


def gradcheck(fn: Callable[[], float], params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              h: float = 1e-5, floor: float = 1e-6, max_per_param: int | None = None,
              seed: int = 0) -> GradcheckReport:
    """Compare analytic gradients against central differences.

    ``fn`` re-evaluates the scalar objective reading ``params`` in place;
    entries are perturbed and restored one at a time. The relative error of
    an entry is ``|a - n| / max(|a|, |n|, floor)``. ``max_per_param`` limits
    the number of (randomly chosen) entries checked per array.
    """
    rng = np.random.default_rng(seed)
    worst = (0.0, None, None, 0.0, 0.0)
    per_param = {}
    count = 0
    for name, p in params.items():
        ga = grads[name]
        idx = list(np.ndindex(p.shape))
        if max_per_param is not None and len(idx) > max_per_param:
            pick = rng.choice(len(idx), size=max_per_param, replace=False)
            idx = [idx[i] for i in sorted(pick)]
        pmax = 0.0
        for ix in idx:
            old = p[ix]
            p[ix] = old + h
            fp = fn()
            p[ix] = old - h
            fm = fn()
            p[ix] = old
            num = (fp - fm) / (2 * h)
            a = float(ga[ix])
            err = abs(a - num) / max(abs(a), abs(num), floor)
            count += 1
            pmax = max(pmax, err)
            if err > worst[0] or worst[1] is None:
                worst = (err, name, ix, a, num)
        per_param[name] = pmax
    return GradcheckReport(worst[0], worst[1], worst[2], worst[3], worst[4], count, per_param)
