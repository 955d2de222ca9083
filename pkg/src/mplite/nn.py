"""Small, deterministic numpy kernels used by every model in the package.

Everything here works in float64 and on batches: a "vector" input may be a
1-D array of shape ``(d,)`` or a 2-D array of shape ``(n, d)``.  Backward
functions mirror the shape of whatever the matching forward received.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import numpy as np

BCE_CLAMP = 1e-12

ACTIVATIONS = ("sigmoid", "relu", "tanh", "identity")


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Seeded PCG64 generator; extra integers select an independent stream."""
    return np.random.default_rng([int(seed), *map(int, stream)])


def sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so large negative inputs do not overflow exp
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _activate(z: np.ndarray, activation: str) -> np.ndarray:
    if activation == "sigmoid":
        return sigmoid(z)
    if activation == "relu":
        return np.maximum(z, 0.0)
    if activation == "tanh":
        return np.tanh(z)
    if activation == "identity":
        return z.copy()
    raise ValueError(f"unknown activation {activation!r}")


def _activation_grad(z: np.ndarray, y: np.ndarray, dy: np.ndarray, activation: str) -> np.ndarray:
    if activation == "sigmoid":
        return dy * y * (1.0 - y)
    if activation == "relu":
        return dy * (z > 0)
    if activation == "tanh":
        return dy * (1.0 - y * y)
    return dy


def glorot_uniform(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_out, fan_in))


# --------------------------------------------------------------------------
# Dense
# --------------------------------------------------------------------------


@dataclass
class DenseLayer:
    """Fully connected layer ``y = act(W x + b)`` with ``W`` of shape (out, in)."""

    W: np.ndarray
    b: np.ndarray
    activation: str = "identity"

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        if self.W.ndim != 2 or self.b.shape != (self.W.shape[0],):
            raise ValueError(f"inconsistent dense shapes W{self.W.shape} b{self.b.shape}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @classmethod
    def init(cls, in_dim: int, out_dim: int, activation: str, rng: np.random.Generator) -> "DenseLayer":
        return cls(glorot_uniform(rng, out_dim, in_dim), np.zeros(out_dim), activation)

    @classmethod
    def zeros(cls, in_dim: int, out_dim: int, activation: str) -> "DenseLayer":
        return cls(np.zeros((out_dim, in_dim)), np.zeros(out_dim), activation)

    @property
    def in_dim(self) -> int:
        return self.W.shape[1]

    @property
    def out_dim(self) -> int:
        return self.W.shape[0]

    def params(self) -> dict[str, np.ndarray]:
        return {"W": self.W, "b": self.b}


@dataclass
class DenseCache:
    W: np.ndarray
    x: np.ndarray
    z: np.ndarray
    y: np.ndarray
    activation: str


def dense_forward(layer: DenseLayer, x: np.ndarray) -> tuple[np.ndarray, DenseCache]:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != layer.in_dim:
        raise ValueError(f"dense input has {x.shape[-1]} features, layer expects {layer.in_dim}")
    z = x @ layer.W.T + layer.b
    y = _activate(z, layer.activation)
    return y, DenseCache(layer.W, x, z, y, layer.activation)


def dense_backward(cache: DenseCache, dy: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return ``(dx, dW, db)`` for the forward call that produced ``cache``."""
    dy = np.asarray(dy, dtype=np.float64)
    if dy.shape != cache.y.shape:
        raise ValueError(f"upstream gradient shape {dy.shape} != output shape {cache.y.shape}")
    dz = _activation_grad(cache.z, cache.y, dy, cache.activation)
    x2 = cache.x.reshape(-1, cache.x.shape[-1])
    dz2 = dz.reshape(-1, dz.shape[-1])
    dW = dz2.T @ x2
    db = dz2.sum(axis=0)
    dx = dz @ cache.W
    return dx, dW, db


# --------------------------------------------------------------------------
# GRU
# --------------------------------------------------------------------------


@dataclass
class GRULayer:
    """Gated recurrent unit.

    Gates, per step::

        z  = sigmoid(Wz x + Uz h + bz)          update
        r  = sigmoid(Wr x + Ur h + br)          reset
        n  = tanh(Wn x + Un (r * h) + bn)       candidate
        h' = z * h + (1 - z) * n
    """

    Wz: np.ndarray
    Uz: np.ndarray
    bz: np.ndarray
    Wr: np.ndarray
    Ur: np.ndarray
    br: np.ndarray
    Wn: np.ndarray
    Un: np.ndarray
    bn: np.ndarray

    PARAM_NAMES = ("Wz", "Uz", "bz", "Wr", "Ur", "br", "Wn", "Un", "bn")

    def __post_init__(self):
        for name in self.PARAM_NAMES:
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        H, D = self.Wz.shape
        for g in "zrn":
            if getattr(self, "W" + g).shape != (H, D):
                raise ValueError(f"W{g} has shape {getattr(self, 'W' + g).shape}, expected {(H, D)}")
            if getattr(self, "U" + g).shape != (H, H):
                raise ValueError(f"U{g} has shape {getattr(self, 'U' + g).shape}, expected {(H, H)}")
            if getattr(self, "b" + g).shape != (H,):
                raise ValueError(f"b{g} has shape {getattr(self, 'b' + g).shape}, expected {(H,)}")

    @classmethod
    def init(cls, in_dim: int, hidden: int, rng: np.random.Generator) -> "GRULayer":
        kw = {}
        for g in "zrn":
            kw["W" + g] = glorot_uniform(rng, hidden, in_dim)
            kw["U" + g] = glorot_uniform(rng, hidden, hidden)
            kw["b" + g] = np.zeros(hidden)
        return cls(**kw)

    @classmethod
    def zeros(cls, in_dim: int, hidden: int) -> "GRULayer":
        kw = {}
        for g in "zrn":
            kw["W" + g] = np.zeros((hidden, in_dim))
            kw["U" + g] = np.zeros((hidden, hidden))
            kw["b" + g] = np.zeros(hidden)
        return cls(**kw)

    @property
    def hidden_size(self) -> int:
        return self.Wz.shape[0]

    @property
    def in_dim(self) -> int:
        return self.Wz.shape[1]

    def params(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in self.PARAM_NAMES}


@dataclass
class GRUCache:
    layer: GRULayer
    xs: np.ndarray  # (T, n, D)
    hs: np.ndarray  # (T + 1, n, H); hs[0] is h0
    z: np.ndarray
    r: np.ndarray
    n: np.ndarray
    mask: np.ndarray  # (T, n, 1)
    squeeze: bool


def gru_forward(layer: GRULayer, xs, h0=None, mask=None) -> tuple[np.ndarray, GRUCache]:
    """Run the recurrence over ``xs``.

    ``xs`` is ``(T, D)`` for one sequence or ``(T, n, D)`` for a batch.  For
    right-padded batches, ``mask`` of shape ``(T, n)`` marks real steps; on a
    padded step the hidden state is carried over unchanged, so the last row
    of the output is each sequence's final state.
    """
    xs = np.asarray(xs, dtype=np.float64)
    if xs.ndim == 0 or xs.shape[0] == 0:
        raise ValueError("GRU needs a non-empty sequence")
    squeeze = xs.ndim == 2
    if squeeze:
        xs = xs[:, None, :]
    T, nb, D = xs.shape
    if D != layer.in_dim:
        raise ValueError(f"GRU input has {D} features, layer expects {layer.in_dim}")
    H = layer.hidden_size
    if h0 is None:
        h0 = np.zeros((nb, H))
    else:
        h0 = np.asarray(h0, dtype=np.float64).reshape(nb, H)
    if mask is None:
        m = np.ones((T, nb, 1))
    else:
        m = np.asarray(mask, dtype=np.float64).reshape(T, nb, 1)

    hs = np.empty((T + 1, nb, H))
    hs[0] = h0
    z = np.empty((T, nb, H))
    r = np.empty((T, nb, H))
    n = np.empty((T, nb, H))
    # input projections for all steps at once
    xz = xs @ layer.Wz.T + layer.bz
    xr = xs @ layer.Wr.T + layer.br
    xn = xs @ layer.Wn.T + layer.bn
    for t in range(T):
        h = hs[t]
        z[t] = sigmoid(xz[t] + h @ layer.Uz.T)
        r[t] = sigmoid(xr[t] + h @ layer.Ur.T)
        n[t] = np.tanh(xn[t] + (r[t] * h) @ layer.Un.T)
        h_new = z[t] * h + (1.0 - z[t]) * n[t]
        hs[t + 1] = m[t] * h_new + (1.0 - m[t]) * h
    out = hs[1:]
    cache = GRUCache(layer, xs, hs, z, r, n, m, squeeze)
    return (out[:, 0, :] if squeeze else out), cache


def gru_backward(cache: GRUCache, dhs) -> tuple[np.ndarray, np.ndarray, dict[str, np.ndarray]]:
    """Backpropagation through time.

    ``dhs`` is the loss gradient with respect to every output hidden state
    (same shape as the forward output); put zeros everywhere except the last
    step when only the final state feeds the loss.  Returns
    ``(dxs, dh0, param_grads)``.
    """
    layer = cache.layer
    dhs = np.asarray(dhs, dtype=np.float64)
    if cache.squeeze:
        dhs = dhs[:, None, :]
    T, nb, H = dhs.shape
    if (T, nb) != cache.xs.shape[:2] or H != layer.hidden_size:
        raise ValueError(f"gradient shape {dhs.shape} does not match forward")
    grads = {name: np.zeros_like(p) for name, p in layer.params().items()}
    dxs = np.zeros_like(cache.xs)
    dh_next = np.zeros((nb, H))
    for t in range(T - 1, -1, -1):
        dh = dhs[t] + dh_next
        m = cache.mask[t]
        h = cache.hs[t]
        z, r, n = cache.z[t], cache.r[t], cache.n[t]
        dh_new = m * dh
        dh_prev = (1.0 - m) * dh
        dz = dh_new * (h - n)
        dn = dh_new * (1.0 - z)
        dh_prev = dh_prev + dh_new * z
        dan = dn * (1.0 - n * n)
        drh = dan @ layer.Un
        dr = drh * h
        dh_prev = dh_prev + drh * r
        dar = dr * r * (1.0 - r)
        daz = dz * z * (1.0 - z)
        dh_prev = dh_prev + daz @ layer.Uz + dar @ layer.Ur
        x = cache.xs[t]
        grads["Wz"] += daz.T @ x
        grads["Wr"] += dar.T @ x
        grads["Wn"] += dan.T @ x
        grads["Uz"] += daz.T @ h
        grads["Ur"] += dar.T @ h
        grads["Un"] += dan.T @ (r * h)
        grads["bz"] += daz.sum(axis=0)
        grads["br"] += dar.sum(axis=0)
        grads["bn"] += dan.sum(axis=0)
        dxs[t] = daz @ layer.Wz + dar @ layer.Wr + dan @ layer.Wn
        dh_next = dh_prev
    if cache.squeeze:
        return dxs[:, 0, :], dh_next[0], grads
    return dxs, dh_next, grads


# --------------------------------------------------------------------------
# Dropout, loss
# --------------------------------------------------------------------------


def dropout_forward(x, rate: float, rng: np.random.Generator | None, training: bool):
    """Inverted dropout.  Returns ``(y, mask)``; the mask is all ones at inference."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    x = np.asarray(x, dtype=np.float64)
    if not training or rate == 0.0:
        return x.copy(), np.ones_like(x)
    if rng is None:
        raise ValueError("training-mode dropout needs an rng")
    mask = (rng.random(x.shape) >= rate).astype(np.float64)
    return x * mask / (1.0 - rate), mask


def dropout_backward(dy: np.ndarray, mask: np.ndarray, rate: float) -> np.ndarray:
    return dy * mask / (1.0 - rate)


def bce_loss(y_hat, y) -> tuple[float, np.ndarray]:
    """Mean element-wise binary cross entropy and its gradient w.r.t. ``y_hat``.

    Probabilities are clamped to ``[1e-12, 1 - 1e-12]``; the gradient is zero
    where the clamp is active.
    """
    y_hat = np.asarray(y_hat, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if y_hat.shape != y.shape:
        raise ValueError(f"prediction shape {y_hat.shape} != target shape {y.shape}")
    if np.isnan(y_hat).any() or np.isnan(y).any():
        raise ValueError("NaN in BCE input")
    p = np.clip(y_hat, BCE_CLAMP, 1.0 - BCE_CLAMP)
    loss = -np.mean(y * np.log(p) + (1.0 - y) * np.log1p(-p))
    grad = (p - y) / (p * (1.0 - p)) / y.size
    grad[(y_hat < BCE_CLAMP) | (y_hat > 1.0 - BCE_CLAMP)] = 0.0
    return float(loss), grad


def bce_with_sigmoid_grad(y_hat: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Gradient of mean BCE w.r.t. the pre-sigmoid logits, ``(y_hat - y) / size``.

    Numerically stable shortcut used in training loops in place of chaining
    :func:`bce_loss` through the sigmoid derivative.
    """
    return (np.asarray(y_hat, dtype=np.float64) - y) / y.size


# --------------------------------------------------------------------------
# Optimisation
# --------------------------------------------------------------------------


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_update(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], state: AdamState, lr: float):
    """One bias-corrected Adam step, applied in place.  Returns ``params``."""
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {params[name].shape} for {name!r}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    c1 = 1.0 - state.beta1**state.step
    c2 = 1.0 - state.beta2**state.step
    for name, g in grads.items():
        p = params[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


def lr_schedule(epoch: int, total_epochs: int, lr_start: float = 1e-2, lr_end: float = 1e-5,
                kind: str = "geometric", step_every: int = 10) -> float:
    """Learning rate for ``epoch`` (0-based).

    ``geometric`` interpolates log-linearly so epoch 0 gives ``lr_start`` and
    the last epoch gives ``lr_end``.  ``step`` holds the rate constant for
    ``step_every`` epochs between geometric drops with the same endpoints.
    """
    if total_epochs < 2:
        raise ValueError("lr_schedule needs at least 2 epochs")
    if not 0 <= epoch < total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {total_epochs})")
    last = total_epochs - 1
    if kind == "geometric":
        frac = epoch / last
    elif kind == "step":
        n_drops = max(1, -(-last // step_every))
        frac = min(epoch // step_every, n_drops) / n_drops
        if epoch == last:
            frac = 1.0
    else:
        raise ValueError(f"unknown schedule kind {kind!r}")
    if frac == 0.0:
        return float(lr_start)
    if frac == 1.0:
        return float(lr_end)
    return float(lr_start * (lr_end / lr_start) ** frac)


def grad_check(loss_fn: Callable[[], float], params: Mapping[str, np.ndarray],
               grads: Mapping[str, np.ndarray], eps: float = 1e-5, n_samples: int | None = None,
               rng: np.random.Generator | None = None, names: Iterable[str] | None = None,
               floor: float = 1e-7) -> float:
    """Max relative error between analytic ``grads`` and central differences.

    ``loss_fn`` takes no arguments and must read the arrays in ``params``,
    which are perturbed in place and restored.  With ``n_samples`` set, that
    many coordinates are drawn uniformly over all checked parameters.
    Relative error is ``|a - n| / max(|a|, |n|, floor)``.
    """
    names = list(names) if names is not None else list(grads)
    coords = [(name, i) for name in names for i in range(params[name].size)]
    if n_samples is not None and n_samples < len(coords):
        rng = rng if rng is not None else make_rng(0)
        picks = rng.choice(len(coords), size=n_samples, replace=False)
        coords = [coords[i] for i in sorted(picks)]
    worst = 0.0
    for name, i in coords:
        flat = params[name].reshape(-1)
        old = flat[i]
        flat[i] = old + eps
        up = loss_fn()
        flat[i] = old - eps
        down = loss_fn()
        flat[i] = old
        num = (up - down) / (2.0 * eps)
        ana = grads[name].reshape(-1)[i]
        err = abs(ana - num) / max(abs(ana), abs(num), floor)
        worst = max(worst, err)
    return worst
