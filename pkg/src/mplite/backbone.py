"""GRU backbone over multi-hot diagnosis histories."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ValidationError
from .nn import DenseLayer, GRULayer, dense_backward, dense_forward, gru_backward, gru_forward

TASK_DIMS = ("dg", "hf")


@dataclass
class BackboneModel:
    gru: GRULayer
    projection: DenseLayer | None = None

    @property
    def d_o(self) -> int:
        return self.projection.out_dim if self.projection is not None else self.gru.hidden_size

    @property
    def n_diag(self) -> int:
        return self.gru.in_dim

    def params(self) -> dict[str, np.ndarray]:
        p = {f"gru.{k}": v for k, v in self.gru.params().items()}
        if self.projection is not None:
            p["proj.W"] = self.projection.W
            p["proj.b"] = self.projection.b
        return p


def init_backbone(n_diag: int, rng: np.random.Generator, hidden: int = 128,
                  projection_dim: int | None = None) -> BackboneModel:
    gru = GRULayer.init(n_diag, hidden, rng)
    proj = DenseLayer.init(hidden, projection_dim, "identity", rng) if projection_dim else None
    return BackboneModel(gru, proj)


def pad_histories(histories: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad ``(T_i, D)`` histories into ``(T_max, n, D)`` plus a ``(T_max, n)`` mask."""
    if not histories:
        raise ValidationError("no histories to batch")
    lengths = [h.shape[0] for h in histories]
    if min(lengths) < 1:
        raise ValidationError("every history needs at least one visit")
    T, n, D = max(lengths), len(histories), histories[0].shape[1]
    X = np.zeros((T, n, D))
    mask = np.zeros((T, n))
    for i, h in enumerate(histories):
        X[: h.shape[0], i] = h
        mask[: h.shape[0], i] = 1.0
    return X, mask


@dataclass
class BackboneCache:
    gru: object
    proj: object
    T: int
    n: int


def backbone_forward_batch(model: BackboneModel, X: np.ndarray, mask: np.ndarray | None = None):
    """Batched forward on padded input; returns ``(o, cache)`` with ``o`` of shape ``(n, d_o)``."""
    if X.shape[-1] != model.n_diag:
        raise ValidationError(f"history has {X.shape[-1]} codes per visit, backbone expects {model.n_diag}")
    hs, gcache = gru_forward(model.gru, X, mask=mask)
    o = hs[-1]
    pcache = None
    if model.projection is not None:
        o, pcache = dense_forward(model.projection, o)
    return o, BackboneCache(gcache, pcache, X.shape[0], X.shape[1])


def backbone_backward(model: BackboneModel, cache: BackboneCache, d_o: np.ndarray) -> dict[str, np.ndarray]:
    grads = {}
    if model.projection is not None:
        d_h, dW, db = dense_backward(cache.proj, d_o)
        grads["proj.W"], grads["proj.b"] = dW, db
    else:
        d_h = d_o
    dhs = np.zeros((cache.T, cache.n, model.gru.hidden_size))
    dhs[-1] = d_h
    _, _, g = gru_backward(cache.gru, dhs)
    grads.update({f"gru.{k}": v for k, v in g.items()})
    return grads


def backbone_forward(model: BackboneModel, history) -> np.ndarray:
    """Representation of one admission history ``(T, |D|)``: the last hidden state, optionally projected."""
    history = np.asarray(history, dtype=np.float64)
    if history.ndim != 2 or history.shape[0] == 0:
        raise ValidationError("history must be a non-empty (visits, codes) array")
    o, _ = backbone_forward_batch(model, history[:, None, :])
    return o[0]


def task_dim(task: str, n_diag: int) -> int:
    if task == "dg":
        return n_diag
    if task == "hf":
        return 1
    raise ValidationError(f"unknown task {task!r}; expected one of {TASK_DIMS}")


def init_head(d_in: int, task: str, n_diag: int, rng: np.random.Generator) -> DenseLayer:
    return DenseLayer.init(d_in, task_dim(task, n_diag), "sigmoid", rng)


def baseline_head(head: DenseLayer, o: np.ndarray, task: str, n_diag: int) -> np.ndarray:
    """Sigmoid task head on the backbone representation (no lab features)."""
    if head.out_dim != task_dim(task, n_diag):
        raise ValidationError(f"head has {head.out_dim} outputs, task {task!r} needs {task_dim(task, n_diag)}")
    y, _ = dense_forward(head, o)
    return y
