"""Backbone + frozen lab module fusion, downstream training, and experiment checkpoints.

A ``FusedModel`` without a lab module is the plain backbone baseline: the
classifier then sees only the backbone representation.  With a lab module,
the classifier input is ``o || h_lab`` where ``h_lab`` is the frozen encoder
applied to the OR of the history's lab vectors.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import checkpoint
from .backbone import (BackboneModel, backbone_backward, backbone_forward_batch, init_backbone, pad_histories,
                       task_dim)
from .ehr import TaskSample, Vocabulary
from .errors import FingerprintError, TrainingDivergedError, ValidationError
from .metrics import task_metrics
from .nn import (AdamState, DenseLayer, GRULayer, adam_update, bce_loss, bce_with_sigmoid_grad, dense_backward,
                 dense_forward, dropout_backward, dropout_forward, lr_schedule, make_rng)
from .pretrain import PretrainedLabModule, encode_lab, integrate

log = logging.getLogger(__name__)

CKPT_KIND = "experiment"
PREDICT_CHUNK = 512


@dataclass
class DownstreamHyper:
    hidden: int = 128
    dropout: float = 0.4
    batch_size: int = 64
    epochs: int = 100
    lr_start: float = 1e-2
    lr_end: float = 1e-5
    schedule: str = "geometric"
    projection_dim: int | None = None
    threshold: float = 0.5
    seed: int = 0

    @classmethod
    def from_dict(cls, d: Mapping) -> "DownstreamHyper":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown downstream option(s): {', '.join(sorted(unknown))}")
        return cls(**d)


@dataclass
class FusedModel:
    backbone: BackboneModel
    classifier: DenseLayer
    task: str
    n_diag: int
    dropout_rate: float = 0.4
    lab_module: PretrainedLabModule | None = None

    def __post_init__(self):
        expected = self.backbone.d_o + (self.lab_module.hidden if self.lab_module is not None else 0)
        if self.classifier.in_dim != expected:
            raise ValidationError(f"classifier takes {self.classifier.in_dim} inputs, fused width is {expected}")
        if self.classifier.out_dim != task_dim(self.task, self.n_diag):
            raise ValidationError(f"classifier has {self.classifier.out_dim} outputs for task {self.task!r}")
        if self.lab_module is not None and not self.lab_module.frozen:
            raise ValidationError("the lab module must be frozen before fusion")

    @property
    def mode(self) -> str:
        return "baseline" if self.lab_module is None else "mplite"

    def params(self) -> dict[str, np.ndarray]:
        """Trainable parameters only; the lab module is never included."""
        p = {f"backbone.{k}": v for k, v in self.backbone.params().items()}
        p["classifier.W"] = self.classifier.W
        p["classifier.b"] = self.classifier.b
        return p


def init_fused(task: str, n_diag: int, rng: np.random.Generator, lab_module: PretrainedLabModule | None = None,
               hyper: DownstreamHyper | None = None) -> FusedModel:
    hyper = hyper or DownstreamHyper()
    backbone = init_backbone(n_diag, rng, hyper.hidden, hyper.projection_dim)
    width = backbone.d_o + (lab_module.hidden if lab_module is not None else 0)
    classifier = DenseLayer.init(width, task_dim(task, n_diag), "sigmoid", rng)
    return FusedModel(backbone, classifier, task, n_diag, hyper.dropout, lab_module)


# --------------------------------------------------------------------------
# Forward / backward
# --------------------------------------------------------------------------


@dataclass
class Prepared:
    """Samples turned into arrays once per run; lab encodings are constants."""

    diag: list[np.ndarray]
    lab_h: np.ndarray | None
    Y: np.ndarray

    def __len__(self) -> int:
        return len(self.diag)


def prepare(model: FusedModel, samples: Sequence[TaskSample]) -> Prepared:
    if not samples:
        raise ValidationError("no samples")
    for s in samples:
        if s.task != model.task:
            raise ValidationError(f"sample task {s.task!r} does not match model task {model.task!r}")
    diag = [s.history_diag.astype(np.float64) for s in samples]
    lab_h = None
    if model.lab_module is not None:
        X = np.stack([integrate(s.history_lab) for s in samples]).astype(np.float64)
        if X.shape[1] != model.lab_module.n_lab:
            raise ValidationError(f"lab vectors have {X.shape[1]} items, lab module expects {model.lab_module.n_lab}")
        lab_h = encode_lab(model.lab_module, X)
    Y = np.stack([np.asarray(s.label, dtype=np.float64).reshape(-1) for s in samples])
    return Prepared(diag, lab_h, Y)


@dataclass
class FuseCache:
    backbone: object
    dropout_mask: np.ndarray
    classifier: object
    d_o: int


def _forward(model: FusedModel, X, mask, lab_h, training: bool, rng):
    o, bcache = backbone_forward_batch(model.backbone, X, mask)
    fused = o if lab_h is None else np.concatenate([o, lab_h], axis=1)
    dropped, dmask = dropout_forward(fused, model.dropout_rate, rng, training)
    y_hat, ccache = dense_forward(model.classifier, dropped)
    return y_hat, FuseCache(bcache, dmask, ccache, o.shape[1])


def _backward(model: FusedModel, cache: FuseCache, y_hat: np.ndarray, Y: np.ndarray) -> dict[str, np.ndarray]:
    dz = bce_with_sigmoid_grad(y_hat, Y)
    d_in, dW, db = dense_backward(dataclasses.replace(cache.classifier, activation="identity"), dz)
    d_fused = dropout_backward(d_in, cache.dropout_mask, model.dropout_rate)
    grads = {f"backbone.{k}": v
             for k, v in backbone_backward(model.backbone, cache.backbone, d_fused[:, : cache.d_o]).items()}
    grads["classifier.W"] = dW
    grads["classifier.b"] = db
    return grads


def batch_loss_and_grads(model: FusedModel, data: Prepared, idx, training: bool = True, rng=None):
    X, mask = pad_histories([data.diag[i] for i in idx])
    lab_h = data.lab_h[idx] if data.lab_h is not None else None
    y_hat, cache = _forward(model, X, mask, lab_h, training, rng)
    Y = data.Y[idx]
    loss, _ = bce_loss(y_hat, Y)
    return loss, _backward(model, cache, y_hat, Y)


def fuse_forward(model: FusedModel, history_diag, history_lab=None, training: bool = False,
                 rng: np.random.Generator | None = None) -> np.ndarray:
    """Task probabilities for one admission history."""
    hd = np.asarray(history_diag, dtype=np.float64)
    if hd.ndim != 2 or hd.shape[0] < 1:
        raise ValidationError("history_diag must be a non-empty (visits, codes) array")
    lab_h = None
    if model.lab_module is not None:
        if history_lab is None:
            raise ValidationError("an MPLite model needs the lab history")
        hl = np.asarray(history_lab)
        if hl.shape[0] != hd.shape[0]:
            raise ValidationError("diagnosis and lab histories differ in length")
        lab_h = encode_lab(model.lab_module, integrate(hl).astype(np.float64))[None, :]
    y_hat, _ = _forward(model, hd[:, None, :], None, lab_h, training, rng)
    return y_hat[0]


def predict_prepared(model: FusedModel, data: Prepared) -> np.ndarray:
    out = []
    for start in range(0, len(data), PREDICT_CHUNK):
        idx = np.arange(start, min(len(data), start + PREDICT_CHUNK))
        X, mask = pad_histories([data.diag[i] for i in idx])
        lab_h = data.lab_h[idx] if data.lab_h is not None else None
        y_hat, _ = _forward(model, X, mask, lab_h, False, None)
        out.append(y_hat)
    return np.concatenate(out, axis=0)


def predict_scores(model: FusedModel, samples: Sequence[TaskSample]) -> np.ndarray:
    """Sigmoid probabilities, shape ``(n, |D|)`` for DG and ``(n, 1)`` for HF."""
    return predict_prepared(model, prepare(model, samples))


def selection_score(task: str, scores: np.ndarray, Y: np.ndarray, threshold: float = 0.5) -> float:
    """Validation score for model selection: w-F1 for DG, AUC for HF (NaN if undefined)."""
    try:
        m = task_metrics(task, scores, Y.astype(bool), threshold)
    except ValidationError:
        return float("nan")
    return m["w_f1"] if task == "dg" else m["auc"]


# --------------------------------------------------------------------------
# Training
# --------------------------------------------------------------------------


def train_downstream(model: FusedModel, train_samples: Sequence[TaskSample],
                     val_samples: Sequence[TaskSample] | None = None, hyper: DownstreamHyper | None = None,
                     rng: np.random.Generator | None = None) -> tuple[FusedModel, list[dict]]:
    """Train backbone and classifier with Adam; the lab module stays fixed.

    Returns the weights of the best validation epoch (w-F1 for DG, AUC for
    HF; validation loss decides when the metric is undefined) and the
    per-epoch history.  Without validation samples the last epoch is kept.
    """
    hyper = hyper or DownstreamHyper()
    rng = rng if rng is not None else make_rng(hyper.seed, 1)
    train = prepare(model, train_samples)
    val = prepare(model, val_samples) if val_samples else None
    params = model.params()
    state = AdamState()
    best = None
    best_key = None
    history = []
    for epoch in range(hyper.epochs):
        lr = lr_schedule(epoch, hyper.epochs, hyper.lr_start, hyper.lr_end, hyper.schedule) \
            if hyper.epochs > 1 else hyper.lr_start
        perm = rng.permutation(len(train))
        total = 0.0
        for start in range(0, perm.size, hyper.batch_size):
            idx = perm[start:start + hyper.batch_size]
            loss, grads = batch_loss_and_grads(model, train, idx, True, rng)
            if not np.isfinite(loss):
                raise TrainingDivergedError(epoch, loss)
            adam_update(params, grads, state, lr)
            total += loss * idx.size
        rec = {"epoch": epoch, "lr": lr, "train_loss": total / len(train)}
        if val is not None:
            scores = predict_prepared(model, val)
            val_loss = bce_loss(scores, val.Y)[0]
            metric = selection_score(model.task, scores, val.Y, hyper.threshold)
            rec.update(val_loss=val_loss, val_metric=None if np.isnan(metric) else metric)
            key = (0 if np.isnan(metric) else 1, -np.inf if np.isnan(metric) else metric, -val_loss)
            if best_key is None or key > best_key:
                best_key = key
                best = {k: v.copy() for k, v in params.items()}
                rec["best"] = True
        history.append(rec)
        log.debug("downstream %s/%s epoch %d %s", model.task, model.mode, epoch, rec)
    if best is not None:
        for k, v in best.items():
            params[k][...] = v
    return model, history


def evaluate(model: FusedModel, samples: Sequence[TaskSample], threshold: float = 0.5) -> dict:
    data = prepare(model, samples)
    scores = predict_prepared(model, data)
    return task_metrics(model.task, scores, data.Y.astype(bool), threshold)


# --------------------------------------------------------------------------
# Experiment checkpoints
# --------------------------------------------------------------------------


def experiment_bytes(model: FusedModel, meta: dict) -> bytes:
    m = dict(meta)
    m.update(task=model.task, mode=model.mode, n_diag=model.n_diag, hidden=model.backbone.gru.hidden_size,
             projection_dim=model.backbone.projection.out_dim if model.backbone.projection is not None else None,
             dropout=model.dropout_rate)
    return checkpoint.to_bytes(CKPT_KIND, m, model.params())


def save_experiment(model: FusedModel, path, meta: dict) -> bytes:
    data = experiment_bytes(model, meta)
    checkpoint.atomic_write_bytes(path, data)
    return data


def load_experiment(path, lab_module: PretrainedLabModule | None = None, lab_module_path=None,
                    diag_vocab: Vocabulary | None = None) -> tuple[FusedModel, dict]:
    """Rebuild a trained model.  MPLite checkpoints need the exact lab module they were trained with."""
    meta, w = checkpoint.load(path, CKPT_KIND)
    if meta.get("mode") == "mplite":
        if lab_module is None:
            raise ValidationError(f"{path} was trained with a lab module; supply the lab module checkpoint")
        recorded = meta.get("lab_module_sha256")
        if lab_module_path is not None and recorded and checkpoint.file_sha256(lab_module_path) != recorded:
            raise FingerprintError(f"{path} was trained against a different lab module checkpoint than {lab_module_path}")
    else:
        lab_module = None
    if diag_vocab is not None and meta.get("diag_fingerprint") and diag_vocab.fingerprint() != meta["diag_fingerprint"]:
        raise FingerprintError(f"{path}: diagnosis vocabulary differs from the one used in training")
    try:
        gru = GRULayer(**{k: w[f"backbone.gru.{k}"] for k in GRULayer.PARAM_NAMES})
        proj = DenseLayer(w["backbone.proj.W"], w["backbone.proj.b"], "identity") if "backbone.proj.W" in w else None
        clf = DenseLayer(w["classifier.W"], w["classifier.b"], "sigmoid")
        model = FusedModel(BackboneModel(gru, proj), clf, meta["task"], int(meta["n_diag"]),
                           float(meta.get("dropout", 0.4)), lab_module)
    except KeyError as exc:
        raise checkpoint.CheckpointError(f"{path}: experiment checkpoint lacks {exc}") from None
    return model, meta
