"""Lab-result pretraining: a two-layer MLP mapping integrated lab flags to diagnoses.

The encoder output is the lab representation later plugged into downstream
models; after training the module is frozen and only ``encode_lab`` is used.
"""

from __future__ import annotations

import dataclasses
import hashlib
import logging
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import checkpoint
from .ehr import Cohort, DatasetSplit, PatientRecord, Vocabulary
from .errors import FingerprintError, TrainingDivergedError, ValidationError
from .nn import (DenseLayer, adam_update, AdamState, bce_loss, bce_with_sigmoid_grad, dense_backward,
                 dense_forward, lr_schedule, make_rng)

log = logging.getLogger(__name__)

CKPT_KIND = "lab_module"


def integrate(lab_vectors: Sequence[np.ndarray]) -> np.ndarray:
    """Element-wise OR over a patient's per-visit lab vectors."""
    vecs = [np.asarray(v, dtype=bool) for v in lab_vectors]
    if not vecs:
        raise ValueError("integrate needs at least one vector")
    n = vecs[0].shape
    for v in vecs[1:]:
        if v.shape != n:
            raise ValueError(f"lab vectors have mismatched shapes {n} and {v.shape}")
    return np.logical_or.reduce(vecs, axis=0)


@dataclass(frozen=True)
class PretrainSample:
    patient_id: str
    x: np.ndarray  # integrated lab flags over L
    y: np.ndarray  # union of diagnoses over D


def build_pretrain_set(patients: Iterable[PatientRecord], pretrain_cohort: Cohort, split: DatasetSplit | None,
                       diag_vocab: Vocabulary, lab_vocab: Vocabulary, policy: str = "drop",
                       counter: Counter | None = None) -> list[PretrainSample]:
    """Single-visit patients with labs, plus multi-visit patients of the training split.

    Multi-visit patients outside ``split.train`` never enter pretraining, so
    validation and test patients stay unseen.  Samples with no encodable
    diagnosis are dropped and counted under ``pretrain_empty_label``.
    """
    counter = counter if counter is not None else Counter()
    train = split.train if split is not None else frozenset()
    out = []
    for p in patients:
        if p.patient_id not in pretrain_cohort:
            continue
        if p.T > 1 and p.patient_id not in train:
            continue
        x = integrate([lab_vocab.encode(v.lab_abnormal, policy, counter) for v in p.visits])
        y = diag_vocab.encode(set().union(*(v.diag_codes for v in p.visits)), policy, counter)
        if not y.any():
            counter["pretrain_empty_label"] += 1
            continue
        out.append(PretrainSample(p.patient_id, x, y))
    if not out:
        raise ValidationError("pretraining set is empty")
    return out


@dataclass
class PretrainHyper:
    hidden: int = 200
    batch_size: int = 64
    epochs: int = 100
    lr_start: float = 1e-2
    lr_end: float = 1e-5
    schedule: str = "geometric"
    activation: str = "relu"
    holdout: float = 0.1
    patience: int = 10
    min_holdout_samples: int = 10
    seed: int = 0

    @classmethod
    def from_dict(cls, d: Mapping) -> "PretrainHyper":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown pretrain option(s): {', '.join(sorted(unknown))}")
        return cls(**d)


@dataclass
class PretrainedLabModule:
    encoder: DenseLayer
    decoder: DenseLayer
    lab_fingerprint: str
    diag_fingerprint: str
    frozen: bool = False
    meta: dict = field(default_factory=dict)

    @property
    def hidden(self) -> int:
        return self.encoder.out_dim

    @property
    def n_lab(self) -> int:
        return self.encoder.in_dim

    @property
    def n_diag(self) -> int:
        return self.decoder.out_dim

    def weights(self) -> dict[str, np.ndarray]:
        return {"encoder.W": self.encoder.W, "encoder.b": self.encoder.b,
                "decoder.W": self.decoder.W, "decoder.b": self.decoder.b}

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, w in sorted(self.weights().items()):
            h.update(name.encode())
            h.update(np.ascontiguousarray(w, dtype="<f8").tobytes())
        return h.hexdigest()

    def check_vocabularies(self, lab_vocab: Vocabulary | None = None, diag_vocab: Vocabulary | None = None):
        if lab_vocab is not None and lab_vocab.fingerprint() != self.lab_fingerprint:
            raise FingerprintError("lab vocabulary does not match the one the lab module was trained with")
        if diag_vocab is not None and diag_vocab.fingerprint() != self.diag_fingerprint:
            raise FingerprintError("diagnosis vocabulary does not match the one the lab module was trained with")

    def freeze(self) -> "PretrainedLabModule":
        for w in self.weights().values():
            w.flags.writeable = False
        self.frozen = True
        return self


def init_module(n_lab: int, n_diag: int, hidden: int, rng: np.random.Generator, activation: str = "relu",
                lab_fingerprint: str = "", diag_fingerprint: str = "") -> PretrainedLabModule:
    enc = DenseLayer.init(n_lab, hidden, activation, rng)
    dec = DenseLayer.init(hidden, n_diag, "sigmoid", rng)
    return PretrainedLabModule(enc, dec, lab_fingerprint, diag_fingerprint)


def pretrain_forward(module: PretrainedLabModule, x, lab_vocab: Vocabulary | None = None,
                     diag_vocab: Vocabulary | None = None) -> tuple[np.ndarray, np.ndarray]:
    """``(h, y_hat)``: encoder representation and decoded diagnosis probabilities."""
    module.check_vocabularies(lab_vocab, diag_vocab)
    h, _ = dense_forward(module.encoder, np.asarray(x, dtype=np.float64))
    y_hat, _ = dense_forward(module.decoder, h)
    return h, y_hat


def encode_lab(module: PretrainedLabModule, x) -> np.ndarray:
    """Encoder-only forward pass of a frozen module."""
    if not module.frozen:
        raise ValidationError("encode_lab needs a frozen lab module; train or load one first")
    h, _ = dense_forward(module.encoder, np.asarray(x, dtype=np.float64))
    return h


def pretrain_loss_and_grads(module: PretrainedLabModule, X: np.ndarray, Y: np.ndarray):
    """Mean BCE over a batch and gradients for all four weight arrays."""
    h, enc_cache = dense_forward(module.encoder, X)
    y_hat, dec_cache = dense_forward(module.decoder, h)
    loss, _ = bce_loss(y_hat, Y)
    dz = bce_with_sigmoid_grad(y_hat, Y)
    dh, dWd, dbd = dense_backward(dataclasses.replace(dec_cache, activation="identity"), dz)
    _, dWe, dbe = dense_backward(enc_cache, dh)
    return loss, {"encoder.W": dWe, "encoder.b": dbe, "decoder.W": dWd, "decoder.b": dbd}


def _stack(samples: Sequence[PretrainSample]) -> tuple[np.ndarray, np.ndarray]:
    X = np.stack([s.x for s in samples]).astype(np.float64)
    Y = np.stack([s.y for s in samples]).astype(np.float64)
    return X, Y


def _mean_loss(module, X, Y) -> float:
    if X.shape[0] == 0:
        return float("nan")
    _, y_hat = pretrain_forward(module, X)
    return bce_loss(y_hat, Y)[0]


def train_pretrain(samples: Sequence[PretrainSample], hyper: PretrainHyper | None = None,
                   rng: np.random.Generator | None = None, lab_vocab: Vocabulary | None = None,
                   diag_vocab: Vocabulary | None = None) -> PretrainedLabModule:
    """Minibatch Adam on mean BCE with early stopping on a held-out slice.

    The slice is ``hyper.holdout`` of the samples when there are at least
    ``hyper.min_holdout_samples`` of them; otherwise every epoch runs and the
    final weights are kept.  The returned module is frozen, with the per-epoch
    history in ``module.meta["history"]``.
    """
    hyper = hyper or PretrainHyper()
    if not samples:
        raise ValidationError("no pretraining samples")
    rng = rng if rng is not None else make_rng(hyper.seed)
    X, Y = _stack(samples)
    n_lab, n_diag = X.shape[1], Y.shape[1]
    if lab_vocab is not None and lab_vocab.size != n_lab:
        raise ValidationError(f"lab vocabulary size {lab_vocab.size} != sample width {n_lab}")
    if diag_vocab is not None and diag_vocab.size != n_diag:
        raise ValidationError(f"diagnosis vocabulary size {diag_vocab.size} != label width {n_diag}")

    n = X.shape[0]
    order = rng.permutation(n)
    n_hold = int(np.floor(hyper.holdout * n)) if n >= hyper.min_holdout_samples else 0
    hold_idx, train_idx = np.sort(order[:n_hold]), np.sort(order[n_hold:])
    Xh, Yh = X[hold_idx], Y[hold_idx]
    Xt, Yt = X[train_idx], Y[train_idx]

    module = init_module(n_lab, n_diag, hyper.hidden, rng, hyper.activation,
                         lab_vocab.fingerprint() if lab_vocab else "", diag_vocab.fingerprint() if diag_vocab else "")
    params = module.weights()
    state = AdamState()
    best = None
    best_loss = np.inf
    best_epoch = -1
    wait = 0
    history = []
    for epoch in range(hyper.epochs):
        lr = lr_schedule(epoch, hyper.epochs, hyper.lr_start, hyper.lr_end, hyper.schedule) \
            if hyper.epochs > 1 else hyper.lr_start
        perm = rng.permutation(Xt.shape[0])
        for start in range(0, perm.size, hyper.batch_size):
            idx = perm[start:start + hyper.batch_size]
            loss, grads = pretrain_loss_and_grads(module, Xt[idx], Yt[idx])
            if not np.isfinite(loss):
                raise TrainingDivergedError(epoch, loss)
            adam_update(params, grads, state, lr)
        train_loss = _mean_loss(module, Xt, Yt)
        if not np.isfinite(train_loss):
            raise TrainingDivergedError(epoch, train_loss)
        hold_loss = _mean_loss(module, Xh, Yh) if n_hold else None
        history.append({"epoch": epoch, "lr": lr, "train_loss": train_loss, "holdout_loss": hold_loss})
        log.debug("pretrain epoch %d lr=%.3g train=%.5f holdout=%s", epoch, lr, train_loss, hold_loss)
        if n_hold:
            if hold_loss < best_loss:
                best_loss, best_epoch, wait = hold_loss, epoch, 0
                best = {k: v.copy() for k, v in params.items()}
            else:
                wait += 1
                if wait >= hyper.patience:
                    break
    if best is not None:
        for k, v in best.items():
            params[k][...] = v
    else:
        best_epoch = len(history) - 1
    module.meta = {"hyper": dataclasses.asdict(hyper), "n_samples": n, "n_holdout": n_hold,
                   "epochs_run": len(history), "best_epoch": best_epoch, "history": history}
    return module.freeze()


# --------------------------------------------------------------------------
# Persistence
# --------------------------------------------------------------------------


def module_bytes(module: PretrainedLabModule) -> bytes:
    meta = {
        "hidden": module.hidden, "n_lab": module.n_lab, "n_diag": module.n_diag,
        "activation": module.encoder.activation,
        "lab_fingerprint": module.lab_fingerprint, "diag_fingerprint": module.diag_fingerprint,
        "training": {k: v for k, v in module.meta.items() if k != "history"},
    }
    return checkpoint.to_bytes(CKPT_KIND, meta, module.weights())


def save_module(module: PretrainedLabModule, path) -> bytes:
    if not module.frozen:
        raise ValidationError("only frozen lab modules can be saved")
    data = module_bytes(module)
    checkpoint.atomic_write_bytes(path, data)
    return data


def load_module(path, lab_vocab: Vocabulary | None = None, diag_vocab: Vocabulary | None = None) -> PretrainedLabModule:
    meta, w = checkpoint.load(path, CKPT_KIND)
    try:
        enc = DenseLayer(w["encoder.W"], w["encoder.b"], meta["activation"])
        dec = DenseLayer(w["decoder.W"], w["decoder.b"], "sigmoid")
        module = PretrainedLabModule(enc, dec, meta["lab_fingerprint"], meta["diag_fingerprint"],
                                     meta=dict(meta.get("training", {})))
    except KeyError as exc:
        raise checkpoint.CheckpointError(f"{path}: lab module checkpoint lacks {exc}") from None
    except ValueError as exc:
        raise checkpoint.CheckpointError(f"{path}: {exc}") from None
    if (module.hidden, module.n_lab, module.n_diag) != (meta.get("hidden"), meta.get("n_lab"), meta.get("n_diag")):
        raise checkpoint.CheckpointError(f"{path}: weight shapes disagree with recorded dimensions")
    module.check_vocabularies(lab_vocab, diag_vocab)
    return module.freeze()
