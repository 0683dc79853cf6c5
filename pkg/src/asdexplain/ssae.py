"""Stacked sparse autoencoder: greedy layer-wise pretraining and fine-tuning."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import nn


@dataclass
class TrainConfig:
    epochs: int = 50
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    batch_size: int = 128
    seed: int = 0
    rho: float = 0.2
    beta: float = 2.0

    def validate(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if not 0 < self.rho < 1:
            raise ValueError("rho must lie in (0, 1)")
        if self.beta < 0 or self.learning_rate < 0 or self.weight_decay < 0:
            raise ValueError("beta, learning_rate and weight_decay must be non-negative")


PRETRAIN = TrainConfig()
FINETUNE = TrainConfig(learning_rate=1e-4)


@dataclass
class TraceRecord:
    phase: str
    epoch: int
    train_loss: float
    val_loss: float | None = None
    val_acc: float | None = None


@dataclass
class TrainingTrace:
    records: list[TraceRecord] = field(default_factory=list)

    def phase(self, name):
        return [r for r in self.records if r.phase == name]

    def extend(self, other: "TrainingTrace") -> "TrainingTrace":
        return TrainingTrace(self.records + other.records)

    def write(self, path) -> None:
        def fmt(v):
            return "" if v is None else repr(float(v))
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["phase", "epoch", "train_loss", "val_loss", "val_acc"])
            for r in self.records:
                w.writerow([r.phase, r.epoch, fmt(r.train_loss), fmt(r.val_loss), fmt(r.val_acc)])


def _batches(n, batch_size, rng):
    perm = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield perm[start:start + batch_size]


def _fit(model, X, loss_fn, cfg, on_epoch=None):
    """Shared Adam loop. Returns the trained model and per-epoch mean train loss."""
    rng = np.random.default_rng(cfg.seed)
    model = model.copy()
    params = model.params()
    state = nn.AdamState.zeros_like(params)
    losses = []
    for epoch in range(1, cfg.epochs + 1):
        total = 0.0
        for idx in _batches(len(X), cfg.batch_size, rng):
            loss, grads = loss_fn(model, idx)
            flat = [g for pair in grads for g in pair]
            # in place: params are the layer arrays of this private copy
            params, state = nn.adam_step(state, params, flat, cfg.learning_rate,
                                         cfg.weight_decay, inplace=True)
            total += loss * len(idx)
        if not math.isfinite(total):
            raise FloatingPointError(f"training loss became non-finite at epoch {epoch}")
        losses.append(total / len(X))
        if on_epoch is not None:
            on_epoch(epoch, model, losses[-1])
    return model, losses


def pretrain_layer(input_dim, hidden_dim, data, cfg: TrainConfig = PRETRAIN, phase="ae"):
    """Train one sparse autoencoder (ReLU encoder, linear decoder).

    Minimises reconstruction MSE plus ``beta`` times the KL sparsity penalty.
    Returns the two-layer autoencoder and its trace.
    """
    cfg.validate()
    X = np.asarray(data, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError("empty training data")
    if X.shape[1] != input_dim:
        raise ValueError(f"data width {X.shape[1]} != input_dim {input_dim}")
    ae = nn.init_mlp([input_dim, hidden_dim, input_dim], ["relu", "identity"], cfg.seed)

    def loss_fn(model, idx):
        return nn.autoencoder_loss(model, X[idx], cfg.rho, cfg.beta)

    ae, losses = _fit(ae, X, loss_fn, cfg)
    trace = TrainingTrace([TraceRecord(phase, e, l) for e, l in enumerate(losses, 1)])
    return ae, trace


def mean_activation(encoder: nn.Layer, X):
    return nn.forward(nn.MlpModel([encoder]), X).output.mean(axis=0)


def greedy_pretrain(dims, data, cfg: TrainConfig = PRETRAIN):
    """Train autoencoders one after another, each on the previous codes.

    Returns the list of encoder layers (decoders are dropped) and the
    combined trace with phases ``ae1``, ``ae2``, ...
    """
    X = np.asarray(data, dtype=np.float64)
    if X.shape[1] != dims[0]:
        raise ValueError(f"data width {X.shape[1]} != {dims[0]}")
    encoders, trace = [], TrainingTrace()
    codes = X
    for level, (d_in, d_out) in enumerate(zip(dims[:-1], dims[1:]), start=1):
        ae, t = pretrain_layer(d_in, d_out, codes, replace(cfg, seed=cfg.seed + level - 1),
                               phase=f"ae{level}")
        enc = ae.layers[0].copy()
        encoders.append(enc)
        trace = trace.extend(t)
        codes = nn.forward(nn.MlpModel([enc]), codes).output
    return encoders, trace


def encode(encoders, X):
    return nn.forward(nn.MlpModel([e.copy() for e in encoders]), X).output


def build_classifier(encoders, n_classes=2, seed=0) -> nn.MlpModel:
    rng = np.random.default_rng(seed)
    head = nn.init_layer(encoders[-1].out_dim, n_classes, "softmax", rng)
    return nn.MlpModel([e.copy() for e in encoders] + [head])


def accuracy(model, X, labels):
    return float(np.mean(predict_labels(model, X) == np.asarray(labels)))


def fine_tune(encoders, X_train, y_train, X_val=None, y_val=None, cfg: TrainConfig = FINETUNE,
              head_seed=None):
    """Attach a fresh softmax head and train everything on cross-entropy."""
    cfg.validate()
    X = np.asarray(X_train, dtype=np.float64)
    y = np.asarray(y_train, dtype=np.int64)
    if np.unique(y).size < 2:
        raise ValueError("fine-tuning needs both classes in the training split")
    model = build_classifier(encoders, seed=cfg.seed if head_seed is None else head_seed)
    records = []
    have_val = X_val is not None and len(X_val) > 0

    def on_epoch(epoch, m, train_loss):
        val_loss = val_acc = None
        if have_val:
            out = nn.forward(m, X_val).output
            val_loss, _ = nn.cross_entropy_loss(out, y_val)
            val_acc = float(np.mean(np.argmax(out, axis=1) == y_val))
        records.append(TraceRecord("finetune", epoch, train_loss, val_loss, val_acc))

    def loss_fn(m, idx):
        return nn.classifier_loss(m, X[idx], y[idx])

    model, _ = _fit(model, X, loss_fn, cfg, on_epoch)
    return model, TrainingTrace(records)


def predict_proba(model, X):
    return nn.forward(model, X).output


def predict_labels(model, X):
    # argmax returns the first maximum, so exact ties go to index 0 (TC)
    return np.argmax(predict_proba(model, X), axis=1)


def predict(model, fv):
    """Label index and class probabilities for one reduced feature vector."""
    fv = np.asarray(fv, dtype=np.float64)
    if fv.ndim != 1 or fv.shape[0] != model.layers[0].in_dim:
        raise ValueError(f"expected a vector of width {model.layers[0].in_dim}")
    probs = predict_proba(model, fv)[0]
    return int(np.argmax(probs)), probs
