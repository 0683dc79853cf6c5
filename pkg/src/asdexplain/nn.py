"""Small dense-network engine in float64.

Everything the stacked autoencoder needs and nothing more: ReLU / identity /
softmax layers, forward with a cache, exact reverse-mode gradients, the
reconstruction and classification losses, Adam, a finite-difference gradient
checker and a binary checkpoint format.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numba
import numpy as np

ACTIVATIONS = ("identity", "relu", "softmax")
_TAG_CODES = {"identity": 0, "relu": 1, "softmax": 2}
_CODE_TAGS = {v: k for k, v in _TAG_CODES.items()}

KL_EPS = 1e-6
CHECKPOINT_MAGIC = b"SSAE"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Layer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str = "relu"

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ValueError("bias length must equal weight rows")

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    def copy(self) -> "Layer":
        return Layer(self.weight.copy(), self.bias.copy(), self.activation)


@dataclass
class MlpModel:
    layers: list[Layer]

    def __post_init__(self):
        if not self.layers:
            raise ValueError("model needs at least one layer")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.out_dim != nxt.in_dim:
                raise ValueError(
                    f"layer dims do not chain: {prev.out_dim} -> {nxt.in_dim}")

    @property
    def dims(self) -> list[int]:
        return [self.layers[0].in_dim] + [l.out_dim for l in self.layers]

    def params(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out.extend([layer.weight, layer.bias])
        return out

    def with_params(self, params) -> "MlpModel":
        layers = []
        for i, layer in enumerate(self.layers):
            layers.append(Layer(params[2 * i], params[2 * i + 1], layer.activation))
        return MlpModel(layers)

    def copy(self) -> "MlpModel":
        return MlpModel([l.copy() for l in self.layers])

    def checksum(self) -> str:
        import hashlib
        h = hashlib.sha256()
        for p in self.params():
            h.update(np.ascontiguousarray(p).tobytes())
        return h.hexdigest()


def init_layer(in_dim, out_dim, activation, rng) -> Layer:
    """Uniform init in +-sqrt(6 / (fan_in + fan_out)); biases start at zero."""
    limit = np.sqrt(6.0 / (in_dim + out_dim))
    w = rng.uniform(-limit, limit, size=(out_dim, in_dim))
    return Layer(w, np.zeros(out_dim), activation)


def init_mlp(dims, activations, seed) -> MlpModel:
    if len(activations) != len(dims) - 1:
        raise ValueError("need one activation per layer")
    rng = np.random.default_rng(seed)
    return MlpModel([init_layer(dims[i], dims[i + 1], activations[i], rng)
                     for i in range(len(dims) - 1)])


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _activate(z, activation):
    if activation == "relu":
        return np.maximum(z, 0.0)
    if activation == "softmax":
        return softmax(z)
    return z


@dataclass
class ForwardCache:
    inputs: list[np.ndarray] = field(default_factory=list)  # input to each layer
    preacts: list[np.ndarray] = field(default_factory=list)
    outputs: list[np.ndarray] = field(default_factory=list)

    @property
    def output(self) -> np.ndarray:
        return self.outputs[-1]

    @property
    def logits(self) -> np.ndarray:
        return self.preacts[-1]


def forward(model: MlpModel, batch) -> ForwardCache:
    """Run the model on a (n, in) batch, keeping every intermediate."""
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[1] != model.layers[0].in_dim:
        raise ValueError(
            f"batch width {x.shape[1]} != model input {model.layers[0].in_dim}")
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite input")
    cache = ForwardCache()
    for layer in model.layers:
        z = x @ layer.weight.T + layer.bias
        a = _activate(z, layer.activation)
        cache.inputs.append(x)
        cache.preacts.append(z)
        cache.outputs.append(a)
        x = a
    return cache


def backward(model: MlpModel, cache: ForwardCache, grad_output,
             from_logits=False, extra_grads=None, input_grad=True):
    """Reverse-mode gradients for every weight and bias.

    Args:
        grad_output: gradient of the loss w.r.t. the final layer output, or
            w.r.t. its pre-activation when ``from_logits`` is set (the fused
            softmax + cross-entropy case).
        extra_grads: optional ``{layer_index: grad}`` added to the gradient
            arriving at that layer's output (used for the sparsity penalty on
            hidden activations).

    Returns:
        list of ``(dW, db)`` per layer and the gradient w.r.t. the input batch
        (None when ``input_grad`` is False).
    """
    if cache is None or len(cache.preacts) != len(model.layers):
        raise ValueError("missing forward cache")
    extra_grads = extra_grads or {}
    g = np.asarray(grad_output, dtype=np.float64)
    grads = [None] * len(model.layers)
    for idx in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[idx]
        if idx in extra_grads:
            g = g + extra_grads[idx]
        z = cache.preacts[idx]
        if layer.activation == "relu":
            gz = g * (z > 0)
        elif layer.activation == "softmax" and not (
                from_logits and idx == len(model.layers) - 1):
            p = cache.outputs[idx]
            gz = p * (g - np.sum(p * g, axis=1, keepdims=True))
        else:
            gz = g
        grads[idx] = (gz.T @ cache.inputs[idx], gz.sum(axis=0))
        g = gz @ layer.weight if (idx or input_grad) else None
    return grads, g


def mse_loss(x_hat, x):
    """Mean squared error over all elements, with its gradient w.r.t. x_hat."""
    x_hat = np.asarray(x_hat, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if x_hat.shape != x.shape:
        raise ValueError(f"shape mismatch {x_hat.shape} vs {x.shape}")
    diff = x_hat - x
    return float(np.mean(diff ** 2)), 2.0 * diff / diff.size


def kl_sparsity(rho, rho_hat):
    """Bernoulli KL(rho || rho_hat_j) summed over units.

    rho_hat is clamped to [1e-6, 1 - 1e-6]; the returned gradient is the
    derivative of the clamped expression, so it is zero for clamped entries.
    """
    if not 0.0 < rho < 1.0:
        raise ValueError("sparsity target must lie in (0, 1)")
    rho_hat = np.asarray(rho_hat, dtype=np.float64)
    clipped = np.clip(rho_hat, KL_EPS, 1.0 - KL_EPS)
    kl = rho * np.log(rho / clipped) + (1 - rho) * np.log((1 - rho) / (1 - clipped))
    grad = -rho / clipped + (1 - rho) / (1 - clipped)
    grad = np.where((rho_hat >= KL_EPS) & (rho_hat <= 1.0 - KL_EPS), grad, 0.0)
    return float(kl.sum()), grad


def cross_entropy_loss(probs, labels):
    """Mean negative log-likelihood of integer labels.

    Returns the loss and the fused softmax + CE gradient w.r.t. the logits,
    ``(p - onehot) / batch``.
    """
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n, k = probs.shape
    if labels.shape != (n,):
        raise ValueError("one label per row required")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError("label index out of range")
    picked = probs[np.arange(n), labels]
    loss = float(-np.mean(np.log(np.maximum(picked, 1e-300))))
    grad = probs.copy()
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


def classifier_loss(model, X, labels):
    cache = forward(model, X)
    loss, g = cross_entropy_loss(cache.output, labels)
    grads, _ = backward(model, cache, g, from_logits=True, input_grad=False)
    return loss, grads


def autoencoder_loss(model, X, rho=0.2, beta=2.0):
    """Reconstruction MSE plus beta times the KL sparsity penalty.

    ``model`` is a two-layer autoencoder: encoder then decoder. The penalty
    uses the batch-mean activation of the encoder units.
    """
    cache = forward(model, X)
    mse, g = mse_loss(cache.output, X)
    extra = {}
    loss = mse
    if beta > 0:
        hidden = cache.outputs[0]
        kl, g_rho = kl_sparsity(rho, hidden.mean(axis=0))
        loss += beta * kl
        extra[0] = np.broadcast_to(beta * g_rho / hidden.shape[0], hidden.shape)
    grads, _ = backward(model, cache, g, extra_grads=extra, input_grad=False)
    return loss, grads


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params) -> "AdamState":
        return cls([np.zeros_like(p) for p in params],
                   [np.zeros_like(p) for p in params])


def adam_step(state: AdamState, params, grads, learning_rate, weight_decay=0.0, inplace=False):
    """One bias-corrected Adam update with L2 weight decay folded into the gradient.

    Returns ``(new_params, new_state)``. Inputs are left untouched unless
    ``inplace`` is set, in which case parameter and moment arrays are
    overwritten (the training loop owns them).
    """
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    if inplace:
        new_params, new_m, new_v = list(params), state.m, state.v
    else:
        new_params = [np.array(p, dtype=np.float64) for p in params]
        new_m = [m.copy() for m in state.m]
        new_v = [v.copy() for v in state.v]
    for p, g, m, v in zip(new_params, grads, new_m, new_v):
        _adam_kernel(p.reshape(-1), np.ascontiguousarray(g, dtype=np.float64).reshape(-1),
                     m.reshape(-1), v.reshape(-1), float(learning_rate), float(weight_decay),
                     b1, b2, 1 - b1 ** t, 1 - b2 ** t, state.eps)
    return new_params, AdamState(new_m, new_v, t, b1, b2, state.eps)


@numba.njit(cache=True)
def _adam_kernel(p, g, m, v, lr, wd, b1, b2, c1, c2, eps):
    for i in range(p.size):
        gi = g[i] + wd * p[i]
        m[i] = b1 * m[i] + (1 - b1) * gi
        v[i] = b2 * v[i] + (1 - b2) * gi * gi
        p[i] = p[i] - lr * (m[i] / c1) / (np.sqrt(v[i] / c2) + eps)


def _flat_grads(grads):
    out = []
    for dw, db in grads:
        out.extend([dw, db])
    return out


def finite_diff_check(model, batch, loss_fn, h=1e-5, n_coords=200, seed=0,
                      per_layer=True, floor=1e-8):
    """Largest relative error between analytic and central-difference gradients.

    ``loss_fn(model, batch)`` must return ``(loss, grads)`` with grads shaped
    like the output of :func:`backward`. With ``per_layer`` the ``n_coords``
    sample is drawn from every weight matrix (biases get a share too);
    otherwise from all parameters pooled. Relative error is
    ``|a - n| / max(|a|, |n|, floor)``.
    """
    rng = np.random.default_rng(seed)
    _, grads = loss_fn(model, batch)
    analytic = _flat_grads(grads)
    params = [p.copy() for p in model.params()]

    picks = []
    if per_layer:
        for li in range(len(model.layers)):
            for pi, count in ((2 * li, n_coords), (2 * li + 1, max(1, n_coords // 10))):
                size = params[pi].size
                flat = rng.choice(size, size=min(count, size), replace=False)
                picks.extend((pi, int(f)) for f in flat)
    else:
        sizes = np.array([p.size for p in params])
        total = int(sizes.sum())
        offsets = np.concatenate([[0], np.cumsum(sizes)])
        for f in rng.choice(total, size=min(n_coords, total), replace=False):
            pi = int(np.searchsorted(offsets, f, side="right") - 1)
            picks.append((pi, int(f - offsets[pi])))

    worst = 0.0
    for pi, flat in picks:
        plus = [p.copy() if i == pi else p for i, p in enumerate(params)]
        minus = [p.copy() if i == pi else p for i, p in enumerate(params)]
        plus[pi].flat[flat] += h
        minus[pi].flat[flat] -= h
        lp, _ = loss_fn(model.with_params(plus), batch)
        lm, _ = loss_fn(model.with_params(minus), batch)
        numeric = (lp - lm) / (2 * h)
        a = analytic[pi].flat[flat]
        err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
        worst = max(worst, err)
    return worst


def save_checkpoint(model: MlpModel, path, metadata=None) -> None:
    """Little-endian binary: magic, version, layers, then a metadata blob."""
    meta = "".join(f"{k}={v}\n" for k, v in sorted((metadata or {}).items()))
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(model.layers))]
    for layer in model.layers:
        parts.append(struct.pack("<IIB", layer.out_dim, layer.in_dim,
                                 _TAG_CODES[layer.activation]))
        parts.append(np.ascontiguousarray(layer.weight, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(layer.bias, dtype="<f8").tobytes())
    blob = meta.encode("utf-8")
    parts.append(struct.pack("<Q", len(blob)))
    parts.append(blob)
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path, expected_dims=None):
    """Read a checkpoint; returns ``(model, metadata_dict)``."""
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    pos = 4

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointError("truncated checkpoint")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    version, n_layers = struct.unpack("<II", take(8))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    layers = []
    for _ in range(n_layers):
        out_dim, in_dim, code = struct.unpack("<IIB", take(9))
        if code not in _CODE_TAGS:
            raise CheckpointError(f"unknown activation code {code}")
        w = np.frombuffer(take(8 * out_dim * in_dim), dtype="<f8").reshape(out_dim, in_dim)
        b = np.frombuffer(take(8 * out_dim), dtype="<f8")
        layers.append(Layer(w.astype(np.float64), b.astype(np.float64), _CODE_TAGS[code]))
    (meta_len,) = struct.unpack("<Q", take(8))
    meta_text = take(meta_len).decode("utf-8")
    metadata = {}
    for line in meta_text.splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            metadata[k] = v
    model = MlpModel(layers)
    if expected_dims is not None and list(expected_dims) != model.dims:
        raise CheckpointError(
            f"dimension mismatch: checkpoint has {model.dims}, expected {list(expected_dims)}")
    return model, metadata
