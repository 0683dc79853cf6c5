"""Feature attribution for the trained classifier.

Gradient methods work directly on an :class:`~asdexplain.nn.MlpModel` and
explain the pre-softmax score of the class the model predicts for each row.
LIME and KernelSHAP only need a batch scoring function, so they also accept
any callable.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import nn

METHODS = ("integrated_gradients", "deep_lift", "deep_lift_shap", "gradient_shap",
           "guided_backprop", "lime", "kernel_shap")
RESCALE_EPS = 1e-7


@dataclass
class AttributionConfig:
    ig_steps: int = 256
    background_size: int = 50
    gradient_shap_samples: int = 64
    gradient_shap_noise: float = 0.1  # inputs are standardised, so 0.1 feature sd
    lime_samples: int = 2000
    lime_kernel_width: float = 0.25
    lime_ridge: float = 1e-3
    kernel_shap_coalitions: int = 2048
    kernel_shap_ridge: float = 1e-9
    max_samples: int = 256
    seed: int = 0

    def validate(self):
        counts = (self.ig_steps, self.background_size, self.gradient_shap_samples,
                  self.lime_samples, self.kernel_shap_coalitions, self.max_samples)
        if min(counts) < 1:
            raise ValueError("attribution sample counts must be >= 1")
        if self.gradient_shap_noise < 0:
            raise ValueError("noise sd must be non-negative")
        if self.lime_ridge <= 0 or self.kernel_shap_ridge < 0 or self.lime_kernel_width <= 0:
            raise ValueError("ridge penalties and kernel width must be positive")


@dataclass
class Attribution:
    method: str
    values: np.ndarray  # (samples, features)
    targets: np.ndarray


@dataclass
class FeatureRanking:
    method: str
    order: np.ndarray  # feature indices, most important first
    scores: np.ndarray | None = None
    seed: int = 0

    def write(self, path) -> None:
        lines = [f"# method={self.method} seed={self.seed}"] + [str(int(i)) for i in self.order]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def read(cls, path) -> "FeatureRanking":
        lines = Path(path).read_text().splitlines()
        if not lines or not lines[0].startswith("# method="):
            raise ValueError(f"{path}: missing ranking header")
        meta = dict(tok.split("=", 1) for tok in lines[0][1:].split())
        order = np.array([int(l) for l in lines[1:] if l.strip()], dtype=np.int64)
        return cls(meta["method"], order, None, int(meta.get("seed", 0)))


def _as_batch(x):
    x = np.asarray(x, dtype=np.float64)
    return (x[None, :], True) if x.ndim == 1 else (x, False)


def _baseline_rows(baseline, X):
    if baseline is None:
        return np.zeros_like(X)
    b = np.asarray(baseline, dtype=np.float64)
    if b.shape[-1] != X.shape[1]:
        raise ValueError("baseline width must match the input")
    return np.broadcast_to(b, X.shape)


def predicted_class(model, X):
    return np.argmax(nn.forward(model, X).logits, axis=1)


def _resolve_targets(model, X, target):
    if target is None:
        return predicted_class(model, X)
    return np.broadcast_to(np.asarray(target, dtype=np.int64), (X.shape[0],))


def _onehot(targets, k):
    g = np.zeros((len(targets), k))
    g[np.arange(len(targets)), targets] = 1.0
    return g


def score_gradient(model, X, targets, guided=False):
    """d logit[target] / d input for every row.

    With ``guided`` the backward pass through each ReLU also drops negative
    incoming gradient (guided backpropagation).
    """
    cache = nn.forward(model, X)
    g = _onehot(targets, model.layers[-1].out_dim)
    for idx in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[idx]
        if idx != len(model.layers) - 1 and layer.activation == "relu":
            g = g * (cache.preacts[idx] > 0)
            if guided:
                g = g * (g > 0)
        g = g @ layer.weight
    return g


def integrated_gradients(model, x, baseline=None, steps=256, target=None):
    """Midpoint-rule path integral of the target-score gradient, times (x - b)."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    X, single = _as_batch(x)
    B = _baseline_rows(baseline, X)
    targets = _resolve_targets(model, X, target)
    diff = X - B
    total = np.zeros_like(X)
    for i in range(steps):
        alpha = (i + 0.5) / steps
        total += score_gradient(model, B + alpha * diff, targets)
    out = diff * total / steps
    return out[0] if single else out


def deep_lift(model, x, baseline=None, target=None):
    """DeepLIFT with the Rescale rule on every nonlinearity.

    Multipliers are ``delta activation / delta pre-activation`` against the
    baseline forward pass, falling back to the local derivative where the
    pre-activation difference is below 1e-7.
    """
    X, single = _as_batch(x)
    B = np.ascontiguousarray(_baseline_rows(baseline, X))
    targets = _resolve_targets(model, X, target)
    cx = nn.forward(model, X)
    cb = nn.forward(model, B)
    g = _onehot(targets, model.layers[-1].out_dim)
    for idx in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[idx]
        if idx != len(model.layers) - 1 and layer.activation == "relu":
            dz = cx.preacts[idx] - cb.preacts[idx]
            da = cx.outputs[idx] - cb.outputs[idx]
            small = np.abs(dz) < RESCALE_EPS
            mult = np.where(small, (cx.preacts[idx] > 0).astype(np.float64),
                            da / np.where(small, 1.0, dz))
            g = g * mult
        g = g @ layer.weight
    out = g * (X - B)
    return out[0] if single else out


def deep_lift_shap(model, x, background, target=None):
    """Average DeepLIFT attribution over a set of baselines."""
    background = np.atleast_2d(np.asarray(background, dtype=np.float64))
    if background.shape[0] == 0:
        raise ValueError("background set is empty")
    X, single = _as_batch(x)
    targets = _resolve_targets(model, X, target)
    total = np.zeros_like(X)
    for b in background:
        total += deep_lift(model, X, b, targets)
    out = total / background.shape[0]
    return out[0] if single else out


def gradient_shap(model, x, background, n_samples=64, noise_sd=0.1, seed=0, target=None):
    """Expected gradients with Gaussian input noise.

    Each draw picks a baseline from ``background``, a point uniformly on the
    segment from it to x, adds N(0, noise_sd^2) noise and accumulates
    ``(x - b) * gradient``.
    """
    background = np.atleast_2d(np.asarray(background, dtype=np.float64))
    if background.shape[0] == 0:
        raise ValueError("background set is empty")
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    X, single = _as_batch(x)
    targets = _resolve_targets(model, X, target)
    rng = np.random.default_rng(seed)
    n = X.shape[0]
    total = np.zeros_like(X)
    for _ in range(n_samples):
        B = background[rng.integers(background.shape[0], size=n)]
        u = rng.uniform(size=(n, 1))
        point = B + u * (X - B)
        if noise_sd > 0:
            point = point + rng.normal(0.0, noise_sd, size=X.shape)
        total += (X - B) * score_gradient(model, point, targets)
    out = total / n_samples
    return out[0] if single else out


def guided_backprop(model, x, target=None):
    X, single = _as_batch(x)
    targets = _resolve_targets(model, X, target)
    out = score_gradient(model, X, targets, guided=True)
    return out[0] if single else out


def _scorer(model_or_fn, kind):
    if callable(model_or_fn):
        return model_or_fn
    if kind == "logits":
        return lambda batch: nn.forward(model_or_fn, batch).logits
    return lambda batch: nn.forward(model_or_fn, batch).output


def _all_masks(d):
    if d > 15:
        raise ValueError("exhaustive enumeration only supported for <= 15 features")
    return np.array(list(itertools.product((0.0, 1.0), repeat=d)))


def _evaluate_rows(fn, X, masks, base, targets, chunk=4096):
    """values[m, r] = fn(masked row r)[targets[r]] with absent features taken from base."""
    values = np.empty((masks.shape[0], X.shape[0]))
    for r in range(X.shape[0]):
        for start in range(0, masks.shape[0], chunk):
            m = masks[start:start + chunk]
            batch = base[r] + m * (X[r] - base[r])
            values[start:start + chunk, r] = np.asarray(fn(batch))[:, targets[r]]
    return values


def lime(model, x, n_samples=2000, kernel_width=0.25, ridge=1e-3, seed=0, target=None,
         masks=None):
    """Local linear surrogate over random keep/drop masks.

    Dropped features are set to 0. The surrogate regresses the target-class
    probability on the masks with weights ``exp(-d^2 / width^2)``, ``d`` the
    fraction of dropped features, using ridge with an unpenalised intercept.
    ``masks="exhaustive"`` enumerates all masks (small inputs only).

    ``model`` is an MlpModel or a callable mapping a batch to class
    probabilities.
    """
    X, single = _as_batch(x)
    d = X.shape[1]
    if isinstance(masks, str) and masks == "exhaustive":
        Z = _all_masks(d)
    elif masks is not None:
        Z = np.asarray(masks, dtype=np.float64)
    else:
        if n_samples < 10:
            raise ValueError("LIME needs at least 10 samples")
        Z = np.random.default_rng(seed).integers(0, 2, size=(n_samples, d)).astype(np.float64)
    if np.all(Z == Z[0]):
        raise ValueError("degenerate LIME sample: every mask is identical")
    fn = _scorer(model, "proba")
    if target is None:
        target = np.argmax(np.asarray(fn(X)), axis=1)
    targets = np.broadcast_to(np.asarray(target, dtype=np.int64), (X.shape[0],))
    Y = _evaluate_rows(fn, X, Z, np.zeros_like(X), targets)

    dist = 1.0 - Z.mean(axis=1)
    w = np.exp(-(dist ** 2) / kernel_width ** 2)
    w = w / w.sum()
    z_bar = w @ Z
    y_bar = w @ Y
    Zc = Z - z_bar
    A = Zc.T @ (w[:, None] * Zc) + ridge * np.eye(d)
    coef = np.linalg.solve(A, Zc.T @ (w[:, None] * (Y - y_bar))).T
    return coef[0] if single else coef


def shapley_kernel_weight(d, size):
    if size == 0 or size == d:
        return math.inf
    return (d - 1) / (math.comb(d, size) * size * (d - size))


def _sample_coalitions(d, n, rng):
    """Paired sampling of coalition masks with sizes drawn from the Shapley kernel."""
    sizes = np.arange(1, d)
    p = (d - 1) / (sizes * (d - sizes))
    p = p / p.sum()
    half = (n + 1) // 2
    Z = np.zeros((2 * half, d))
    chosen = rng.choice(sizes, size=half, p=p)
    for k, s in enumerate(chosen):
        Z[2 * k, rng.choice(d, size=s, replace=False)] = 1.0
        Z[2 * k + 1] = 1.0 - Z[2 * k]
    return Z[:n], np.full(n, 1.0 / n)


def kernel_shap(model, x, baseline=None, n_coalitions=2048, ridge=1e-9, seed=0, target=None,
                exhaustive=None):
    """Shapley values from the kernel-weighted least-squares formulation.

    The value of a coalition is the target score with the other features
    set to the baseline. Efficiency (``sum(phi) = v(all) - v(none)``) is
    imposed exactly through a Lagrange multiplier. Exhaustive enumeration is
    used automatically for up to 15 features unless ``exhaustive`` says
    otherwise.

    ``model`` is an MlpModel or a callable returning per-class scores.
    """
    X, single = _as_batch(x)
    d = X.shape[1]
    base = np.ascontiguousarray(_baseline_rows(baseline, X))
    fn = _scorer(model, "logits")
    if target is None:
        target = np.argmax(np.asarray(fn(X)), axis=1)
    targets = np.broadcast_to(np.asarray(target, dtype=np.int64), (X.shape[0],))
    if exhaustive is None:
        exhaustive = d <= 15
    if exhaustive:
        Z = _all_masks(d)[1:-1]
        w = np.array([shapley_kernel_weight(d, int(s)) for s in Z.sum(axis=1)])
    else:
        if n_coalitions < d + 2:
            raise ValueError(f"need at least {d + 2} coalitions for {d} features")
        Z, w = _sample_coalitions(d, n_coalitions, np.random.default_rng(seed))

    ends = np.vstack([np.zeros(d), np.ones(d)])
    v_ends = _evaluate_rows(fn, X, ends, base, targets)
    v0, v1 = v_ends[0], v_ends[1]
    V = _evaluate_rows(fn, X, Z, base, targets) - v0

    A = Z.T @ (w[:, None] * Z) + ridge * np.eye(d)
    kkt = np.zeros((d + 1, d + 1))
    kkt[:d, :d] = A
    kkt[:d, d] = 1.0
    kkt[d, :d] = 1.0
    rhs = np.vstack([Z.T @ (w[:, None] * V), (v1 - v0)[None, :]])
    if np.linalg.matrix_rank(kkt) < d + 1:
        raise ValueError("singular Shapley system: too few coalitions")
    phi = np.linalg.solve(kkt, rhs)[:d].T
    # absorb solver rounding so efficiency holds to machine precision
    phi += ((v1 - v0) - phi.sum(axis=1))[:, None] / d
    return phi[0] if single else phi


def random_ranking(n_features, seed=0) -> FeatureRanking:
    if n_features < 1:
        raise ValueError("n_features must be >= 1")
    order = np.random.default_rng(seed).permutation(n_features).astype(np.int64)
    return FeatureRanking("random", order, None, seed)


def rank_features(attr: Attribution, seed=0) -> FeatureRanking:
    """Order features by mean absolute attribution, lower index first on ties."""
    values = np.atleast_2d(attr.values)
    if values.shape[0] < 1:
        raise ValueError("need at least one attributed sample")
    scores = np.abs(values).mean(axis=0)
    order = np.lexsort((np.arange(scores.size), -scores))
    return FeatureRanking(attr.method, order.astype(np.int64), scores, seed)


def compute_attribution(method, model, X, cfg: AttributionConfig, background=None) -> Attribution:
    """Dispatch one named method over a batch (baseline = zero vector)."""
    cfg.validate()
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    targets = predicted_class(model, X)
    if method == "integrated_gradients":
        vals = integrated_gradients(model, X, None, cfg.ig_steps, targets)
    elif method == "deep_lift":
        vals = deep_lift(model, X, None, targets)
    elif method == "deep_lift_shap":
        vals = deep_lift_shap(model, X, background, targets)
    elif method == "gradient_shap":
        vals = gradient_shap(model, X, background, cfg.gradient_shap_samples,
                             cfg.gradient_shap_noise, cfg.seed, targets)
    elif method == "guided_backprop":
        vals = guided_backprop(model, X, targets)
    elif method == "lime":
        vals = lime(model, X, cfg.lime_samples, cfg.lime_kernel_width, cfg.lime_ridge,
                    cfg.seed, targets)
    elif method == "kernel_shap":
        vals = kernel_shap(model, X, None, cfg.kernel_shap_coalitions, cfg.kernel_shap_ridge,
                           cfg.seed, targets)
    else:
        raise ValueError(f"unknown attribution method {method!r}")
    return Attribution(method, np.asarray(vals), targets)


def write_attribution_scores(path, ranking: FeatureRanking, original_index) -> None:
    """``feature_index,original_edge_index,score`` in reduced-index order."""
    scores = ranking.scores
    with open(path, "w", newline="\n") as fh:
        fh.write("feature_index,original_edge_index,score\n")
        for i, orig in enumerate(original_index):
            fh.write(f"{i},{int(orig)},{repr(float(scores[i]))}\n")


def read_attribution_scores(path):
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return data[:, 0].astype(np.int64), data[:, 1].astype(np.int64), data[:, 2]
