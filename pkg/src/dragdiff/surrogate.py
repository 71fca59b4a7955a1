"""The drag estimator phi(x) = w . f_norm(x) + b.

f is a frozen random convolutional feature map: a 5x5 convolution with
N(0, 1) weights (valid padding), +2 bias, ReLU, then non-overlapping 55x55
mean pooling on a 224x224 input, giving out_channels * 4 * 4 features
(2560 at the default 160 channels).  The head is ridge regression on
per-column standardized features.  Both prediction and the input gradient
are exact: the gradient chains the linear head, the normalization, the
mean-pool spread, the ReLU mask, the transposed convolution, and the
bilinear-resize adjoint.

Models fitted from precomputed feature tables (externally supplied
embeddings) predict from record ids only; they have no image path and no
gradient, so they cannot steer a sampler.
"""

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.linalg import solve

from .imageops import resize_adjoint, resize_bilinear
from .rng import generator

__all__ = [
    "RandomConvExtractor",
    "SurrogateModel",
    "PrecomputedFeatureTable",
    "RidgeFit",
    "init_random_features",
    "extract_features",
    "extract_batch",
    "fit_ridge",
    "head_predict",
    "predict_drag",
    "grad_drag",
    "value_and_grad_drag",
    "evaluate",
    "fit_from_precomputed",
    "make_model",
    "save_model",
    "load_model",
    "save_feature_table",
    "load_feature_table",
]

MODEL_FORMAT = "dragdiff-surrogate-v1"


@dataclass(frozen=True)
class RandomConvExtractor:
    """Frozen random-weight convolutional feature map.

    Defaults reconstruct the 2560-dimensional random-feature configuration;
    the geometry is parameterized so small toy instances can be checked
    against a dense-loop oracle.
    """

    seed: int
    out_channels: int = 160
    kernel: int = 5
    bias: float = 2.0
    pool_window: int = 55
    pool_stride: int = 55
    input_side: int = 224
    in_channels: int = 3
    weights: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.out_channels < 1:
            raise ValueError(f"out_channels must be >= 1, got {self.out_channels}")
        if self.kernel < 1 or self.input_side <= self.kernel:
            raise ValueError("need input_side > kernel >= 1")
        if self.pool_stride != self.pool_window:
            raise ValueError("only non-overlapping pooling (stride == window) is supported")
        m = self.conv_side
        if m % self.pool_window != 0:
            raise ValueError(
                f"conv output side {m} not divisible by pool window {self.pool_window}"
            )
        w = generator(self.seed).standard_normal(
            (self.out_channels, self.in_channels, self.kernel, self.kernel)
        )
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @property
    def conv_side(self):
        return self.input_side - self.kernel + 1

    @property
    def grid_side(self):
        return self.conv_side // self.pool_window

    @property
    def feature_dim(self):
        return self.out_channels * self.grid_side ** 2

    def _weight_matrix(self, dtype):
        return np.ascontiguousarray(
            self.weights.reshape(self.out_channels, -1).T, dtype=dtype
        )


def init_random_features(seed, out_channels=160):
    """Extractor with N(0,1) weights drawn deterministically from ``seed``."""
    return RandomConvExtractor(seed=int(seed), out_channels=int(out_channels))


def _conv_response(extractor, image, dtype):
    """Pre-activation response (conv + bias) as an (m*m, C) matrix."""
    k = extractor.kernel
    m = extractor.conv_side
    img = np.ascontiguousarray(image, dtype=dtype)
    win = sliding_window_view(img, (k, k), axis=(1, 2))  # (cin, m, m, k, k)
    cols = np.ascontiguousarray(win.transpose(1, 2, 0, 3, 4)).reshape(m * m, -1)
    resp = cols @ extractor._weight_matrix(dtype)
    resp += dtype(extractor.bias) if dtype is not np.float64 else extractor.bias
    return resp


def _pool(extractor, relu_resp):
    """(m*m, C) ReLU responses -> flat feature vector, channel-major.

    Reduces row blocks before column blocks so both passes stream over
    contiguous memory; transposing to channel-major happens only on the
    g*g*C pooled grid, which is tiny.
    """
    m = extractor.conv_side
    g = extractor.grid_side
    p = extractor.pool_window
    C = extractor.out_channels
    rows = relu_resp.reshape(g, p, m, C).mean(axis=1)  # (g, m, C)
    pooled = rows.reshape(g, g, p, C).mean(axis=2)  # (g, g, C)
    return pooled.transpose(2, 0, 1).reshape(-1)


def extract_features(extractor, image, dtype=np.float64):
    """conv -> +bias -> ReLU -> mean pool -> flatten, in fixed order."""
    image = np.asarray(image)
    expected = (extractor.in_channels, extractor.input_side, extractor.input_side)
    if image.shape != expected:
        raise ValueError(f"expected image shape {expected}, got {image.shape}")
    resp = _conv_response(extractor, image, dtype)
    np.maximum(resp, 0, out=resp)
    return _pool(extractor, resp).astype(np.float64)


def extract_batch(extractor, images, dtype=np.float32):
    """Feature matrix for a sequence of images.

    float32 by default: the bulk training extraction is gemm-bound and the
    head solve tolerates single precision; prediction and gradients stay
    float64.
    """
    images = list(images)
    out = np.empty((len(images), extractor.feature_dim))
    for i, img in enumerate(images):
        out[i] = extract_features(extractor, img, dtype=dtype)
    return out


@dataclass(frozen=True)
class RidgeFit:
    """Ridge solution plus the feature normalization frozen at fit time."""

    w: np.ndarray
    b: float
    feature_mean: np.ndarray
    feature_std: np.ndarray


def fit_ridge(features, labels, lam, standardize=True):
    """Solve min_w ||Xs w - yc||^2 + lam ||w||^2.

    With ``standardize`` (the convention used throughout), Xs is the
    per-column standardized feature matrix (constant columns pass through as
    zeros), yc the centered labels, and the bias restores the label mean.
    With ``standardize=False`` the raw system is solved and the bias is 0.
    lam = 0 falls back to minimum-norm least squares; otherwise the primal
    or dual normal equations are used, whichever is smaller.
    """
    X = np.asarray(features, dtype=float)
    y = np.asarray(labels, dtype=float)
    if X.ndim != 2:
        raise ValueError(f"features must be 2D, got shape {X.shape}")
    n, d = X.shape
    if n < 1 or d < 1:
        raise ValueError(f"need n >= 1 and d >= 1, got {X.shape}")
    if y.shape != (n,):
        raise ValueError(f"labels shape {y.shape} != ({n},)")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise ValueError("nonfinite entries in features or labels")
    lam = float(lam)
    if not math.isfinite(lam) or lam < 0:
        raise ValueError(f"lambda must be finite and >= 0, got {lam}")

    if standardize:
        mean = X.mean(axis=0)
        std = X.std(axis=0)
        safe = np.where(std > 0, std, 1.0)
        Xs = (X - mean) / safe
        b = float(y.mean())
        yc = y - b
    else:
        mean = np.zeros(d)
        std = np.ones(d)
        Xs = X
        b = 0.0
        yc = y

    if lam == 0.0:
        w = np.linalg.lstsq(Xs, yc, rcond=None)[0]
    elif n < d:
        G = Xs @ Xs.T
        G[np.diag_indices_from(G)] += lam
        w = Xs.T @ solve(G, yc, assume_a="pos")
    else:
        A = Xs.T @ Xs
        A[np.diag_indices_from(A)] += lam
        w = solve(A, Xs.T @ yc, assume_a="pos")
    return RidgeFit(w=w, b=b, feature_mean=mean, feature_std=std)


def head_predict(fit, features):
    """Apply a fitted head to raw feature rows (n, d) or a single vector."""
    F = np.asarray(features, dtype=float)
    safe = np.where(fit.feature_std > 0, fit.feature_std, 1.0)
    return ((F - fit.feature_mean) / safe) @ fit.w + fit.b


@dataclass(frozen=True)
class SurrogateModel:
    """Frozen extractor plus fitted linear head."""

    extractor: object
    w: np.ndarray
    b: float
    lam: float
    feature_mean: np.ndarray
    feature_std: np.ndarray

    @property
    def guidable(self):
        """True when the model maps images (and therefore has a gradient)."""
        return isinstance(self.extractor, RandomConvExtractor)

    def _fit(self):
        return RidgeFit(self.w, self.b, self.feature_mean, self.feature_std)

    def predict(self, image):
        return predict_drag(self, image)

    def grad(self, image):
        return grad_drag(self, image)

    def value_and_grad(self, image):
        return value_and_grad_drag(self, image)

    def predict_features(self, features):
        return head_predict(self._fit(), features)

    def predict_id(self, record_id):
        if self.guidable:
            raise ValueError("image-extractor model predicts from images, not ids")
        return float(head_predict(self._fit(), self.extractor.rows[record_id]))


def make_model(extractor, fit, lam):
    return SurrogateModel(
        extractor=extractor,
        w=fit.w,
        b=fit.b,
        lam=float(lam),
        feature_mean=fit.feature_mean,
        feature_std=fit.feature_std,
    )


def _require_guidable(model):
    if not model.guidable:
        raise ValueError(
            "model was fitted on precomputed features; it has no image "
            "pathway or gradient and cannot be used here"
        )


def predict_drag(model, image):
    """phi(image): resize to the extractor grid, extract, apply the head."""
    _require_guidable(model)
    ex = model.extractor
    image = np.asarray(image, dtype=float)
    x = resize_bilinear(image, ex.input_side, ex.input_side)
    f = extract_features(ex, x)
    return float(head_predict(model._fit(), f))


def _grad_from_response(model, resp, out_shape):
    """Backward pass from the pre-ReLU response to the input image."""
    ex = model.extractor
    C, m, g, p, k = ex.out_channels, ex.conv_side, ex.grid_side, ex.pool_window, ex.kernel

    safe = np.where(model.feature_std > 0, model.feature_std, 1.0)
    dfeat = (model.w / safe).reshape(C, g, g)
    dmap = np.repeat(np.repeat(dfeat, p, axis=1), p, axis=2) / float(p * p)
    dresp = np.ascontiguousarray(dmap.reshape(C, m * m).T)  # (m*m, C)
    dresp[resp <= 0] = 0.0

    dcols = dresp @ ex._weight_matrix(np.float64).T  # (m*m, cin*k*k)
    dcols = dcols.reshape(m, m, ex.in_channels, k, k)
    gimg = np.zeros((ex.in_channels, ex.input_side, ex.input_side))
    for di in range(k):
        for dj in range(k):
            gimg[:, di : di + m, dj : dj + m] += dcols[:, :, :, di, dj].transpose(2, 0, 1)

    if out_shape[1:] != (ex.input_side, ex.input_side):
        return resize_adjoint(gimg, out_shape[1], out_shape[2])
    return gimg


def grad_drag(model, image):
    """d phi / d image, exact at every stage (ReLU gradient at 0 is 0)."""
    _require_guidable(model)
    ex = model.extractor
    image = np.asarray(image, dtype=float)
    x = resize_bilinear(image, ex.input_side, ex.input_side)
    resp = _conv_response(ex, x, np.float64)  # (m*m, C), pre-ReLU
    return _grad_from_response(model, resp, image.shape)


def value_and_grad_drag(model, image):
    """(phi, d phi / d image) sharing one forward convolution."""
    _require_guidable(model)
    ex = model.extractor
    image = np.asarray(image, dtype=float)
    x = resize_bilinear(image, ex.input_side, ex.input_side)
    resp = _conv_response(ex, x, np.float64)
    f = _pool(ex, np.maximum(resp, 0))
    phi = float(head_predict(model._fit(), f))
    return phi, _grad_from_response(model, resp, image.shape)


def evaluate(model, dataset):
    """(R^2, MSE) of the model over (image, label) pairs.

    R^2 = 1 - SS_res / SS_tot about the label mean; reported as nan when all
    labels are equal (SS_tot = 0).
    """
    pairs = list(dataset)
    if not pairs:
        raise ValueError("dataset is empty")
    predict = getattr(model, "predict", None)
    if predict is None:
        predict = lambda img: predict_drag(model, img)
    preds = np.array([float(predict(img)) for img, _ in pairs])
    labels = np.array([float(lab) for _, lab in pairs])
    resid = preds - labels
    mse = float(np.mean(resid ** 2))
    ss_tot = float(np.sum((labels - labels.mean()) ** 2))
    if ss_tot == 0.0:
        return float("nan"), mse
    r2 = 1.0 - float(np.sum(resid ** 2)) / ss_tot
    return r2, mse


@dataclass(frozen=True)
class PrecomputedFeatureTable:
    """Externally supplied per-record embeddings (id -> feature vector)."""

    rows: dict
    dim: int

    def __post_init__(self):
        for rid, vec in self.rows.items():
            if np.asarray(vec).shape != (self.dim,):
                raise ValueError(f"row {rid!r} has dim {np.asarray(vec).shape}, expected ({self.dim},)")


def fit_from_precomputed(table, labels, lam, standardize=True):
    """Fit the ridge head on feature-table rows.

    ``labels`` maps record id -> label (iteration order fixes the row
    order).  The resulting model predicts by id only and is not guidable.
    """
    labels = dict(labels)
    if not labels:
        raise ValueError("no labels given")
    missing = [rid for rid in labels if rid not in table.rows]
    if missing:
        raise ValueError(f"ids missing from feature table: {missing[:5]}")
    X = np.stack([np.asarray(table.rows[rid], dtype=float) for rid in labels])
    y = np.array([float(v) for v in labels.values()])
    fit = fit_ridge(X, y, lam, standardize=standardize)
    return make_model(table, fit, lam)


def save_feature_table(table, path):
    """CSV with a (dim, count) header line then rows ``id,f1..fd``."""
    with open(path, "w") as fh:
        fh.write(f"{table.dim},{len(table.rows)}\n")
        for rid, vec in table.rows.items():
            vals = ",".join(f"{v:.17g}" for v in np.asarray(vec, dtype=float))
            fh.write(f"{rid},{vals}\n")


def load_feature_table(path):
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        if len(header) != 2:
            raise ValueError(f"bad feature-table header in {path}: {header}")
        dim, count = int(header[0]), int(header[1])
        rows = {}
        for line in fh:
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != dim + 1:
                raise ValueError(f"row {parts[0]!r} has {len(parts) - 1} values, expected {dim}")
            rows[parts[0]] = np.array([float(v) for v in parts[1:]])
    if len(rows) != count:
        raise ValueError(f"feature table {path}: header says {count} rows, found {len(rows)}")
    return PrecomputedFeatureTable(rows=rows, dim=dim)


def save_model(model, path):
    """Versioned JSON; floats are written with full round-trip precision, so
    a load reproduces predictions exactly."""
    if isinstance(model.extractor, RandomConvExtractor):
        ex = model.extractor
        spec = {
            "type": "random_conv",
            "seed": ex.seed,
            "out_channels": ex.out_channels,
            "kernel": ex.kernel,
            "bias": ex.bias,
            "pool_window": ex.pool_window,
            "pool_stride": ex.pool_stride,
            "input_side": ex.input_side,
            "in_channels": ex.in_channels,
        }
    else:
        spec = {
            "type": "precomputed",
            "dim": model.extractor.dim,
            "rows": {rid: list(map(float, vec)) for rid, vec in model.extractor.rows.items()},
        }
    doc = {
        "format": MODEL_FORMAT,
        "extractor": spec,
        "lambda": model.lam,
        "head_weights": list(map(float, model.w)),
        "head_bias": model.b,
        "feature_mean": list(map(float, model.feature_mean)),
        "feature_std": list(map(float, model.feature_std)),
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_model(path):
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format") != MODEL_FORMAT:
        raise ValueError(f"unsupported model format {doc.get('format')!r} in {path}")
    spec = doc["extractor"]
    if spec["type"] == "random_conv":
        extractor = RandomConvExtractor(
            seed=spec["seed"],
            out_channels=spec["out_channels"],
            kernel=spec["kernel"],
            bias=spec["bias"],
            pool_window=spec["pool_window"],
            pool_stride=spec["pool_stride"],
            input_side=spec["input_side"],
            in_channels=spec["in_channels"],
        )
    elif spec["type"] == "precomputed":
        rows = {rid: np.array(vec, dtype=float) for rid, vec in spec["rows"].items()}
        extractor = PrecomputedFeatureTable(rows=rows, dim=spec["dim"])
    else:
        raise ValueError(f"unknown extractor type {spec['type']!r}")
    return SurrogateModel(
        extractor=extractor,
        w=np.array(doc["head_weights"], dtype=float),
        b=float(doc["head_bias"]),
        lam=float(doc["lambda"]),
        feature_mean=np.array(doc["feature_mean"], dtype=float),
        feature_std=np.array(doc["feature_std"], dtype=float),
    )
