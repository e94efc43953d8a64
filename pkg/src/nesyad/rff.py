"""Random Fourier features and the distilled logistic detector.

The feature map interleaves ``cos(w_i.x + b_i)`` and ``sin(w_i.x + b_i)``
for ``i = 1..D``; inner products of feature vectors divided by ``D``
estimate the Gaussian kernel ``exp(-|x - y|^2 / (2 sigma^2))``. Inference is
one ``(D, d)`` projection, the trig pair, one length-``2D`` dot product and
a sigmoid.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .metrics import auroc

# both inference products go through this name so tests can count them
matmul = np.matmul


class DistillError(ValueError):
    pass


@dataclass(frozen=True)
class RffProjection:
    W: np.ndarray  # (D, d)
    b: np.ndarray  # (D,)
    sigma: float

    @property
    def D(self) -> int:
        return self.W.shape[0]

    @property
    def d(self) -> int:
        return self.W.shape[1]

    @property
    def dim(self) -> int:
        return 2 * self.W.shape[0]


def make_projection(d: int, D: int, sigma: float, seed: int,
                    metric: np.ndarray | None = None) -> RffProjection:
    """Frequencies ``N(0, I) / sigma``; with ``metric`` A the kernel becomes
    ``exp(-|A (x - y)|^2 / (2 sigma^2))`` at no extra inference cost."""
    if d < 1 or D < 1:
        raise ValueError("input and feature dimensions must be positive")
    if not sigma > 0:
        raise ValueError(f"kernel bandwidth must be positive, got {sigma}")
    rng = np.random.default_rng(seed)
    W = rng.standard_normal((D, d)) / sigma
    b = rng.uniform(0.0, 2 * np.pi, size=D)
    if metric is not None:
        if metric.shape != (d, d):
            raise ValueError(f"metric must be ({d}, {d}), got {metric.shape}")
        W = W @ metric
    return RffProjection(W, b, float(sigma))


def whitening_metric(X: np.ndarray, floor: float = 1.0) -> np.ndarray:
    """Regularised whitening ``diag(lambda + floor * mean(lambda))^-1/2 V^T``.

    Windows of correlated channels are strongly anisotropic; an isotropic
    kernel mostly sees the few dominant directions and misses anomalies that
    live in low-variance ones. The floor keeps noise directions from being
    blown up.
    """
    X = np.asarray(X, dtype=np.float64)
    if len(X) < 2:
        raise DistillError("need at least two windows to estimate a metric")
    C = np.cov(X, rowvar=False)
    lam, V = np.linalg.eigh(C)
    lam = np.maximum(lam, 0.0)
    return (V / np.sqrt(lam + floor * lam.mean() + 1e-12)).T


def median_heuristic(X: np.ndarray, max_points: int = 1000, seed: int = 0) -> float:
    """Median pairwise Euclidean distance over at most ``max_points`` rows."""
    X = np.asarray(X, dtype=np.float64)
    if len(X) > max_points:
        X = X[np.random.default_rng(seed).choice(len(X), max_points, replace=False)]
    sq = np.sum(X * X, axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2 * X @ X.T, 0.0)
    iu = np.triu_indices(len(X), k=1)
    med = float(np.median(np.sqrt(d2[iu])))
    if not med > 0:
        raise DistillError("median pairwise distance is zero; cannot set a bandwidth")
    return med


def _interleave(z: np.ndarray) -> np.ndarray:
    out = np.empty(z.shape[:-1] + (2 * z.shape[-1],))
    out[..., 0::2] = np.cos(z)
    out[..., 1::2] = np.sin(z)
    return out


def rff_features(x, proj: RffProjection) -> np.ndarray:
    """Feature map for a vector ``(d,)`` or a batch ``(n, d)``."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != proj.d:
        raise ValueError(f"input length {x.shape[-1]} != projection input dim {proj.d}")
    return _interleave(matmul(x, proj.W.T) + proj.b)


def kernel_estimate(x, y, proj: RffProjection) -> float:
    return float(rff_features(x, proj) @ rff_features(y, proj)) / proj.D


def rbf_kernel(x, y, sigma: float) -> float:
    diff = np.asarray(x, dtype=np.float64) - np.asarray(y, dtype=np.float64)
    return math.exp(-float(diff @ diff) / (2.0 * sigma * sigma))


@dataclass
class DistilledClassifier:
    projection: RffProjection
    w: np.ndarray  # (2D,)
    bias: float
    # deployment block: lets the file stand alone for streaming inference
    channels: int = 0
    length: int = 0
    channel_names: tuple[str, ...] = ()
    norm_mean: np.ndarray = field(default_factory=lambda: np.zeros(0))
    norm_std: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        if self.w.shape != (self.projection.dim,):
            raise ValueError(f"weight length {self.w.shape} != 2D = {self.projection.dim}")


def predict_prob(x, clf: DistilledClassifier) -> float:
    """Sigmoid of ``w . phi(x) + b`` for one flattened, normalized window."""
    proj = clf.projection
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (proj.d,):
        raise ValueError(f"input length {x.shape} != projection input dim {proj.d}")
    z = matmul(proj.W, x) + proj.b
    phi = np.empty(2 * proj.D)
    phi[0::2] = np.cos(z)
    phi[1::2] = np.sin(z)
    s = matmul(clf.w, phi) + clf.bias
    return 1.0 / (1.0 + math.exp(-s)) if s >= 0 else math.exp(s) / (1.0 + math.exp(s))


def predict_batch(X, clf: DistilledClassifier) -> np.ndarray:
    s = rff_features(X, clf.projection) @ clf.w + clf.bias
    return 0.5 * (1.0 + np.tanh(0.5 * s))


# training ---------------------------------------------------------------------

@dataclass
class DistillConfig:
    ridge: float = 1e-4
    max_iter: int = 100
    tol: float = 1e-9
    class_weight: bool = False


@dataclass
class DistillTrace:
    loss: list[float] = field(default_factory=list)
    grad_norm: list[float] = field(default_factory=list)


def _sigmoid(s: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * s))


def logistic_objective(theta: np.ndarray, F: np.ndarray, y: np.ndarray, ridge: float,
                       sample_weight: np.ndarray | None = None):
    """Mean cross-entropy + ridge * |w|^2 (bias unpenalized), with gradient."""
    w, b = theta[:-1], theta[-1]
    s = F @ w + b
    sw = np.full(len(y), 1.0 / len(y)) if sample_weight is None else sample_weight
    # log(1 + e^s) - y s, computed stably
    ce = np.logaddexp(0.0, s) - y * s
    loss = float(sw @ ce + ridge * (w @ w))
    r = sw * (_sigmoid(s) - y)
    grad = np.concatenate([F.T @ r + 2 * ridge * w, [r.sum()]])
    return loss, grad, s


def fit_logistic(F: np.ndarray, y: np.ndarray, config: DistillConfig = DistillConfig(),
                 sample_weight: np.ndarray | None = None) -> tuple[np.ndarray, float, DistillTrace]:
    """Newton's method with backtracking; returns (w, bias, trace)."""
    n, m = F.shape
    A = np.hstack([F, np.ones((n, 1))])
    theta = np.zeros(m + 1)
    reg = np.full(m + 1, 2 * config.ridge)
    reg[-1] = 0.0
    sw = np.full(n, 1.0 / n) if sample_weight is None else sample_weight
    trace = DistillTrace()
    loss, grad, s = logistic_objective(theta, F, y, config.ridge, sw)
    for _ in range(config.max_iter):
        trace.loss.append(loss)
        trace.grad_norm.append(float(np.linalg.norm(grad)))
        if trace.grad_norm[-1] < config.tol:
            break
        p = _sigmoid(s)
        H = (A * (sw * p * (1 - p))[:, None]).T @ A + np.diag(reg)
        H[-1, -1] += 1e-12
        step = np.linalg.solve(H, grad)
        t = 1.0
        decrement = float(grad @ step)
        while True:
            cand = theta - t * step
            c_loss, c_grad, c_s = logistic_objective(cand, F, y, config.ridge, sw)
            if c_loss <= loss - 1e-4 * t * decrement or t < 1e-10:
                break
            t *= 0.5
        if c_loss > loss:
            break
        theta, loss, grad, s = cand, c_loss, c_grad, c_s
    else:
        trace.loss.append(loss)
        trace.grad_norm.append(float(np.linalg.norm(grad)))
    return theta[:-1].copy(), float(theta[-1]), trace


def distill(X: np.ndarray, labels: Sequence[int], proj: RffProjection,
            config: DistillConfig = DistillConfig()) -> tuple[DistilledClassifier, DistillTrace]:
    """Fit the logistic head on RFF features of flattened windows ``X``."""
    y = np.asarray(labels, dtype=np.float64)
    if not np.all((y == 0) | (y == 1)):
        raise DistillError("labels must be binary")
    if y.min() == y.max():
        raise DistillError(
            f"all pseudo-labels are {int(y[0])}: the labeling threshold is degenerate; "
            "lower the percentile (or check the score distribution) so both classes appear")
    F = rff_features(np.asarray(X, dtype=np.float64), proj)
    sw = None
    if config.class_weight:
        pos = y.mean()
        sw = np.where(y == 1, 0.5 / pos, 0.5 / (1 - pos)) / len(y)
    w, b, trace = fit_logistic(F, y, config, sw)
    return DistilledClassifier(proj, w, b), trace


# evaluation -------------------------------------------------------------------

@dataclass
class FidelityReport:
    agreement: float
    confusion: dict[str, int]
    auroc: float | None
    n: int


def fidelity(clf: DistilledClassifier, X: np.ndarray, pseudo_labels: Sequence[int],
             truth: Sequence[int] | None = None) -> FidelityReport:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if len(X) == 0:
        raise ValueError("empty evaluation set")
    p = predict_batch(X, clf)
    pred = (p > 0.5).astype(int)
    y = np.asarray(pseudo_labels).astype(int)
    confusion = {
        "tp": int(((pred == 1) & (y == 1)).sum()),
        "fp": int(((pred == 1) & (y == 0)).sum()),
        "tn": int(((pred == 0) & (y == 0)).sum()),
        "fn": int(((pred == 0) & (y == 1)).sum()),
    }
    area = auroc(p, truth) if truth is not None else None
    return FidelityReport(float(np.mean(pred == y)), confusion, area, len(y))


# persistence ------------------------------------------------------------------

MAGIC = b"NSRF"
VERSION = 1


def encode_classifier(clf: DistilledClassifier) -> bytes:
    proj = clf.projection
    f8 = lambda a: np.ascontiguousarray(a, dtype="<f8").tobytes()  # noqa: E731
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<QQ", proj.d, proj.D),
             struct.pack("<d", proj.sigma), f8(proj.W), f8(proj.b), f8(clf.w),
             struct.pack("<d", clf.bias)]
    names = "\n".join(clf.channel_names).encode("utf-8")
    parts += [struct.pack("<QQ", clf.channels, clf.length), struct.pack("<Q", len(names)), names,
              struct.pack("<Q", len(clf.norm_mean)), f8(clf.norm_mean), f8(clf.norm_std)]
    return b"".join(parts)


def decode_classifier(blob: bytes) -> DistilledClassifier:
    if blob[:4] != MAGIC:
        raise ValueError("not an NSRF classifier file (bad magic)")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        raise ValueError(f"unsupported classifier version {version}")
    pos = 8
    d, D = struct.unpack_from("<QQ", blob, pos)
    pos += 16
    (sigma,) = struct.unpack_from("<d", blob, pos)
    pos += 8

    def take(count):
        nonlocal pos
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=pos).astype(np.float64)
        pos += 8 * count
        return arr

    W = take(D * d).reshape(D, d)
    b = take(D)
    w = take(2 * D)
    (bias,) = struct.unpack_from("<d", blob, pos)
    pos += 8
    channels, length = struct.unpack_from("<QQ", blob, pos)
    pos += 16
    (n_names,) = struct.unpack_from("<Q", blob, pos)
    pos += 8
    raw = blob[pos:pos + n_names].decode("utf-8")
    pos += n_names
    names = tuple(raw.split("\n")) if raw else ()
    (n_norm,) = struct.unpack_from("<Q", blob, pos)
    pos += 8
    mean = take(n_norm)
    std = take(n_norm)
    return DistilledClassifier(RffProjection(W, b, sigma), w, bias, channels, length, names, mean, std)


def save_classifier(clf: DistilledClassifier, path: str | Path) -> None:
    Path(path).write_bytes(encode_classifier(clf))


def load_classifier(path: str | Path) -> DistilledClassifier:
    return decode_classifier(Path(path).read_bytes())
