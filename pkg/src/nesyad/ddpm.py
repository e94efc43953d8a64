"""Diffusion denoiser over flattened windows and reconstruction-error scoring.

A window is noised to several levels, denoised in one shot through the
epsilon-prediction identity, and the per-level reconstruction errors are
z-scored against the training corpus and averaged into an OOD score.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, NonFiniteError, Tensor
from .kb import KnowledgeBase, semantic_loss
from .kb.semantics import total_satisfaction
from .metrics import nearest_rank
from .signals import NormalizationStats, Window, stack

DEFAULT_T = 100
DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 0.06  # alpha_bar_T = 0.04655


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray

    @property
    def T(self) -> int:
        return len(self.betas)

    @property
    def alphas(self) -> np.ndarray:
        return 1.0 - self.betas

    @property
    def alpha_bar(self) -> np.ndarray:
        return np.cumprod(1.0 - self.betas)

    def abar(self, t: int) -> float:
        self.check_level(t)
        return float(self.alpha_bar[t - 1])

    def check_level(self, t) -> None:
        ts = np.atleast_1d(t)
        if np.any(ts < 1) or np.any(ts > self.T):
            raise ScheduleError(f"noise level {t} outside [1, {self.T}]")


def make_schedule(T: int = DEFAULT_T, beta_start: float = DEFAULT_BETA_START,
                  beta_end: float = DEFAULT_BETA_END, strict: bool = False) -> NoiseSchedule:
    """Linear betas. ``strict`` also demands alpha_bar_T < 0.05 so the last
    level is close to pure noise (training schedules are built strict)."""
    if T < 2:
        raise ScheduleError("need at least two diffusion steps")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ScheduleError("require 0 < beta_start <= beta_end < 1")
    sched = NoiseSchedule(np.linspace(beta_start, beta_end, T))
    if strict and not sched.alpha_bar[-1] < 0.05:
        raise ScheduleError(f"alpha_bar_T = {sched.alpha_bar[-1]:.4f}; schedule must end below 0.05")
    return sched


def default_levels(T: int) -> list[int]:
    return [math.ceil(f * T) for f in (0.1, 0.25, 0.5, 0.75)] + [T]


def forward_noise(x0, t, eps, schedule: NoiseSchedule):
    """``sqrt(abar_t) x0 + sqrt(1 - abar_t) eps``; ``t`` may be per-row."""
    schedule.check_level(t)
    ab = schedule.alpha_bar[np.asarray(t) - 1]
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != x0.shape:
        raise ad.ShapeError(f"noise shape {eps.shape} != signal shape {x0.shape}")
    if np.ndim(ab) == 1 and x0.ndim > 1:
        ab = ab.reshape((-1,) + (1,) * (x0.ndim - 1))
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def time_embedding(t, dim: int = 32) -> np.ndarray:
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(10_000.0) * np.arange(half) / half)
    arg = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(arg), np.cos(arg)], axis=1)


class DenoiserNet:
    """Epsilon predictor: [window, time embedding] -> 3 tanh layers -> window.

    A time-gated scalar skip ``a(t) * x_t`` is added to the output so the
    full-rank part of the noise does not have to pass the hidden bottleneck.
    """

    def __init__(self, data_dim: int, hidden: int = 256, time_dim: int = 32, seed: int = 0,
                 params: dict[str, np.ndarray] | None = None):
        self.data_dim = data_dim
        self.hidden = hidden
        self.time_dim = time_dim
        if params is None:
            params = self._init(seed)
        self.params = {k: Tensor(v, tracked=True, name=k) for k, v in params.items()}

    def _init(self, seed: int) -> dict[str, np.ndarray]:
        rng = np.random.default_rng(seed)
        dims = [self.data_dim + self.time_dim, self.hidden, self.hidden, self.hidden, self.data_dim]
        out = {}
        for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:]), start=1):
            scale = 1.0 / math.sqrt(fan_in)
            if i == len(dims) - 1:
                scale *= 0.1  # start near eps_hat = 0
            out[f"W{i}"] = rng.normal(0.0, scale, size=(fan_in, fan_out))
            out[f"b{i}"] = np.zeros((1, fan_out))
        out["Wg"] = np.zeros((self.time_dim, 1))
        out["bg"] = np.zeros((1, 1))
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def state(self) -> dict[str, np.ndarray]:
        return {k: p.data for k, p in self.params.items()}

    def __call__(self, x, t) -> Tensor:
        x = ad.as_tensor(x)
        if x.ndim != 2 or x.shape[1] != self.data_dim:
            raise ad.ShapeError(f"denoiser expects (batch, {self.data_dim}), got {x.shape}")
        emb = time_embedding(np.broadcast_to(np.asarray(t), (x.shape[0],)), self.time_dim)
        p = self.params
        h = ad.concat([x, Tensor(emb)], axis=1)
        h = ad.tanh(h @ p["W1"] + p["b1"])
        h = ad.tanh(h @ p["W2"] + p["b2"])
        h = ad.tanh(h @ p["W3"] + p["b3"])
        gate = Tensor(emb) @ p["Wg"] + p["bg"]
        return h @ p["W4"] + p["b4"] + gate * x


def estimate_x0(x_t, eps_hat, t, schedule: NoiseSchedule):
    """Invert the forward closed form given a noise estimate."""
    ab = schedule.alpha_bar[np.asarray(t) - 1]
    if np.ndim(ab) == 1:
        ab = ab[:, None]
    if isinstance(x_t, Tensor) or isinstance(eps_hat, Tensor):
        return (ad.as_tensor(x_t) - Tensor(np.sqrt(1.0 - ab)) * eps_hat) / Tensor(np.sqrt(ab))
    return (x_t - np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(ab)


# training -------------------------------------------------------------------

@dataclass
class NesyTerm:
    kb: KnowledgeBase
    lam: float
    stats: NormalizationStats | None = None
    quantifier: str = "mean"


@dataclass
class TrainConfig:
    epochs: int = 300
    batch_size: int = 64
    lr: float = 1e-3
    lr_final: float | None = None  # cosine decay target; None keeps lr fixed
    seed: int = 0


@dataclass
class TrainTrace:
    epoch: list[int] = field(default_factory=list)
    loss: list[float] = field(default_factory=list)
    mse: list[float] = field(default_factory=list)
    semantic: list[float] = field(default_factory=list)


def to_raw(x_flat: Tensor, shape: tuple[int, int], stats: NormalizationStats | None) -> Tensor:
    x = ad.reshape(x_flat, (x_flat.shape[0],) + tuple(shape))
    if stats is None:
        return x
    return x * Tensor(stats.std[None, :, None]) + Tensor(stats.mean[None, :, None])


def train(windows: Sequence[Window], schedule: NoiseSchedule, net: DenoiserNet,
          config: TrainConfig = TrainConfig(), nesy: NesyTerm | None = None,
          log_every: int = 0) -> TrainTrace:
    """Epsilon-prediction MSE plus ``lam * (1 - sat(KB, x0_hat))``.

    ``windows`` must already be normalized.
    """
    if not windows:
        raise ValueError("empty training corpus")
    if nesy is not None and nesy.lam < 0:
        raise ValueError("semantic loss weight must be non-negative")
    shape = windows[0].samples.shape
    X = stack(windows).reshape(len(windows), -1)
    if X.shape[1] != net.data_dim:
        raise ad.ShapeError(f"windows flatten to {X.shape[1]} values, net expects {net.data_dim}")
    use_nesy = nesy is not None and nesy.lam > 0
    rng = np.random.default_rng(config.seed)
    opt = Adam(net.parameters(), lr=config.lr)
    trace = TrainTrace()
    n = len(X)
    for epoch in range(config.epochs):
        if config.lr_final is not None and config.epochs > 1:
            frac = epoch / (config.epochs - 1)
            opt.state.lr = config.lr_final + 0.5 * (config.lr - config.lr_final) * (1 + math.cos(math.pi * frac))
        order = rng.permutation(n)
        tot = mse_tot = sem_tot = 0.0
        for start in range(0, n, config.batch_size):
            xb = X[order[start:start + config.batch_size]]
            b = len(xb)
            t = rng.integers(1, schedule.T + 1, size=b)
            eps = rng.standard_normal(xb.shape)
            x_t = forward_noise(xb, t, eps, schedule)
            try:
                with ad.Tape() as tape:
                    eps_hat = net(x_t, t)
                    mse = ad.mean(ad.power(eps_hat - eps, 2))
                    loss = mse
                    sem = None
                    if use_nesy:
                        x0_hat = estimate_x0(Tensor(x_t), eps_hat, t, schedule)
                        sem = semantic_loss(nesy.kb, to_raw(x0_hat, shape, nesy.stats),
                                            nesy.lam, nesy.quantifier)
                        loss = mse + sem
                grads = tape.gradient(loss, net.parameters())
            except NonFiniteError as exc:
                raise NonFiniteError(f"epoch {epoch}: {exc}") from None
            opt.step(grads)
            tot += loss.item() * b
            mse_tot += mse.item() * b
            sem_tot += (sem.item() if sem is not None else 0.0) * b
        trace.epoch.append(epoch)
        trace.loss.append(tot / n)
        trace.mse.append(mse_tot / n)
        trace.semantic.append(sem_tot / n)
        if log_every and epoch % log_every == 0:
            print(f"epoch {epoch}: loss={tot / n:.5f}")
    return trace


# reconstruction & scoring -----------------------------------------------------

def level_noise(seed: int, origin: int, t: int, size: int) -> np.ndarray:
    return np.random.default_rng([seed, origin, t]).standard_normal(size)


def reconstruct_batch(X: np.ndarray, origins: Sequence[int], net, t: int,
                      schedule: NoiseSchedule, seed: int = 0, chain: bool = False) -> np.ndarray:
    """x0 estimates for rows of ``X`` noised to level ``t`` with seeded noise.

    ``chain=True`` runs the full ancestral reverse chain from ``t`` instead of
    the single-shot estimate.
    """
    schedule.check_level(t)
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    d = X.shape[1]
    rngs = [np.random.default_rng([seed, int(o), int(t)]) for o in origins]
    eps = np.stack([r.standard_normal(d) for r in rngs])
    ab = schedule.alpha_bar[t - 1]
    x_t = math.sqrt(ab) * X + math.sqrt(1.0 - ab) * eps
    if not chain:
        eps_hat = net(x_t, t).data
        return (x_t - math.sqrt(1.0 - ab) * eps_hat) / math.sqrt(ab)
    x = x_t
    abar = schedule.alpha_bar
    for s in range(t, 0, -1):
        beta, alpha = schedule.betas[s - 1], 1.0 - schedule.betas[s - 1]
        eps_hat = net(x, s).data
        mean = (x - beta / math.sqrt(1.0 - abar[s - 1]) * eps_hat) / math.sqrt(alpha)
        if s > 1:
            var = beta * (1.0 - abar[s - 2]) / (1.0 - abar[s - 1])
            z = np.stack([r.standard_normal(d) for r in rngs])
            x = mean + math.sqrt(var) * z
        else:
            x = mean
    return x


def reconstruct(window: Window, net, t: int, schedule: NoiseSchedule, seed: int = 0,
                chain: bool = False) -> np.ndarray:
    out = reconstruct_batch(window.flat()[None, :], [window.origin], net, t, schedule, seed, chain)
    return out[0].reshape(window.samples.shape)


@dataclass(frozen=True)
class ProfileStats:
    """Per-level error mean/std fitted on training profiles."""
    levels: tuple[int, ...]
    mean: np.ndarray
    std: np.ndarray


@dataclass
class ReconstructionProfile:
    levels: tuple[int, ...]
    errors: np.ndarray
    score: float


def _check_levels(levels: Sequence[int], schedule: NoiseSchedule) -> tuple[int, ...]:
    levels = tuple(int(t) for t in levels)
    if len(levels) < 2:
        raise ScheduleError("need at least two noise levels")
    if len(set(levels)) != len(levels):
        raise ScheduleError(f"noise levels must be distinct: {levels}")
    schedule.check_level(levels)
    return levels


def profile_errors(windows: Sequence[Window], net, schedule: NoiseSchedule,
                   levels: Sequence[int], seed: int = 0, chain: bool = False,
                   batch_size: int = 512) -> np.ndarray:
    """``(N, K)`` matrix of per-level reconstruction MSEs."""
    levels = _check_levels(levels, schedule)
    X = stack(windows).reshape(len(windows), -1)
    origins = [w.origin for w in windows]
    out = np.empty((len(windows), len(levels)))
    for k, t in enumerate(levels):
        for s in range(0, len(X), batch_size):
            xb = X[s:s + batch_size]
            x0_hat = reconstruct_batch(xb, origins[s:s + batch_size], net, t, schedule, seed, chain)
            out[s:s + batch_size, k] = np.mean((x0_hat - xb) ** 2, axis=1)
    return out


def fit_profile_stats(errors: np.ndarray, levels: Sequence[int]) -> ProfileStats:
    mean = errors.mean(axis=0)
    std = np.maximum(errors.std(axis=0), 1e-12)
    return ProfileStats(tuple(levels), mean, std)


def aggregate(errors: np.ndarray, stats: ProfileStats, rule: str = "mean-z") -> np.ndarray:
    z = (np.asarray(errors) - stats.mean) / stats.std
    if rule == "mean-z":
        return z.mean(axis=-1)
    if rule == "max-z":
        return z.max(axis=-1)
    raise ValueError(f"unknown aggregation rule {rule!r}")


def reconstruction_profile(window: Window, net, schedule: NoiseSchedule, stats: ProfileStats,
                           seed: int = 0, rule: str = "mean-z",
                           chain: bool = False) -> ReconstructionProfile:
    errors = profile_errors([window], net, schedule, stats.levels, seed, chain)[0]
    return ReconstructionProfile(stats.levels, errors, float(aggregate(errors, stats, rule)))


@dataclass
class PseudoLabelSet:
    labels: np.ndarray
    threshold: float
    scores: np.ndarray
    percentile: float


def pseudo_label(scores: Sequence[float], percentile: float = 95.0,
                 threshold: float | None = None) -> PseudoLabelSet:
    """Label 1 iff score > threshold (nearest-rank percentile of ``scores``)."""
    s = np.asarray(scores, dtype=np.float64)
    if s.size == 0:
        raise ValueError("no scores to label")
    thr = nearest_rank(s, percentile) if threshold is None else float(threshold)
    return PseudoLabelSet((s > thr).astype(int), thr, s, percentile)


def denoised_satisfaction(windows: Sequence[Window], net, schedule: NoiseSchedule,
                          levels: Sequence[int], kb: KnowledgeBase,
                          stats: NormalizationStats | None, seed: int = 0) -> float:
    """KB degree of single-shot x0 estimates, averaged over the given levels."""
    X = stack(windows).reshape(len(windows), -1)
    shape = windows[0].samples.shape
    origins = [w.origin for w in windows]
    vals = []
    for t in levels:
        x0_hat = reconstruct_batch(X, origins, net, t, schedule, seed)
        vals.append(total_satisfaction(kb, to_raw(Tensor(x0_hat), shape, stats)).item())
    return float(np.mean(vals))


# persistence ------------------------------------------------------------------

@dataclass
class DdpmModel:
    net: DenoiserNet
    schedule: NoiseSchedule
    norm: NormalizationStats
    profile: ProfileStats | None
    window_shape: tuple[int, int]
    seed: int = 0

    def to_arrays(self) -> dict[str, np.ndarray]:
        arrays = {f"net.{k}": v for k, v in self.net.state().items()}
        arrays["net.shape"] = np.array([self.net.data_dim, self.net.hidden, self.net.time_dim], float)
        arrays["schedule.betas"] = self.schedule.betas
        arrays["norm.mean"] = self.norm.mean
        arrays["norm.std"] = self.norm.std
        arrays["window.shape"] = np.array(self.window_shape, float)
        arrays["meta.seed"] = np.array([float(self.seed)])
        if self.profile is not None:
            arrays["profile.levels"] = np.array(self.profile.levels, float)
            arrays["profile.mean"] = self.profile.mean
            arrays["profile.std"] = self.profile.std
        return arrays

    def save(self, path) -> None:
        ad.save_checkpoint(path, self.to_arrays())

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray],
                    channel_names: Sequence[str] = ()) -> "DdpmModel":
        data_dim, hidden, time_dim = (int(v) for v in arrays["net.shape"])
        params = {k[4:]: v for k, v in arrays.items() if k.startswith("net.") and k != "net.shape"}
        net = DenoiserNet(data_dim, hidden, time_dim, params=params)
        profile = None
        if "profile.levels" in arrays:
            profile = ProfileStats(tuple(int(t) for t in arrays["profile.levels"]),
                                   arrays["profile.mean"], arrays["profile.std"])
        C, L = (int(v) for v in arrays["window.shape"])
        return cls(net, NoiseSchedule(arrays["schedule.betas"]),
                   NormalizationStats(arrays["norm.mean"], arrays["norm.std"], tuple(channel_names)),
                   profile, (C, L), int(arrays["meta.seed"][0]))

    @classmethod
    def load(cls, path, channel_names: Sequence[str] = ()) -> "DdpmModel":
        return cls.from_arrays(ad.load_checkpoint(path), channel_names)
