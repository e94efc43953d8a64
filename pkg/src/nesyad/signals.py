"""Synthetic robot-arm telemetry, CSV ingestion, windowing and z-scoring.

Streams are ``(C, N)`` float64 arrays. Anomaly tags are kept apart from the
training path on purpose: training and scoring functions accept
:class:`Window` lists only.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence, TextIO

import numpy as np

ANOMALY_KINDS = ("spike", "drift", "stuck", "correlation-break")
TAG_KINDS = ANOMALY_KINDS + ("none",)


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class AnomalyTag:
    kind: str
    channels: tuple[str, ...]
    start: int
    end: int  # exclusive

    def __post_init__(self):
        if self.kind not in TAG_KINDS:
            raise DataError(f"unknown anomaly kind {self.kind!r}")
        if not 0 <= self.start <= self.end:
            raise DataError(f"bad tag interval [{self.start}, {self.end})")


@dataclass
class Stream:
    data: np.ndarray
    channel_names: list[str]
    timestamps: np.ndarray | None = None

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    def __len__(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class Window:
    samples: np.ndarray  # (C, L)
    origin: int
    channel_names: tuple[str, ...]

    @property
    def channels(self) -> int:
        return self.samples.shape[0]

    @property
    def length(self) -> int:
        return self.samples.shape[1]

    def flat(self) -> np.ndarray:
        return self.samples.reshape(-1)


@dataclass(frozen=True)
class NormalizationStats:
    mean: np.ndarray
    std: np.ndarray
    channel_names: tuple[str, ...] = ()


@dataclass
class GeneratorConfig:
    channels: int = 6
    length: int = 40_000
    window: int = 64
    sinusoids: int = 3
    noise: float = 0.02
    anomaly_rate: float = 0.05
    coupling: bool = True
    kinds: tuple[str, ...] = ANOMALY_KINDS

    def validate(self) -> None:
        if self.channels < 1:
            raise DataError("generator needs at least one channel")
        if self.window < 1 or self.length < self.window:
            raise DataError("stream length must be at least one window")
        if not 1 <= self.sinusoids <= 3:
            raise DataError("sinusoids per channel must be in 1..3")
        if self.noise < 0:
            raise DataError("noise amplitude must be non-negative")
        if not 0.0 <= self.anomaly_rate <= 0.5:
            raise DataError("anomaly rate must lie in [0, 0.5]")
        bad = set(self.kinds) - set(ANOMALY_KINDS)
        if bad or not self.kinds:
            raise DataError(f"invalid anomaly kinds {sorted(bad)}")


@dataclass
class GeneratedStream:
    stream: Stream
    tags: list[AnomalyTag]
    components: list[list[tuple[float, float, float]]] = field(default_factory=list)
    coupling: np.ndarray | None = None
    offsets: np.ndarray | None = None


def channel_names(channels: int) -> list[str]:
    joints = math.ceil(channels / 2)
    return [f"joint{i + 1}" for i in range(joints)] + [
        f"current{i + 1}" for i in range(channels - joints)
    ]


def generate_stream(config: GeneratorConfig, seed: int) -> GeneratedStream:
    """Joint angles as sums of sinusoids; currents linearly coupled to joints.

    The stream is cut into ``window``-long slots; each slot independently
    receives one anomaly with probability ``anomaly_rate`` and is otherwise
    tagged ``none``.
    """
    config.validate()
    rng = np.random.default_rng(seed)
    C, N = config.channels, config.length
    names = channel_names(C)
    joints = math.ceil(C / 2)
    n = np.arange(N, dtype=np.float64)

    components: list[list[tuple[float, float, float]]] = []
    data = np.zeros((C, N))
    for c in range(joints):
        comps = []
        for _ in range(config.sinusoids):
            amp = rng.uniform(0.2, 0.6)
            period = rng.uniform(24.0, 160.0)
            phase = rng.uniform(0.0, 2 * np.pi)
            comps.append((amp, 1.0 / period, phase))
            data[c] += amp * np.sin(2 * np.pi * n / period + phase)
        components.append(comps)

    coupling = None
    offsets = np.zeros(C)
    if C > joints:
        coupling = np.zeros((C - joints, joints))
        for i in range(C - joints):
            coupling[i] = rng.uniform(-0.15, 0.15, size=joints)
            coupling[i, i % joints] = rng.uniform(1.5, 2.5)
        if not config.coupling:
            coupling[:] = 0.0
        offsets[joints:] = rng.uniform(2.0, 4.0, size=C - joints)
        data[joints:] = coupling @ data[:joints] + offsets[joints:, None]
    if config.noise > 0:
        scale = np.maximum(data.std(axis=1), 1.0)
        data += config.noise * scale[:, None] * rng.standard_normal((C, N))

    tags = _inject(data, names, config, rng)
    stream = Stream(data, names, np.arange(N))
    return GeneratedStream(stream, tags, components, coupling, offsets)


def _inject(data: np.ndarray, names: list[str], config: GeneratorConfig,
            rng: np.random.Generator) -> list[AnomalyTag]:
    C, N = data.shape
    L = config.window
    joints = math.ceil(C / 2)
    clean = data.copy()
    std = clean.std(axis=1)
    tags = []
    for slot_start in range(0, N - L + 1, L):
        if rng.random() >= config.anomaly_rate:
            tags.append(AnomalyTag("none", (), slot_start, slot_start + L))
            continue
        kind = config.kinds[rng.integers(len(config.kinds))]
        if kind == "correlation-break" and C > joints:
            ch = int(rng.integers(joints, C))
        else:
            ch = int(rng.integers(C))
        if kind == "spike":
            dur = int(rng.integers(1, 4))
        else:
            dur = int(rng.integers(L // 2, L + 1))
        start = slot_start + int(rng.integers(0, L - dur + 1))
        end = start + dur
        seg = slice(start, end)
        sign = rng.choice([-1.0, 1.0])
        if kind == "spike":
            data[ch, seg] += sign * rng.uniform(6.0, 10.0) * std[ch]
        elif kind == "drift":
            tau = np.arange(dur) / dur
            data[ch, seg] += sign * rng.uniform(3.0, 5.0) * std[ch] * np.minimum(1.0, 2.0 * tau + 0.25)
        elif kind == "stuck":
            data[ch, seg] = data[ch, start]
        else:
            # mirror the channel about its mean: same marginal, broken coupling
            mu = clean[ch].mean()
            data[ch, seg] = 2 * mu - data[ch, seg]
        tags.append(AnomalyTag(kind, (names[ch],), start, end))
    return tags


# CSV -------------------------------------------------------------------------

def export_csv(stream: Stream, dest: str | Path | TextIO) -> None:
    ts = stream.timestamps if stream.timestamps is not None else np.arange(len(stream))
    def write(fh):
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["timestamp", *stream.channel_names])
        for i in range(len(stream)):
            w.writerow([_fmt_ts(ts[i]), *(repr(float(v)) for v in stream.data[:, i])])
    if isinstance(dest, (str, Path)):
        with open(dest, "w", encoding="utf-8", newline="") as fh:
            write(fh)
    else:
        write(dest)


def _fmt_ts(value) -> str:
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return str(value)


def parse_row(row: Sequence[str], width: int, lineno: int, header: Sequence[str]) -> list[float]:
    if len(row) != width + 1:
        raise DataError(f"row {lineno}: expected {width + 1} cells, got {len(row)}")
    values = []
    for j, cell in enumerate(row[1:], start=1):
        try:
            v = float(cell)
        except ValueError:
            raise DataError(f"row {lineno}, column {header[j]!r}: non-numeric cell {cell!r}") from None
        if not math.isfinite(v):
            raise DataError(f"row {lineno}, column {header[j]!r}: non-finite cell {cell!r}")
        values.append(v)
    return values


def ingest_csv(source: str | Path | TextIO) -> Stream:
    if isinstance(source, (str, Path)):
        with open(source, encoding="utf-8", newline="") as fh:
            return ingest_csv(fh)
    reader = csv.reader(source)
    header = next(reader, None)
    if not header:
        raise DataError("empty CSV file")
    if len(header) < 2:
        raise DataError("CSV needs a timestamp column and at least one channel")
    names = [h.strip() for h in header[1:]]
    rows, stamps = [], []
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        rows.append(parse_row(row, len(names), lineno, header))
        stamps.append(row[0])
    if not rows:
        raise DataError("CSV has a header but no samples")
    data = np.array(rows, dtype=np.float64).T.copy()
    try:
        ts = np.array([int(s) for s in stamps])
    except ValueError:
        ts = np.array(stamps, dtype=object)
    return Stream(data, names, ts)


def export_tags(tags: Sequence[AnomalyTag], dest: str | Path) -> None:
    with open(dest, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["kind", "channels", "start", "end"])
        for t in tags:
            w.writerow([t.kind, ";".join(t.channels), t.start, t.end])


def ingest_tags(path: str | Path) -> list[AnomalyTag]:
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [AnomalyTag(r["kind"], tuple(c for c in r["channels"].split(";") if c),
                       int(r["start"]), int(r["end"])) for r in rows]


# windows ---------------------------------------------------------------------

def windowize(stream: Stream, length: int, stride: int) -> list[Window]:
    N = len(stream)
    if stride < 1:
        raise DataError("stride must be >= 1")
    if length < 1 or length > N:
        raise DataError(f"window length {length} exceeds stream length {N}")
    names = tuple(stream.channel_names)
    return [Window(stream.data[:, o:o + length].copy(), o, names)
            for o in range(0, N - length + 1, stride)]


def window_labels(windows: Sequence[Window], tags: Sequence[AnomalyTag],
                  min_overlap: float = 0.25) -> np.ndarray:
    """Evaluation-only ground truth: 1 if a window covers >=25% of a tag."""
    real = [t for t in tags if t.kind != "none"]
    out = np.zeros(len(windows), dtype=int)
    for i, w in enumerate(windows):
        lo, hi = w.origin, w.origin + w.length
        for t in real:
            span = t.end - t.start
            cover = min(hi, t.end) - max(lo, t.start)
            if span > 0 and cover / span >= min_overlap:
                out[i] = 1
                break
    return out


def window_tags(window: Window, tags: Sequence[AnomalyTag],
                min_overlap: float = 0.25) -> list[AnomalyTag]:
    lo, hi = window.origin, window.origin + window.length
    hits = []
    for t in tags:
        span = t.end - t.start
        if t.kind != "none" and span > 0 and (min(hi, t.end) - max(lo, t.start)) / span >= min_overlap:
            hits.append(t)
    return hits


def stack(windows: Sequence[Window]) -> np.ndarray:
    if not windows:
        raise DataError("empty window corpus")
    return np.stack([w.samples for w in windows])


def fit_normalizer(windows: Sequence[Window]) -> NormalizationStats:
    x = stack(windows)
    mean = x.mean(axis=(0, 2))
    std = x.std(axis=(0, 2))
    names = windows[0].channel_names
    for c, s in enumerate(std):
        if not s > 1e-12 * max(1.0, abs(mean[c])):
            label = names[c] if c < len(names) else f"#{c}"
            raise DataError(f"channel {label!r} has zero variance in the training corpus")
    return NormalizationStats(mean, std, tuple(names))


def apply_normalizer(window: Window, stats: NormalizationStats) -> Window:
    z = (window.samples - stats.mean[:, None]) / stats.std[:, None]
    return Window(z, window.origin, window.channel_names)


def denormalize(window: Window, stats: NormalizationStats) -> Window:
    x = window.samples * stats.std[:, None] + stats.mean[:, None]
    return Window(x, window.origin, window.channel_names)


def normalize_all(windows: Sequence[Window], stats: NormalizationStats) -> list[Window]:
    return [apply_normalizer(w, stats) for w in windows]


def stream_to_csv_text(stream: Stream) -> str:
    buf = io.StringIO()
    export_csv(stream, buf)
    return buf.getvalue()


def reference_axioms(gen: GeneratedStream, noise: float, slack: float = 1.1) -> str:
    """Engineering envelope for a generated stream, as axiom source text.

    Per channel: a value bound and a slope bound from the known sinusoid
    amplitudes and coupling, with ``4 * noise`` headroom; per coupled pair:
    a minimum joint/current correlation.
    """
    names = gen.stream.channel_names
    joints = len(gen.components)
    amp = np.array([sum(a for a, _, _ in comps) for comps in gen.components])
    rate = np.array([sum(a * 2 * np.pi * f for a, f, _ in comps) for comps in gen.components])
    lines = ["# reference envelope (raw units)"]

    def emit(name, centre, half, slope):
        half = float(slack * (half + 4 * noise))
        slope = float(slack * (slope + 4 * np.sqrt(2) * noise))
        lines.append(f"axiom range_{name}: bound({name}, {centre - half!r}, {centre + half!r});")
        lines.append(f"axiom rate_{name}: rate_bound({name}, {slope!r});")

    for c in range(joints):
        emit(names[c], 0.0, float(amp[c]), float(rate[c]))
    if gen.coupling is not None:
        M = np.abs(gen.coupling)
        for i in range(len(names) - joints):
            ch = joints + i
            emit(names[ch], float(gen.offsets[ch]), float(M[i] @ amp), float(M[i] @ rate))
        for i in range(len(names) - joints):
            j = int(np.argmax(np.abs(gen.coupling[i])))
            lines.append(f"axiom coupling_{names[joints + i]}: corr({names[j]}, {names[joints + i]}, 0.5);")
    return "\n".join(lines) + "\n"
