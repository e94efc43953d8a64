"""Stage orchestration shared by the CLI and the acceptance suite.

Every stage is a pure function of the configuration (plus the artifacts of
earlier stages), so a fixed seed reproduces every file byte for byte.
"""
from __future__ import annotations

import csv
import queue
import sys
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, TextIO

import numpy as np

from . import ddpm, rff
from . import signals as sg
from .config import PipelineConfig
from .kb import KnowledgeBase, explain_window, format_violations, load as load_kb, parse as parse_kb
from .metrics import auroc

STREAM_FILE = "stream.csv"
TAGS_FILE = "tags.csv"
KB_FILE = "reference.kb"
MODEL_FILE = "model.nsad"
DETECTOR_FILE = "detector.nsrf"
SCORES_FILE = "scores.csv"
LABELS_FILE = "labels.csv"
SCORE_EXPLAIN_FILE = "score_explain.txt"


# data ------------------------------------------------------------------------

@dataclass
class Dataset:
    stream: sg.Stream
    tags: list[sg.AnomalyTag] | None
    generated: sg.GeneratedStream | None
    train: list[sg.Window]
    heldout: list[sg.Window]

    @property
    def shape(self) -> tuple[int, int]:
        return self.train[0].samples.shape

    def truth(self, windows) -> np.ndarray | None:
        return None if self.tags is None else sg.window_labels(windows, self.tags)


def generator_config(cfg: PipelineConfig) -> sg.GeneratorConfig:
    d = cfg.data
    return sg.GeneratorConfig(channels=d.channels, length=d.stream_length, window=d.window,
                              sinusoids=d.sinusoids, noise=d.noise, anomaly_rate=d.anomaly_rate)


def split_windows(windows: list[sg.Window], n: int, fraction: float) -> tuple[list, list]:
    """Chronological split: training windows end before the cut, held-out
    windows start at or after it, so no sample is shared."""
    cut = int(fraction * n)
    train = [w for w in windows if w.origin + w.length <= cut]
    held = [w for w in windows if w.origin >= cut]
    return train, held


def load_data(cfg: PipelineConfig) -> Dataset:
    d = cfg.data
    gen = None
    if d.source == "generator":
        gen = sg.generate_stream(generator_config(cfg), d.seed)
        stream, tags = gen.stream, gen.tags
    else:
        stream = sg.ingest_csv(cfg.resolve(d.source))
        tags = sg.ingest_tags(cfg.resolve(d.tags)) if d.tags else None
    windows = sg.windowize(stream, d.window, d.stride)
    train, held = split_windows(windows, len(stream), d.train_fraction)
    if not train:
        raise sg.DataError("no complete window fits in the training fraction of the stream")
    return Dataset(stream, tags, gen, train, held)


def resolve_kb(cfg: PipelineConfig, data: Dataset | None, override: str | None = None) -> KnowledgeBase | None:
    """Configured KB file, else the generator's reference envelope, else None."""
    names = data.stream.channel_names if data is not None else ()
    path = Path(override) if override else cfg.kb_path()
    if path is not None:
        return load_kb(path, names)
    if data is not None and data.generated is not None:
        return parse_kb(sg.reference_axioms(data.generated, cfg.data.noise), names)
    return None


# reports ---------------------------------------------------------------------

def with_config(text: str, cfg: PipelineConfig) -> str:
    return text.rstrip("\n") + "\n\n# effective config\n" + cfg.to_ini()


def write_text(path: Path, text: str) -> Path:
    path.write_text(text, encoding="utf-8")
    return path


# generate --------------------------------------------------------------------

def run_generate(cfg: PipelineConfig, out: Path) -> dict[str, Path]:
    if cfg.data.source != "generator":
        raise sg.DataError("generate needs data.source = generator")
    gen = sg.generate_stream(generator_config(cfg), cfg.data.seed)
    paths = {"stream": out / STREAM_FILE, "tags": out / TAGS_FILE, "kb": out / KB_FILE}
    sg.export_csv(gen.stream, paths["stream"])
    sg.export_tags(gen.tags, paths["tags"])
    write_text(paths["kb"], sg.reference_axioms(gen, cfg.data.noise))
    injected = sum(t.kind != "none" for t in gen.tags)
    report = (f"samples: {len(gen.stream)}\nchannels: {','.join(gen.stream.channel_names)}\n"
              f"slots: {len(gen.tags)}\ninjected anomalies: {injected}\n")
    paths["report"] = write_text(out / "generate_report.txt", with_config(report, cfg))
    return paths


# train -----------------------------------------------------------------------

@dataclass
class TrainResult:
    model: ddpm.DdpmModel
    trace: ddpm.TrainTrace
    train_errors: np.ndarray


def build_schedule(cfg: PipelineConfig) -> ddpm.NoiseSchedule:
    m = cfg.ddpm
    return ddpm.make_schedule(m.T, m.beta_start, m.beta_end, strict=True)


def run_train(cfg: PipelineConfig, data: Dataset, kb: KnowledgeBase | None = None,
              log_every: int = 0) -> TrainResult:
    m, n = cfg.ddpm, cfg.nesy
    schedule = build_schedule(cfg)
    C, L = data.shape
    norm = sg.fit_normalizer(data.train)
    windows = sg.normalize_all(data.train, norm)
    net = ddpm.DenoiserNet(C * L, m.hidden, m.time_dim, seed=m.seed)
    nesy = ddpm.NesyTerm(kb, n.lam, norm, n.quantifier) if (kb is not None and n.lam > 0) else None
    tc = ddpm.TrainConfig(epochs=m.epochs, batch_size=m.batch_size, lr=m.lr,
                          lr_final=m.lr_final, seed=m.seed)
    trace = ddpm.train(windows, schedule, net, tc, nesy, log_every)
    levels = cfg.levels()
    errors = ddpm.profile_errors(windows, net, schedule, levels, m.seed, m.chain)
    profile = ddpm.fit_profile_stats(errors, levels)
    model = ddpm.DdpmModel(net, schedule, norm, profile, (C, L), m.seed)
    return TrainResult(model, trace, errors)


def write_trace(trace: ddpm.TrainTrace, path: Path) -> Path:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "loss", "mse", "semantic"])
        for row in zip(trace.epoch, trace.loss, trace.mse, trace.semantic):
            w.writerow([row[0], *(repr(float(v)) for v in row[1:])])
    return path


# score -----------------------------------------------------------------------

@dataclass
class ScoreResult:
    levels: tuple[int, ...]
    origins: dict[str, list[int]]
    errors: dict[str, np.ndarray]
    scores: dict[str, np.ndarray]
    labels: dict[str, np.ndarray]
    threshold: float
    truth: dict[str, np.ndarray | None]
    explanations: list[tuple[str, int, int, str]] = field(default_factory=list)

    def auroc(self, split: str) -> float | None:
        t = self.truth[split]
        return None if t is None or len(t) == 0 else auroc(self.scores[split], t)


def _check_model(model: ddpm.DdpmModel, data: Dataset) -> None:
    if tuple(model.window_shape) != tuple(data.shape):
        raise sg.DataError(f"checkpoint expects windows {tuple(model.window_shape)}, data gives {data.shape}")
    if model.profile is None:
        raise sg.DataError("checkpoint carries no profile statistics")


def run_score(cfg: PipelineConfig, model: ddpm.DdpmModel, data: Dataset,
              kb: KnowledgeBase | None = None) -> ScoreResult:
    _check_model(model, data)
    m = cfg.ddpm
    splits = {"train": data.train, "heldout": data.heldout}
    levels = model.profile.levels
    errors, scores, origins, truth = {}, {}, {}, {}
    for name, wins in splits.items():
        origins[name] = [w.origin for w in wins]
        truth[name] = data.truth(wins)
        if not wins:
            errors[name], scores[name] = np.zeros((0, len(levels))), np.zeros(0)
            continue
        normed = sg.normalize_all(wins, model.norm)
        errors[name] = ddpm.profile_errors(normed, model.net, model.schedule, levels, model.seed, m.chain)
        scores[name] = ddpm.aggregate(errors[name], model.profile, m.aggregation)
    plabels = ddpm.pseudo_label(scores["train"], m.percentile)
    labels = {"train": plabels.labels,
              "heldout": (scores["heldout"] > plabels.threshold).astype(int)}
    result = ScoreResult(levels, origins, errors, scores, labels, plabels.threshold, truth)
    if kb is not None:
        for name, wins in splits.items():
            for w, lab in zip(wins, labels[name]):
                found = explain_window(kb, w.samples, cfg.nesy.cutoff)
                if found:
                    result.explanations.append((name, w.origin, int(lab), format_violations(found, w.origin)))
    return result


def write_scores(result: ScoreResult, out: Path) -> dict[str, Path]:
    paths = {"scores": out / SCORES_FILE, "labels": out / LABELS_FILE}
    with open(paths["scores"], "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["split", "origin", *(f"err_t{t}" for t in result.levels), "score", "label"])
        for split in ("train", "heldout"):
            for i, o in enumerate(result.origins[split]):
                w.writerow([split, o, *(repr(float(e)) for e in result.errors[split][i]),
                            repr(float(result.scores[split][i])), int(result.labels[split][i])])
    with open(paths["labels"], "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["origin", "label"])
        for o, lab in zip(result.origins["train"], result.labels["train"]):
            w.writerow([o, int(lab)])
    return paths


def score_report(result: ScoreResult, cfg: PipelineConfig) -> str:
    tr = result.labels["train"]
    lines = [f"levels: {','.join(map(str, result.levels))}",
             f"aggregation: {cfg.ddpm.aggregation}",
             f"threshold (p{cfg.ddpm.percentile:g} nearest rank): {result.threshold!r}",
             f"train windows: {len(tr)}  labeled anomalous: {int(tr.sum())} ({tr.mean():.4f})",
             f"heldout windows: {len(result.labels['heldout'])}  labeled anomalous: "
             f"{int(result.labels['heldout'].sum())}"]
    for split in ("train", "heldout"):
        a = result.auroc(split)
        lines.append(f"auroc vs tags ({split}): " + ("n/a" if a is None else f"{a:.4f}"))
    lines.append(f"windows with KB violations: {len(result.explanations)}")
    return "\n".join(lines) + "\n"


def explain_report(result: ScoreResult) -> str:
    blocks = [f"[{split} label={lab}]\n{text}" for split, _, lab, text in result.explanations]
    return "\n".join(blocks) + ("\n" if blocks else "")


def read_scores(path: Path) -> dict[str, dict[int, int]]:
    """origin -> pseudo-label per split, from a score CSV."""
    out: dict[str, dict[int, int]] = {"train": {}, "heldout": {}}
    with open(path, encoding="utf-8", newline="") as fh:
        for lineno, row in enumerate(csv.DictReader(fh), start=2):
            try:
                out[row["split"]][int(row["origin"])] = int(row["label"])
            except (KeyError, ValueError):
                raise sg.DataError(f"{path} row {lineno}: malformed score record") from None
    return out


# distill ---------------------------------------------------------------------

@dataclass
class DistillResult:
    classifier: rff.DistilledClassifier
    trace: rff.DistillTrace
    train: rff.FidelityReport
    heldout: rff.FidelityReport | None
    teacher_auroc: float | None
    student_scores: np.ndarray
    heldout_truth: np.ndarray | None


def detector_inputs(cfg: PipelineConfig, model: ddpm.DdpmModel, windows) -> np.ndarray:
    normed = sg.normalize_all(windows, model.norm)
    if cfg.rff.features == "raw":
        return np.stack([w.flat() for w in normed])
    errors = ddpm.profile_errors(normed, model.net, model.schedule, model.profile.levels,
                                 model.seed, cfg.ddpm.chain)
    return (errors - model.profile.mean) / model.profile.std


def build_projection(cfg: PipelineConfig, X: np.ndarray) -> rff.RffProjection:
    r = cfg.rff
    metric = rff.whitening_metric(X, r.whiten_floor) if r.metric == "whiten" else None
    if r.sigma == "median":
        Z = X if metric is None else X @ metric.T
        sigma = rff.median_heuristic(Z, seed=r.seed)
    else:
        sigma = float(r.sigma)
    return rff.make_projection(X.shape[1], r.D, sigma, r.seed, metric)


def run_distill(cfg: PipelineConfig, model: ddpm.DdpmModel, data: Dataset,
                labels: dict[str, dict[int, int]], teacher_scores: np.ndarray | None = None) -> DistillResult:
    _check_model(model, data)
    def pick(split, wins):
        try:
            return np.array([labels[split][w.origin] for w in wins], dtype=int)
        except KeyError as exc:
            raise sg.DataError(f"no pseudo-label for {split} window at origin {exc}") from None
    y_tr = pick("train", data.train)
    X_tr = detector_inputs(cfg, model, data.train)
    proj = build_projection(cfg, X_tr)
    r = cfg.rff
    clf, trace = rff.distill(X_tr, y_tr, proj, rff.DistillConfig(r.ridge, r.max_iter, class_weight=r.class_weight))
    C, L = data.shape
    clf.channels, clf.length = C, L
    clf.channel_names = tuple(data.stream.channel_names)
    clf.norm_mean, clf.norm_std = model.norm.mean.copy(), model.norm.std.copy()
    fid_tr = rff.fidelity(clf, X_tr, y_tr, data.truth(data.train))
    fid_ho, t_auc, s_ho, truth = None, None, np.zeros(0), None
    if data.heldout:
        X_ho = detector_inputs(cfg, model, data.heldout)
        y_ho = pick("heldout", data.heldout)
        truth = data.truth(data.heldout)
        fid_ho = rff.fidelity(clf, X_ho, y_ho, truth)
        s_ho = rff.predict_batch(X_ho, clf)
        if teacher_scores is not None and truth is not None:
            t_auc = auroc(teacher_scores, truth)
    return DistillResult(clf, trace, fid_tr, fid_ho, t_auc, s_ho, truth)


def distill_report(res: DistillResult, cfg: PipelineConfig) -> str:
    p = res.classifier.projection
    lines = [f"features: {cfg.rff.features}  d={p.d}  D={p.D}  sigma={p.sigma!r}  metric={cfg.rff.metric}",
             f"newton iterations: {len(res.trace.loss)}  final objective: {res.trace.loss[-1]!r}"]
    for name, f in (("train", res.train), ("heldout", res.heldout)):
        if f is None:
            continue
        auc = "n/a" if f.auroc is None else f"{f.auroc:.4f}"
        c = f.confusion
        lines.append(f"{name}: agreement={f.agreement:.4f} tp={c['tp']} fp={c['fp']} tn={c['tn']} "
                     f"fn={c['fn']} student_auroc={auc}")
    if res.teacher_auroc is not None:
        lines.append(f"teacher auroc (heldout): {res.teacher_auroc:.4f}")
    return "\n".join(lines) + "\n"


# infer -----------------------------------------------------------------------

_EOF = object()


def _reader(source: Iterable[str], q: queue.Queue) -> None:
    try:
        for lineno, row in enumerate(csv.reader(source), start=1):
            q.put((lineno, row))
    finally:
        q.put(_EOF)


def stream_infer(clf: rff.DistilledClassifier, source: TextIO, sink: TextIO, stride: int,
                 errors: TextIO = sys.stderr, maxsize: int = 1024) -> int:
    """Score a CSV stream window by window; returns the number of lines emitted.

    A reader thread feeds a bounded queue (so a slow scorer blocks the reader
    rather than dropping rows). One line ``origin,probability,decision`` per
    stride once a full window is buffered. A malformed row is reported and
    every window covering it is skipped.
    """
    C, L = clf.channels, clf.length
    if C * L != clf.projection.d:
        raise sg.DataError("detector was fit on profile features; streaming needs a raw-window detector")
    if stride < 1:
        raise sg.DataError("stride must be >= 1")
    q: queue.Queue = queue.Queue(maxsize=maxsize)
    thread = threading.Thread(target=_reader, args=(source, q), daemon=True)
    thread.start()
    item = q.get()
    if item is _EOF:
        return 0
    _, header = item
    names = [h.strip() for h in header[1:]]
    if len(names) != C:
        raise sg.DataError(f"stream has {len(names)} channels, detector expects {C}")
    if clf.channel_names and tuple(names) != tuple(clf.channel_names):
        raise sg.DataError(f"stream channels {names} do not match detector channels {list(clf.channel_names)}")
    mean = clf.norm_mean[:, None] if len(clf.norm_mean) else 0.0
    std = clf.norm_std[:, None] if len(clf.norm_std) else 1.0
    buf = np.zeros((C, L))
    index = -1
    last_bad = -1
    emitted = 0
    while (item := q.get()) is not _EOF:
        lineno, row = item
        if not row:
            continue
        index += 1
        try:
            values = sg.parse_row(row, C, lineno, header)
        except sg.DataError as exc:
            print(f"skipping: {exc}", file=errors)
            last_bad = index
            continue
        buf[:, :-1] = buf[:, 1:]
        buf[:, -1] = values
        origin = index - L + 1
        if origin >= 0 and origin > last_bad and origin % stride == 0:
            x = ((buf - mean) / std).reshape(-1)
            p = rff.predict_prob(x, clf)
            sink.write(f"{origin},{p:.6f},{int(p > 0.5)}\n")
            emitted += 1
    sink.flush()
    thread.join()
    return emitted

