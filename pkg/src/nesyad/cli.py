"""``nesyad`` command line: generate | train | score | distill | infer | bench | explain.

Exit codes: 0 ok, 1 usage or configuration error, 2 data error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import ddpm, rff
from . import signals as sg
from . import pipeline as pl
from .config import ConfigError, PipelineConfig, load_config
from .kb import KBSyntaxError, SchemaError, explain_window, format_violations

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI file; missing keys take their defaults")
    p.add_argument("--seed", type=int, help="overrides every seed in the config")
    p.add_argument("--out", default="out", help="artifact directory (default: out)")
    p.add_argument("--plot-data", action="store_true",
                   help="also write x/y series CSVs and rendered PNG figures")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="nesyad", description="Diffusion OOD scoring with logical constraints, "
                     "distilled to a random-feature detector.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("generate", help="write a synthetic stream, tag sidecar and reference KB")
    _common(p)

    p = sub.add_parser("train", help="train the denoiser and fit profile statistics")
    _common(p)
    p.add_argument("--kb", help="knowledge base file (overrides nesy.kb)")
    p.add_argument("--log-every", type=int, default=0, metavar="N")

    p = sub.add_parser("score", help="OOD scores, pseudo-labels and KB explanations")
    _common(p)
    p.add_argument("--model", help=f"DDPM checkpoint (default: OUT/{pl.MODEL_FILE})")
    p.add_argument("--kb")

    p = sub.add_parser("distill", help="fit the random-feature detector on pseudo-labels")
    _common(p)
    p.add_argument("--model")
    p.add_argument("--scores", help=f"score CSV (default: OUT/{pl.SCORES_FILE})")

    p = sub.add_parser("infer", help="stream CSV rows from a file or stdin, one decision per stride")
    p.add_argument("--config")
    p.add_argument("--detector", help=f"classifier file (default: OUT/{pl.DETECTOR_FILE})")
    p.add_argument("--input", default="-", help="CSV path or - for stdin")
    p.add_argument("--stride", type=int, help="defaults to data.stride")
    p.add_argument("--out", default="out")
    p.add_argument("--seed", type=int, help="accepted for uniformity; inference is deterministic")

    p = sub.add_parser("bench", help="per-window latency: detector versus DDPM profile")
    _common(p)
    p.add_argument("--model")
    p.add_argument("--detector")
    p.add_argument("--iterations", type=int)
    p.add_argument("--warmup", type=int)

    p = sub.add_parser("explain", help="per-window KB violations with culprit channels")
    _common(p)
    p.add_argument("--kb")
    p.add_argument("--input", help="CSV stream (defaults to the configured data source)")
    p.add_argument("--cutoff", type=float, help="defaults to nesy.cutoff")
    return parser


# helpers ---------------------------------------------------------------------

def _config(args) -> PipelineConfig:
    cfg = load_config(args.config) if args.config else PipelineConfig()
    if getattr(args, "seed", None) is not None:
        if args.seed < 0:
            raise UsageError("--seed must be non-negative")
        cfg = cfg.with_seed(args.seed)
    cfg.validate()
    return cfg


def _outdir(args, cfg: PipelineConfig) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    pl.write_text(out / "effective_config.ini", cfg.to_ini())
    return out


def _path(value: str | None, out: Path, default: str) -> Path:
    p = Path(value) if value else out / default
    if not p.exists():
        raise FileNotFoundError(f"{p} does not exist")
    return p


def _emit(text: str) -> None:
    sys.stdout.write(text if text.endswith("\n") else text + "\n")


# commands --------------------------------------------------------------------

def cmd_generate(args) -> int:
    cfg = _config(args)
    out = _outdir(args, cfg)
    paths = pl.run_generate(cfg, out)
    if args.plot_data:
        from .plotting import write_series
        stream = sg.ingest_csv(paths["stream"])
        n = min(len(stream), 2000)
        cols = {"sample": np.arange(n)}
        cols.update({name: stream.data[i, :n] for i, name in enumerate(stream.channel_names)})
        write_series(out / "stream_head.csv", cols)
    _emit(paths["report"].read_text(encoding="utf-8"))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    if args.kb:
        cfg.nesy.kb = args.kb
        cfg.validate()
    out = _outdir(args, cfg)
    data = pl.load_data(cfg)
    kb = pl.resolve_kb(cfg, data) if cfg.nesy.lam > 0 else None
    res = pl.run_train(cfg, data, kb, args.log_every)
    res.model.save(out / pl.MODEL_FILE)
    pl.write_trace(res.trace, out / "loss_trace.csv")
    if args.plot_data:
        from .plotting import loss_trace
        t = res.trace
        loss_trace(t.epoch, t.loss, t.mse, t.semantic, out / "loss_trace.png")
    t = res.trace
    report = (f"train windows: {len(data.train)}\nepochs: {len(t.epoch)}\n"
              + (f"loss first/last: {t.loss[0]!r} / {t.loss[-1]!r}\n" if t.loss else "")
              + f"semantic term: {'on (lambda=%g)' % cfg.nesy.lam if kb is not None else 'off'}\n"
              + f"checkpoint: {pl.MODEL_FILE}\n")
    _emit(pl.write_text(out / "train_report.txt", pl.with_config(report, cfg)).read_text())
    return EXIT_OK


def cmd_score(args) -> int:
    cfg = _config(args)
    out = _outdir(args, cfg)
    data = pl.load_data(cfg)
    model = ddpm.DdpmModel.load(_path(args.model, out, pl.MODEL_FILE), data.stream.channel_names)
    kb = pl.resolve_kb(cfg, data, args.kb)
    res = pl.run_score(cfg, model, data, kb)
    pl.write_scores(res, out)
    pl.write_text(out / pl.SCORE_EXPLAIN_FILE, pl.explain_report(res))
    if args.plot_data:
        from .plotting import roc, score_histogram, write_series
        s, y = res.scores["heldout"], res.truth["heldout"]
        write_series(out / "scores_heldout.csv", {"origin": res.origins["heldout"], "score": s,
                                                  **({"truth": y} if y is not None else {})})
        if len(s):
            score_histogram(s, res.threshold, out / "score_histogram.png", y)
        if y is not None and res.auroc("heldout") is not None:
            from .metrics import roc_curve
            fpr, tpr = roc_curve(s, y)
            write_series(out / "roc_teacher.csv", {"fpr": fpr, "tpr": tpr})
            roc({"DDPM teacher": (fpr, tpr)}, out / "roc_teacher.png")
    _emit(pl.write_text(out / "score_report.txt", pl.with_config(pl.score_report(res, cfg), cfg)).read_text())
    return EXIT_OK


def cmd_distill(args) -> int:
    cfg = _config(args)
    out = _outdir(args, cfg)
    data = pl.load_data(cfg)
    model = ddpm.DdpmModel.load(_path(args.model, out, pl.MODEL_FILE), data.stream.channel_names)
    scores_path = _path(args.scores, out, pl.SCORES_FILE)
    labels = pl.read_scores(scores_path)
    teacher = _teacher_scores(scores_path, data)
    res = pl.run_distill(cfg, model, data, labels, teacher)
    rff.save_classifier(res.classifier, out / pl.DETECTOR_FILE)
    if args.plot_data and res.heldout_truth is not None and res.heldout is not None \
            and res.heldout.auroc is not None:
        from .metrics import roc_curve
        from .plotting import roc, write_series
        curves = {"RFF student": roc_curve(res.student_scores, res.heldout_truth)}
        if teacher is not None:
            curves["DDPM teacher"] = roc_curve(teacher, res.heldout_truth)
        for name, (fpr, tpr) in curves.items():
            tag = "student" if name.startswith("RFF") else "teacher"
            write_series(out / f"roc_{tag}.csv", {"fpr": fpr, "tpr": tpr})
        roc(curves, out / "roc_distill.png")
    _emit(pl.write_text(out / "distill_report.txt", pl.with_config(pl.distill_report(res, cfg), cfg)).read_text())
    return EXIT_OK


def _teacher_scores(path: Path, data: pl.Dataset) -> np.ndarray | None:
    import csv
    by_origin = {}
    with open(path, encoding="utf-8", newline="") as fh:
        for row in csv.DictReader(fh):
            if row["split"] == "heldout":
                by_origin[int(row["origin"])] = float(row["score"])
    try:
        return np.array([by_origin[w.origin] for w in data.heldout])
    except KeyError:
        return None


def cmd_infer(args) -> int:
    cfg = load_config(args.config) if args.config else PipelineConfig()
    stride = args.stride if args.stride is not None else cfg.data.stride
    if stride < 1:
        raise UsageError("--stride must be >= 1")
    clf = rff.load_classifier(_path(args.detector, Path(args.out), pl.DETECTOR_FILE))
    if args.input == "-":
        pl.stream_infer(clf, sys.stdin, sys.stdout, stride)
    else:
        with open(args.input, encoding="utf-8", newline="") as fh:
            pl.stream_infer(clf, fh, sys.stdout, stride)
    return EXIT_OK


def cmd_bench(args) -> int:
    from .bench import run_benchmark
    cfg = _config(args)
    out = _outdir(args, cfg)
    data = pl.load_data(cfg)
    model = ddpm.DdpmModel.load(_path(args.model, out, pl.MODEL_FILE), data.stream.channel_names)
    clf = rff.load_classifier(_path(args.detector, out, pl.DETECTOR_FILE))
    if clf.projection.d != int(np.prod(model.window_shape)):
        raise sg.DataError("bench needs a raw-window detector")
    iters = args.iterations if args.iterations is not None else cfg.bench.iterations
    warm = args.warmup if args.warmup is not None else cfg.bench.warmup
    if iters < 1 or warm < 0:
        raise UsageError("iterations must be >= 1 and warmup >= 0")
    windows = sg.normalize_all(data.heldout or data.train, model.norm)
    rep = run_benchmark(clf, model, windows, iters, warm, model.seed)
    if args.plot_data:
        from .plotting import latency, write_series
        write_series(out / "latency.csv", {"iteration": np.arange(iters), "rff_ns": rep.rff_samples,
                                           "ddpm_ns": rep.ddpm_samples})
        latency(rep.rff_samples, rep.ddpm_samples, out / "latency.png")
    _emit(pl.write_text(out / "bench_report.txt", pl.with_config(rep.to_text(), cfg)).read_text())
    return EXIT_OK


def cmd_explain(args) -> int:
    cfg = _config(args)
    out = _outdir(args, cfg)
    cutoff = args.cutoff if args.cutoff is not None else cfg.nesy.cutoff
    if not 0.0 < cutoff <= 1.0:
        raise UsageError("--cutoff must lie in (0, 1]")
    if args.input:
        stream = sg.ingest_csv(args.input)
        data = None
        kb_path = args.kb or (str(cfg.kb_path()) if cfg.kb_path() else None)
        if kb_path is None:
            raise UsageError("explain on a CSV stream needs --kb or nesy.kb")
        from .kb import load as load_kb
        kb = load_kb(kb_path, stream.channel_names)
    else:
        data = pl.load_data(cfg)
        stream = data.stream
        kb = pl.resolve_kb(cfg, data, args.kb)
        if kb is None:
            raise UsageError("no knowledge base: pass --kb or set nesy.kb")
    windows = sg.windowize(stream, cfg.data.window, cfg.data.stride)
    blocks = []
    for w in windows:
        found = explain_window(kb, w.samples, cutoff)
        if found:
            blocks.append(format_violations(found, w.origin))
    text = "\n".join(blocks) + ("\n" if blocks else "")
    pl.write_text(out / "explain.txt", text)
    summary = f"windows: {len(windows)}  with violations: {len(blocks)}  cutoff: {cutoff:g}\n"
    if args.plot_data:
        from .plotting import write_series
        from .kb import axiom_degrees
        deg = axiom_degrees(kb, sg.stack(windows))
        write_series(out / "axiom_degrees.csv", {"origin": [w.origin for w in windows],
                                                 **{k: v.data for k, v in deg.items()}})
    sys.stdout.write(text)
    _emit(pl.write_text(out / "explain_report.txt", pl.with_config(summary, cfg)).read_text())
    return EXIT_OK


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "score": cmd_score, "distill": cmd_distill,
            "infer": cmd_infer, "bench": cmd_bench, "explain": cmd_explain}


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, UsageError, KBSyntaxError, ddpm.ScheduleError) as exc:
        print(f"nesyad: configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FloatingPointError as exc:
        print(f"nesyad: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (sg.DataError, SchemaError, rff.DistillError, FileNotFoundError, ValueError) as exc:
        print(f"nesyad: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
