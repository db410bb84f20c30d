"""Command-line entry point: dataset generation, the five experiment modes, and the depth ablation.

Configuration is a plain ``key = value`` file.  Top-level keys name inputs and
the seed; dotted keys (``source.max_iters``, ``adaptation.depth``...) set fields of
the corresponding config dataclass.  Unknown keys are rejected.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import sys
import time
import types
import typing
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence


from . import __version__
from .adaptation import AdaptationConfig
from .checkpoint import CheckpointError, file_digest, load_checkpoint, save_checkpoint
from .losses import inverse_frequency_weights
from .metrics import MetricsReport, format_table, write_table_csv
from .phantomgen import CLASS_NAMES, CaseStore, FileAccess, PhantomSpec, generate_dataset, standardize
from .segmenter import Segmenter, SegmenterConfig, build_segmenter, depth_presets, resolve_depth
from .trainer import (
    AdversarialTrainConfig,
    SourceTrainConfig,
    adapt_adversarial,
    adapted_predictor,
    evaluate,
    segmenter_predictor,
    train_source,
)

log = logging.getLogger("crossmod")

MODES = ("seg-source", "seg-target-scratch", "seg-target-stl", "eval-nodap", "adapt-uda")
UNSUPERVISED_MODES = ("eval-nodap", "adapt-uda")
EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2

# section -> (dataclass, fields not settable from the file)
SECTIONS = {
    "phantom": (PhantomSpec, {"styles"}),
    "segmenter": (SegmenterConfig, set()),
    "source": (SourceTrainConfig, {"seed"}),
    "adversarial": (AdversarialTrainConfig, {"seed"}),
    "adaptation": (AdaptationConfig, set()),
}


class UsageError(Exception):
    pass


class RunError(RuntimeError):
    pass


# --- configuration -----------------------------------------------------------------


def _coerce(text: str, hint):
    origin, args = typing.get_origin(hint), typing.get_args(hint)
    if origin in (typing.Union, types.UnionType):
        if type(None) in args and text.lower() == "none":
            return None
        for a in args:
            if a is type(None):
                continue
            try:
                return _coerce(text, a)
            except ValueError:
                pass
        raise ValueError(f"cannot parse {text!r} as {hint}")
    if origin is tuple:
        parts = [p.strip() for p in text.split(",") if p.strip()]
        if args and args[-1] is not Ellipsis and len(parts) != len(args):
            raise ValueError(f"expected {len(args)} comma-separated values, got {text!r}")
        return tuple(_coerce(p, args[0]) for p in parts)
    if hint is bool:
        if text.lower() in ("true", "yes", "1"):
            return True
        if text.lower() in ("false", "no", "0"):
            return False
        raise ValueError(f"cannot parse {text!r} as a boolean")
    if hint is int:
        return int(text)
    if hint is float:
        return float(text)
    if hint is str:
        return text
    raise ValueError(f"unsupported config type {hint}")


def _format(value) -> str:
    if isinstance(value, tuple):
        return ", ".join(str(v) for v in value)
    return str(value)


def _settable(cls, skip) -> dict[str, object]:
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in dataclasses.fields(cls) if f.name not in skip}


@dataclass
class RunConfig:
    source_data: str = "data/A"
    target_data: str = "data/B"
    source_checkpoint: str | None = None
    out: str = "runs"
    seed: int = 0
    n_train: int = 16
    n_test: int = 4
    phantom: PhantomSpec = field(default_factory=PhantomSpec)
    segmenter: SegmenterConfig = field(default_factory=SegmenterConfig)
    source: SourceTrainConfig = field(default_factory=SourceTrainConfig)
    adversarial: AdversarialTrainConfig = field(default_factory=AdversarialTrainConfig)
    adaptation: AdaptationConfig = field(default_factory=AdaptationConfig)

    @classmethod
    def top_level_keys(cls) -> dict[str, object]:
        return _settable(cls, set(SECTIONS))

    @classmethod
    def from_pairs(cls, pairs: Sequence[tuple[str, str]]) -> "RunConfig":
        top = cls.top_level_keys()
        flat: dict[str, object] = {}
        sections: dict[str, dict[str, object]] = {s: {} for s in SECTIONS}
        for key, text in pairs:
            section, _, name = key.rpartition(".")
            try:
                if not section and name in top:
                    flat[name] = _coerce(text, top[name])
                elif section in SECTIONS and name in _settable(*SECTIONS[section]):
                    sections[section][name] = _coerce(text, _settable(*SECTIONS[section])[name])
                else:
                    raise UsageError(f"unknown config key {key!r}")
            except ValueError as exc:
                raise UsageError(f"config key {key!r}: {exc}") from None
        try:
            built = {s: SECTIONS[s][0](**vals) for s, vals in sections.items()}
            return cls(**flat, **built)
        except (TypeError, ValueError) as exc:
            raise UsageError(f"invalid configuration: {exc}") from None

    @classmethod
    def parse(cls, text: str, origin: str = "<config>") -> "RunConfig":
        pairs = []
        for n, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep or not key.strip():
                raise UsageError(f"{origin}:{n}: expected 'key = value', got {raw!r}")
            pairs.append((key.strip(), value.strip()))
        return cls.from_pairs(pairs)

    @classmethod
    def load(cls, path: Path | str | None) -> "RunConfig":
        if path is None:
            return cls()
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise UsageError(f"cannot read config {path}: {exc}") from None
        return cls.parse(text, str(path))

    def to_text(self) -> str:
        lines = [f"{k} = {_format(getattr(self, k))}" for k in self.top_level_keys()]
        for s, (cls, skip) in SECTIONS.items():
            obj = getattr(self, s)
            lines += [f"{s}.{k} = {_format(getattr(obj, k))}" for k in _settable(cls, skip)]
        return "\n".join(lines) + "\n"


# --- run directory bookkeeping -------------------------------------------------------


def tree_hash(path: Path | str) -> str:
    """Content hash of a file or directory tree (relative names and file contents)."""
    path = Path(path)
    h = hashlib.sha256()
    files = [path] if path.is_file() else sorted(p for p in path.rglob("*") if p.is_file())
    for p in files:
        h.update(str(p.relative_to(path) if p != path else p.name).encode() + b"\0")
        h.update(hashlib.sha256(p.read_bytes()).digest())
    return h.hexdigest()


class RunDir:
    def __init__(self, root: Path, cfg: RunConfig, command: str, mode: str | None = None):
        self.root = root
        self.cfg = cfg
        self.command = command
        self.mode = mode
        self.audit: list[FileAccess] = []
        self.inputs: dict[str, str] = {}
        self.extra: dict[str, object] = {}
        self.report: MetricsReport | None = None
        self.started = time.time()
        root.mkdir(parents=True, exist_ok=True)
        (root / "config.txt").write_text(cfg.to_text())
        self._handler = logging.FileHandler(root / "run.log", mode="w")
        self._handler.setFormatter(logging.Formatter("%(asctime)s %(name)s %(message)s"))
        logging.getLogger("crossmod").addHandler(self._handler)

    def store(self, path: str) -> CaseStore:
        p = Path(path)
        if not (p / "manifest.json").exists():
            raise RunError(f"no dataset at {p} (run gen-data first)")
        self.inputs[f"dataset:{p}"] = tree_hash(p)
        return CaseStore(p, self.audit)

    def add_checkpoint_input(self, path: Path) -> str:
        digest = file_digest(path)
        self.inputs[f"checkpoint:{path}"] = digest
        return digest

    def label_reads(self, modality: str) -> dict[str, int]:
        out = {"train": 0, "test": 0}
        for a in self.audit:
            if a.kind == "label" and a.modality == modality:
                out[a.split] += 1
        return out

    def finish(self) -> None:
        with open(self.root / "file_access.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["path", "kind", "modality", "split", "phase"])
            w.writerows([a.path, a.kind, a.modality, a.split, a.phase] for a in self.audit)
        info = {
            "command": self.command,
            "mode": self.mode,
            "seed": self.cfg.seed,
            "version": __version__,
            "inputs": self.inputs,
            "input_hash": hashlib.sha256(json.dumps(self.inputs, sort_keys=True).encode()).hexdigest(),
            "seconds": round(time.time() - self.started, 2),
            **self.extra,
        }
        (self.root / "run_info.json").write_text(json.dumps(info, indent=2) + "\n")
        logging.getLogger("crossmod").removeHandler(self._handler)
        self._handler.close()


def _load_split(store: CaseStore, split: str, labels: bool, phase: str):
    store.phase = phase
    names = store.names(split)
    vols = [standardize(store.image(n)) for n in names]
    labs = [store.labels(n) for n in names] if labels else None
    return vols, labs


def _class_names() -> dict[int, str]:
    return dict(enumerate(CLASS_NAMES))


def _write_report(run: RunDir, label: str, report: MetricsReport) -> None:
    report.to_csv(run.root / "metrics.csv")
    table = format_table({label: report})
    (run.root / "metrics.txt").write_text(table)
    write_table_csv({label: report}, run.root / "table.csv")
    run.extra["mean_dice"] = round(report.mean_dice, 4)
    run.report = report
    print(table, end="")


def _source_checkpoint(cfg: RunConfig, mode: str) -> Path:
    if not cfg.source_checkpoint:
        raise RunError(f"mode {mode} needs a source checkpoint (set source_checkpoint in the config)")
    path = Path(cfg.source_checkpoint)
    if not (path / "manifest.json").exists():
        raise RunError(f"source checkpoint {path} not found (run --mode seg-source first)")
    return path


def _load_source_model(run: RunDir, mode: str) -> tuple[Segmenter, str]:
    path = _source_checkpoint(run.cfg, mode)
    digest = run.add_checkpoint_input(path)
    model = load_checkpoint(path).build("segmenter")
    model.eval()
    return model, digest


# --- commands ------------------------------------------------------------------------


def cmd_gen_data(cfg: RunConfig, out: Path | None = None) -> list[Path]:
    dirs = [out / "A", out / "B"] if out is not None else [Path(cfg.source_data), Path(cfg.target_data)]
    for d, modality in zip(dirs, ("A", "B")):
        generate_dataset(d, cfg.phantom, modality, cfg.n_train, cfg.n_test, seed=cfg.seed)
        log.info("wrote %d+%d modality-%s cases to %s", cfg.n_train, cfg.n_test, modality, d)
    return dirs


def _supervised(run: RunDir, data: str, init: Segmenter | None) -> Segmenter:
    cfg = run.cfg
    store = run.store(data)
    vols, labs = _load_split(store, "train", True, "train")
    weights = inverse_frequency_weights(labs, cfg.segmenter.num_classes)
    model = init if init is not None else build_segmenter(cfg.segmenter, seed=cfg.seed)
    tcfg = replace(cfg.source, seed=cfg.seed)
    train_source(model, vols, labs, tcfg, weights, run.root / "train_curve.csv", run.root / "checkpoint")
    save_checkpoint(
        run.root / "checkpoint",
        {"segmenter": model},
        {"mode": run.mode, "seed": cfg.seed, "class_weights": list(weights), "modality": store.modality},
    )
    test_v, test_l = _load_split(store, "test", True, "evaluate")
    _write_report(run, run.mode, evaluate(segmenter_predictor(model), test_v, test_l, model.cfg.num_classes, _class_names()))
    return model


def _adapt_uda(run: RunDir) -> MetricsReport:
    cfg = run.cfg
    source, digest = _load_source_model(run, "adapt-uda")
    src_store, tgt_store = run.store(cfg.source_data), run.store(cfg.target_data)
    src_v, _ = _load_split(src_store, "train", False, "adapt")
    tgt_v, _ = _load_split(tgt_store, "train", False, "adapt")
    acfg = cfg.adaptation.resolve(source)
    res = adapt_adversarial(
        source,
        src_v,
        tgt_v,
        replace(cfg.adversarial, seed=cfg.seed),
        acfg,
        run.root / "adapt_curve.csv",
        run.root / "checkpoint",
    )
    save_checkpoint(
        run.root / "checkpoint",
        {"dam": res.dam, "dcm": res.dcm},
        {
            "mode": "adapt-uda",
            "seed": cfg.seed,
            "depth": acfg.depth,
            "dam_taps": list(acfg.dam_taps),
            "frozen_taps": list(acfg.frozen_taps),
            "source_checkpoint": digest,
        },
    )
    _check_no_target_labels(run, tgt_store.modality)
    test_v, test_l = _load_split(tgt_store, "test", True, "evaluate")
    report = evaluate(adapted_predictor(res.dam, source, acfg), test_v, test_l, source.cfg.num_classes, _class_names())
    run.extra.update(
        source_checkpoint=digest,
        depth=acfg.depth,
        dcm_steps=res.dcm_steps,
        dam_steps=res.dam_steps,
        max_abs_critic_param=max(res.max_abs_critic_param),
    )
    _write_report(run, f"adapt-uda d={acfg.depth}", report)
    return report


def _check_no_target_labels(run: RunDir, modality: str) -> None:
    bad = [a for a in run.audit if a.kind == "label" and a.modality == modality]
    if bad:
        raise RunError(f"{run.mode}: target labels were read before evaluation: {bad[0].path}")


def cmd_run(mode: str, cfg: RunConfig, out: Path) -> RunDir:
    if mode not in MODES:
        raise UsageError(f"unknown mode {mode!r}; choose from {', '.join(MODES)}")
    run = RunDir(out, cfg, "run", mode)
    try:
        if mode == "seg-source":
            _supervised(run, cfg.source_data, None)
        elif mode == "seg-target-scratch":
            _supervised(run, cfg.target_data, None)
        elif mode == "seg-target-stl":
            model, digest = _load_source_model(run, mode)
            run.extra["source_checkpoint"] = digest
            _supervised(run, cfg.target_data, model)
        elif mode == "eval-nodap":
            model, digest = _load_source_model(run, mode)
            run.extra["source_checkpoint"] = digest
            tgt_store = run.store(cfg.target_data)
            test_v, test_l = _load_split(tgt_store, "test", True, "evaluate")
            report = evaluate(segmenter_predictor(model), test_v, test_l, model.cfg.num_classes, _class_names())
            _write_report(run, "eval-nodap", report)
        else:
            _adapt_uda(run)
        if mode in UNSUPERVISED_MODES:
            tgt = CaseStore(cfg.target_data).modality
            reads = run.label_reads(tgt)
            run.extra["target_label_reads"] = reads
            if reads["train"]:
                raise RunError(f"{mode}: {reads['train']} target training label files were read")
    finally:
        run.finish()
    return run


def cmd_ablate_depth(cfg: RunConfig, out: Path) -> list[dict]:
    """adapt-uda at each depth preset with identical seeds and source checkpoint."""
    _source_checkpoint(cfg, "ablate-depth")
    out.mkdir(parents=True, exist_ok=True)
    presets = depth_presets(build_segmenter(cfg.segmenter))
    reports, rows = {}, []
    for name in ("shallow", "mid", "deep"):
        sub = replace(cfg, adaptation=replace(cfg.adaptation, depth=name))
        run = cmd_run("adapt-uda", sub, out / f"depth-{name}")
        reports[f"{name} (d={presets[name]})"] = run.report
        rows.append(
            {
                "preset": name,
                "depth": presets[name],
                "source_checkpoint": run.extra["source_checkpoint"],
                "mean_dice": run.extra["mean_dice"],
                "run_dir": str(run.root),
            }
        )
    if len({r["source_checkpoint"] for r in rows}) != 1:
        raise RunError("ablation rows used different source checkpoints")
    write_table_csv(reports, out / "ablation.csv")
    table = format_table(reports)
    (out / "ablation.txt").write_text(table)
    (out / "ablation.json").write_text(json.dumps(rows, indent=2) + "\n")
    print(table, end="")
    return rows


# --- argument parsing ------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _depth_arg(text: str) -> int | str:
    if text in ("shallow", "mid", "deep"):
        return text
    try:
        return int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"depth must be shallow|mid|deep or a layer index, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", type=Path, help="key = value configuration file")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--out", type=Path, help="output directory")

    parser = _Parser(prog="crossmod", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-q", "--quiet", action="store_true", help="only print warnings")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("gen-data", parents=[common], help="generate modality A and B phantom datasets")
    p_run = sub.add_parser("run", parents=[common], help="run one experiment mode")
    p_run.add_argument("--mode", required=True, choices=MODES)
    p_run.add_argument("--depth", type=_depth_arg, help="adaptation depth: shallow|mid|deep|INDEX")
    sub.add_parser("ablate-depth", parents=[common], help="adapt-uda at the shallow/mid/deep presets")
    p_show = sub.add_parser("show-config", parents=[common], help="print the resolved configuration")
    p_show.add_argument("--depth", type=_depth_arg)
    return parser


def _resolve(args) -> RunConfig:
    cfg = RunConfig.load(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if getattr(args, "depth", None) is not None:
        depth = args.depth
        if isinstance(depth, int):
            try:
                resolve_depth(build_segmenter(cfg.segmenter), depth)
            except Exception as exc:
                raise UsageError(str(exc)) from None
        cfg = replace(cfg, adaptation=replace(cfg.adaptation, depth=depth))
    return cfg


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(
            level=logging.WARNING if args.quiet else logging.INFO,
            format="%(asctime)s %(name)s %(message)s",
            stream=sys.stderr,
        )
        cfg = _resolve(args)
        if args.command == "show-config":
            print(cfg.to_text(), end="")
        elif args.command == "gen-data":
            cmd_gen_data(cfg, args.out)
        elif args.command == "run":
            cmd_run(args.mode, cfg, args.out or Path(cfg.out) / args.mode)
        else:
            cmd_ablate_depth(cfg, args.out or Path(cfg.out) / "ablate-depth")
    except UsageError as exc:
        print(f"crossmod: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (RunError, CheckpointError, OSError, RuntimeError, ValueError) as exc:
        print(f"crossmod: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
