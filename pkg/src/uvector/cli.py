"""Command line pipeline: ``segment`` -> ``train`` -> ``evaluate`` -> ``report``.

Stages hand off through files under one output root::

    <out>/segments/{train,test}.csv   segment manifests (+ audio/ for synthetic data)
    <out>/runs/<cell>/                checkpoint.npz, history.csv, metrics.csv,
                                      relabels.csv, run_manifest.json
    <out>/evaluation.csv              rows regenerated from checkpoints
    <out>/report.csv, report.txt      aggregated summary

The output root comes from ``--out``, else ``$UVECTOR_OUT``, else the config.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np
import yaml

from . import __version__
from .audio import load_wav
from .constraints import build_cluster_set, constraint_error_rates, inject_impurity, write_relabels
from .embedder import NetConfig, NonFiniteLossError, TrainConfig, load_checkpoint, save_checkpoint
from .evaluation import NMI_NORMALIZATION, evaluate, write_metrics_csv
from .features import FeatureConfig
from .pipeline import (SplitSegments, poison_ground, synthetic_segments, train_model, wav_dir_segments,
                       write_history_csv)
from .segmentation import read_manifest, segments_from_manifest, write_manifest

OUT_ENV = "UVECTOR_OUT"
DEFAULT_OUT = "uvector_out"


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Config


@dataclass
class DataConfig:
    source: str = "synthetic"
    wav_dir: str | None = None
    seed: int = 0
    train_seconds: float = 10.0
    test_seconds: float = 2.0
    segment_len: float = 1.0
    frame_len: float = 0.2
    vad_threshold_db: float = 16.0


@dataclass
class GridConfig:
    speakers: list = field(default_factory=lambda: [5, 10, 25])
    impurity: list = field(default_factory=lambda: [0.0, 0.05, 0.1])
    seeds: list = field(default_factory=lambda: [0])


@dataclass
class NetSection:
    embed_dim: int = 12
    channels: list = field(default_factory=lambda: [8, 16, 16])
    first_stride: int = 2
    head_gain: float = 0.01

    def to_net_config(self) -> NetConfig:
        return NetConfig(embed_dim=self.embed_dim, channels=tuple(self.channels),
                         first_stride=self.first_stride, head_gain=self.head_gain)


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    grid: GridConfig = field(default_factory=GridConfig)
    features: FeatureConfig = field(default_factory=FeatureConfig)
    net: NetSection = field(default_factory=NetSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    output: dict = field(default_factory=lambda: {"dir": None})

    def to_dict(self) -> dict:
        d = {k: asdict(getattr(self, k)) for k in ("data", "grid", "features", "net", "train")}
        d["train"]["thres_range"] = list(d["train"]["thres_range"])
        d["output"] = dict(self.output)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        validate_config(d)
        sections = {"data": DataConfig, "grid": GridConfig, "features": FeatureConfig,
                    "net": NetSection, "train": TrainConfig}
        kw = {}
        for name, typ in sections.items():
            known = {f.name for f in fields(typ)}
            kw[name] = typ(**{k: v for k, v in (d.get(name) or {}).items() if k in known})
        cfg = cls(**kw, output={"dir": (d.get("output") or {}).get("dir")})
        cfg.check()
        return cfg

    def check(self):
        if self.data.source == "wav_dir":
            if not self.data.wav_dir or not Path(self.data.wav_dir).is_dir():
                raise ConfigError(f"data.wav_dir {self.data.wav_dir!r} is not a directory")
        ratio = self.data.segment_len / self.data.frame_len
        if abs(ratio - round(ratio)) > 1e-9:
            raise ConfigError("data.segment_len must be a multiple of data.frame_len")

    def dumps(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)


def schema() -> dict:
    return json.loads(resources.files("uvector").joinpath("config_schema.json").read_text())


def validate_config(d: dict) -> None:
    try:
        jsonschema.validate(d, schema())
    except jsonschema.ValidationError as exc:
        where = ".".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"invalid config at {where}: {exc.message}") from None


def apply_override(d: dict, assignment: str) -> None:
    """Apply ``section.key=value``; the value is parsed as YAML."""
    key, sep, raw = assignment.partition("=")
    if not sep or "." not in key:
        raise ConfigError(f"override must look like section.key=value, got {assignment!r}")
    section, name = key.split(".", 1)
    d.setdefault(section, {})
    if d[section] is None:
        d[section] = {}
    d[section][name] = yaml.safe_load(raw)


def load_config(path=None, overrides=()) -> ExperimentConfig:
    d = ExperimentConfig().to_dict()
    if path is not None:
        loaded = yaml.safe_load(Path(path).read_text()) or {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        for section, values in loaded.items():
            if isinstance(values, dict) and isinstance(d.get(section), dict):
                d[section].update(values)
            else:
                d[section] = values
    for o in overrides:
        apply_override(d, o)
    return ExperimentConfig.from_dict(d)


def output_root(cfg: ExperimentConfig, flag=None) -> Path:
    return Path(flag or os.environ.get(OUT_ENV) or cfg.output.get("dir") or DEFAULT_OUT)


# ---------------------------------------------------------------------------
# Helpers


def _git_blob_sha1(data: bytes) -> str:
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def input_hash(paths) -> str:
    """sha256 over the sorted git blob ids of the input files."""
    lines = sorted(f"{_git_blob_sha1(Path(p).read_bytes())} {Path(p).name}" for p in set(map(str, paths)))
    return hashlib.sha256("\n".join(lines).encode()).hexdigest()


def cell_name(mode: str, speakers: int, impurity: float, seed: int) -> str:
    return f"{mode}_spk{speakers}_imp{impurity:g}_seed{seed}"


def grid_cells(cfg: ExperimentConfig, speakers=None, impurity=None, seeds=None):
    pick = lambda values, only: [v for v in values if only is None or v in only]
    return [(n, r, s) for n in pick(cfg.grid.speakers, speakers)
            for r in pick(cfg.grid.impurity, impurity) for s in pick(cfg.grid.seeds, seeds)]


def _seg_dir(out: Path) -> Path:
    return out / "segments"


def load_segments(out: Path) -> tuple[SplitSegments, list]:
    seg = _seg_dir(out)
    files = [seg / "train.csv", seg / "test.csv"]
    missing = [str(f) for f in files if not f.exists()]
    if missing:
        raise FileNotFoundError(f"segment manifests missing ({', '.join(missing)}); run `uvector segment` first")
    cache = {}

    def loader(path):
        if path not in cache:
            cache[path] = load_wav(seg / path)  # absolute paths survive the join
        return cache[path]

    rows = [read_manifest(f) for f in files]
    split = SplitSegments(segments_from_manifest(rows[0], loader), segments_from_manifest(rows[1], loader))
    return split, files + sorted({seg / r["file"] for rr in rows for r in rr})


def _cell_sets(cfg: ExperimentConfig, split: SplitSegments, n: int, impurity: float, seed: int):
    sub = split.subset(n)
    if len({s.ground_speaker for s in sub.train}) < n:
        raise ValueError(f"segments cover fewer than {n} speakers; re-run `uvector segment` with a larger grid")
    train = inject_impurity(build_cluster_set(sub.train, cfg.data.frame_len), impurity, seed)
    return train, build_cluster_set(sub.test, cfg.data.frame_len)


def _write_json(path: Path, obj) -> None:
    tmp = path.with_suffix(".tmp")
    tmp.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    tmp.replace(path)


# ---------------------------------------------------------------------------
# Stages


def cmd_segment(cfg: ExperimentConfig, out: Path) -> list[Path]:
    """VAD-segment the configured source and write train/test manifests."""
    seg = _seg_dir(out)
    n = max(cfg.grid.speakers)
    d = cfg.data
    common = dict(train_seconds=d.train_seconds, test_seconds=d.test_seconds, seed=d.seed,
                  seg_len=d.segment_len, frame_len=d.frame_len, threshold_db=d.vad_threshold_db)
    if d.source == "synthetic":
        split = synthetic_segments(n, wav_dir=seg / "audio", **common)
    else:
        split = wav_dir_segments(d.wav_dir, max_speakers=n, **common)
        found = len({s.ground_speaker for s in split.train})
        if found < n:
            raise ValueError(f"{d.wav_dir} holds {found} speakers, the grid needs {n}")
    if not split.train:
        raise ValueError("the source produced no segments")
    if d.source == "synthetic":
        # generated audio moves with the output root
        for s in split.train + split.test:
            s.source = os.path.relpath(s.source, seg)
    else:
        for s in split.train + split.test:
            s.source = str(Path(s.source).resolve())
    write_manifest(seg / "train.csv", split.train)
    write_manifest(seg / "test.csv", split.test)
    (seg / "config.yaml").write_text(cfg.dumps())
    return [seg / "train.csv", seg / "test.csv"]


def train_cell(cfg: ExperimentConfig, out: Path, n: int, impurity: float, seed: int,
               audit: bool = False, log=None) -> dict:
    """Train one grid cell and persist its artifacts; returns the run manifest."""
    split, inputs = load_segments(out)
    mode = cfg.train.mode
    run = out / "runs" / cell_name(mode, n, impurity, seed)
    run.mkdir(parents=True, exist_ok=True)
    manifest = {
        "version": __version__,
        "cell": {"mode": mode, "speakers": n, "impurity": impurity, "seed": seed},
        "config": cfg.to_dict(),
        "input_hash": input_hash(inputs),
        "nmi_normalization": NMI_NORMALIZATION,
        "status": "running",
    }
    _write_json(run / "run_manifest.json", manifest)
    train_set, test_set = _cell_sets(cfg, split, n, impurity, seed)
    must, cannot = constraint_error_rates(train_set)
    manifest["constraint_error_rates"] = {"must_link_impurity": must, "cannot_link_error": cannot}
    manifest["n_relabeled"] = len(train_set.relabels)
    write_relabels(run / "relabels.csv", train_set)

    def progress(row):
        if log is not None and "ground_acc" in row:
            log(f"[{run.name}] epoch {row['epoch']} loss {row['train_loss']:.4f} "
                f"ground ACC {row['ground_acc']:.3f}")

    start = time.perf_counter()
    try:
        res = train_model(train_set, test_set, cfg.train, cfg.features, seed,
                          net_cfg=cfg.net.to_net_config(), on_epoch=progress)
    except NonFiniteLossError as exc:
        manifest.update(status="failed", note=str(exc), wall_clock_seconds=time.perf_counter() - start)
        _write_json(run / "run_manifest.json", manifest)
        raise
    if audit:
        poisoned = train_model(poison_ground(train_set, seed), test_set, cfg.train, cfg.features, seed,
                               net_cfg=cfg.net.to_net_config())
        same = [r["train_loss"] for r in poisoned.history] == [r["train_loss"] for r in res.history]
        manifest["barrier_audit"] = "passed" if same else "FAILED"
        if not same:
            raise AssertionError("training loss changed when train-partition ground labels were poisoned")
    wall = time.perf_counter() - start

    save_checkpoint(run / "checkpoint.npz", res.net, res.opt, cfg.train,
                    extra={"cell": manifest["cell"], "best_epoch": res.best_epoch})
    write_history_csv(run / "history.csv", res.history)
    write_metrics_csv(run / "metrics.csv", res.report.rows(n, impurity))
    manifest.update(status="complete", history=res.history, report=res.report.to_dict(),
                    final_report=res.final_report.to_dict(),
                    best_epoch=res.best_epoch, stopped_epoch=res.stopped_epoch, wall_clock_seconds=wall)
    _write_json(run / "run_manifest.json", manifest)
    return manifest


def _train_cell_job(args):
    cfg_dict, out, n, r, s, audit = args
    return train_cell(ExperimentConfig.from_dict(cfg_dict), Path(out), n, r, s, audit)


def cmd_train(cfg: ExperimentConfig, out: Path, cells, jobs: int = 1, audit: bool = False, log=print) -> list[dict]:
    if jobs <= 1:
        return [train_cell(cfg, out, n, r, s, audit, log) for n, r, s in cells]
    with ProcessPoolExecutor(jobs) as pool:
        return list(pool.map(_train_cell_job, [(cfg.to_dict(), str(out), n, r, s, audit) for n, r, s in cells]))


def evaluate_cell(cfg: ExperimentConfig, out: Path, split: SplitSegments, n: int, impurity: float, seed: int) -> list[dict]:
    run = out / "runs" / cell_name(cfg.train.mode, n, impurity, seed)
    ckpt = run / "checkpoint.npz"
    if not ckpt.exists():
        raise FileNotFoundError(f"{ckpt} not found; run `uvector train` first")
    net, _, _, _ = load_checkpoint(ckpt)
    train_set, test_set = _cell_sets(cfg, split, n, impurity, seed)
    expected = cfg.features.output_shape(train_set.audio.shape[1])
    if tuple(net.cfg.input_shape) != tuple(expected):
        raise ValueError(f"{ckpt}: network expects {net.cfg.input_shape} feature maps, "
                         f"the config produces {expected}")
    rep = evaluate(net, train_set, test_set, cfg.features, seed=seed)
    rows = rep.rows(n, impurity)
    write_metrics_csv(run / "metrics.csv", rows)
    return [dict(r, mode=cfg.train.mode, seed=seed) for r in rows]


def cmd_evaluate(cfg: ExperimentConfig, out: Path, cells) -> Path:
    """Regenerate metrics from checkpoints; also writes ``<out>/evaluation.csv``."""
    split, _ = load_segments(out)
    rows = []
    for n, r, s in cells:
        rows += evaluate_cell(cfg, out, split, n, r, s)
    path = out / "evaluation.csv"
    with open(path, "w") as fh:
        fh.write("mode,seed,speakers,impurity,split,ACC,NMI,ARI\n")
        for row in rows:
            fh.write(f"{row['mode']},{row['seed']},{row['speakers']},{row['impurity']},{row['split']},"
                     f"{row['ACC']:.6f},{row['NMI']:.6f},{row['ARI']:.6f}\n")
    return path


REPORT_FIELDS = ("mode", "speakers", "impurity", "seed", "split", "ACC", "NMI", "ARI", "status")


def cmd_report(out: Path) -> tuple[list[dict], list[str]]:
    """Aggregate run manifests into ``report.csv`` and ``report.txt``.

    Values are copied from the manifests verbatim. Run directories without a
    manifest, or whose manifest is not complete, are listed as incomplete.
    """
    runs = sorted(p for p in (out / "runs").glob("*") if p.is_dir()) if (out / "runs").exists() else []
    rows, problems = [], []
    for run in runs:
        mf = run / "run_manifest.json"
        if not mf.exists():
            problems.append(f"{run.name}: no run_manifest.json")
            continue
        m = json.loads(mf.read_text())
        c = m["cell"]
        if m.get("status") != "complete":
            problems.append(f"{run.name}: status {m.get('status')}")
            rows.append({**{k: c[k] for k in ("mode", "speakers", "impurity", "seed")}, "split": "",
                         "ACC": "", "NMI": "", "ARI": "", "status": m.get("status", "unknown")})
            continue
        rep = m["report"]
        for split, prefix in (("Train", "train"), ("Ground", "ground")):
            rows.append({**{k: c[k] for k in ("mode", "speakers", "impurity", "seed")}, "split": split,
                         "ACC": rep[f"{prefix}_acc"], "NMI": rep[f"{prefix}_nmi"], "ARI": rep[f"{prefix}_ari"],
                         "status": "complete"})
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "report.csv", "w") as fh:
        fh.write(",".join(REPORT_FIELDS) + "\n")
        for r in rows:
            fh.write(",".join(repr(r[f]) if isinstance(r[f], float) else str(r[f]) for f in REPORT_FIELDS) + "\n")
    (out / "report.txt").write_text(format_report(rows, problems))
    return rows, problems


def trend_table(rows) -> dict:
    """Seed-averaged ACC/NMI/ARI per (mode, speakers, impurity, split)."""
    groups: dict = {}
    for r in rows:
        if r["status"] == "complete":
            groups.setdefault((r["mode"], r["speakers"], r["impurity"], r["split"]), []).append(r)
    return {k: {m: float(np.mean([r[m] for r in v])) for m in ("ACC", "NMI", "ARI")} | {"n": len(v)}
            for k, v in sorted(groups.items())}


def format_report(rows, problems) -> str:
    lines = [f"{'mode':<9}{'speakers':>9}{'impurity':>10}{'split':>8}{'ACC':>8}{'NMI':>8}{'ARI':>8}{'seeds':>7}"]
    for (mode, n, imp, split), v in trend_table(rows).items():
        lines.append(f"{mode:<9}{n:>9}{imp:>10g}{split:>8}{v['ACC']:>8.3f}{v['NMI']:>8.3f}{v['ARI']:>8.3f}{v['n']:>7}")
    if problems:
        lines += ["", "incomplete runs:"] + [f"  {p}" for p in problems]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Entry point


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", "-c", help="YAML experiment config")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override a config field (repeatable)")
    common.add_argument("--out", help=f"output root (default: ${OUT_ENV}, then output.dir, then ./{DEFAULT_OUT})")

    cells = argparse.ArgumentParser(add_help=False)
    cells.add_argument("--speakers", type=int, nargs="+", help="restrict to these grid speaker counts")
    cells.add_argument("--impurity", type=float, nargs="+", help="restrict to these impurity ratios")
    cells.add_argument("--seed", type=int, nargs="+", help="restrict to these seeds")

    p = argparse.ArgumentParser(prog="uvector", description=__doc__.split("\n")[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("segment", parents=[common], help="VAD-segment the data source into manifests")
    t = sub.add_parser("train", parents=[common, cells], help="train every grid cell")
    t.add_argument("--jobs", type=int, default=1, help="cells trained in parallel processes")
    t.add_argument("--audit-barrier", action="store_true",
                   help="retrain with poisoned train ground labels and require an identical loss trajectory")
    sub.add_parser("evaluate", parents=[common, cells], help="regenerate metrics from checkpoints")
    sub.add_parser("report", parents=[common], help="summarize run manifests")
    sub.add_parser("config", parents=[common], help="print the effective config")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.overrides)
    except (ConfigError, OSError, yaml.YAMLError) as exc:
        print(f"uvector: {exc}", file=sys.stderr)
        return 2
    out = output_root(cfg, args.out)
    log = lambda msg: print(msg, flush=True)
    try:
        if args.command == "config":
            sys.stdout.write(cfg.dumps())
        elif args.command == "segment":
            for f in cmd_segment(cfg, out):
                log(f"wrote {f}")
        elif args.command == "train":
            cells = grid_cells(cfg, args.speakers, args.impurity, args.seed)
            for m in cmd_train(cfg, out, cells, args.jobs, args.audit_barrier, log):
                rep = m["report"]
                log(f"{cell_name(**m['cell'])}: ground ACC {rep['ground_acc']:.3f} NMI {rep['ground_nmi']:.3f} "
                    f"ARI {rep['ground_ari']:.3f} (best epoch {m['best_epoch']})")
        elif args.command == "evaluate":
            log(f"wrote {cmd_evaluate(cfg, out, grid_cells(cfg, args.speakers, args.impurity, args.seed))}")
        elif args.command == "report":
            rows, problems = cmd_report(out)
            sys.stdout.write((out / "report.txt").read_text())
    except (FileNotFoundError, ValueError, NonFiniteLossError) as exc:
        print(f"uvector: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
