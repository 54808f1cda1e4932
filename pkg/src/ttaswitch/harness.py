"""Experiment harness: flat-file configs, run orchestration, CSV artifacts.

A run is described by a flat ``key = value`` text file (``#`` starts a
comment). Unknown and duplicate keys are rejected with their line number.
The effective configuration is echoed into the output directory, followed
by a per-instance CSV, a per-round summary CSV, and a one-line summary.

Floats in CSVs are written with ``repr``, so equal runs produce
byte-identical files. Wall-clock columns stay reproducible because every
entry point accepts an injectable ``clock``; production uses
``time.perf_counter`` and determinism tests substitute a fake counter.
"""
from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from .adaptation import ET, FT, SKIP, init_adaptation
from .checkpoint import load_checkpoint
from .metrics import compute_miou
from .model import ModelConfig
from .streams import SceneSpec, build_stream

MODES = ("hybrid", "ft-only", "et-only", "no-adapt")
NO_DECISION = "NA"   # per-instance decision tag in no-adapt mode

PER_INSTANCE_COLUMNS = ("t", "domain", "round", "decision", "loss_seg", "loss_rec",
                        "tau_before", "tau_after", "miou_instance", "wall_ms")
ROUND_SUMMARY_COLUMNS = ("round", "domain", "n", "miou_mean", "ft", "et", "skip",
                         "ft_ratio", "mean_wall_ms")
MODES_SUMMARY_COLUMNS = ("mode", "instances", "mean_miou", "ft", "et", "skip",
                         "ft_ratio", "mean_wall_ms")


@dataclass(frozen=True)
class RunConfig:
    image_size: int = 32
    patch_size: int = 4
    embed_dim: int = 64
    depth: int = 4
    heads: int = 4
    num_classes: int = 5
    adapter_dim: int = 45
    adapter_scale: float = 0.1
    mask_ratio: float = 0.6
    alpha: float = 0.999
    alpha_l: float = 0.9
    lr_source: float = 1e-3
    lr_tta: float = 1e-4
    optimizer: str = "adam"
    et_groups: tuple = ("adapter",)
    ft_lr_mult: float = 1.0
    mode: str = "hybrid"
    domains: tuple = ("fog", "night", "rain", "snow")
    per_domain: int = 40
    rounds: int = 3
    severity: float = 0.8
    seed: int = 0
    source_scenes: int = 200
    source_epochs: int = 30
    batch_size: int = 8
    out_dir: str = "runs/default"

    def model_config(self) -> ModelConfig:
        return ModelConfig(image_size=self.image_size, patch_size=self.patch_size,
                           embed_dim=self.embed_dim, depth=self.depth,
                           heads=self.heads, num_classes=self.num_classes,
                           adapter_dim=self.adapter_dim,
                           adapter_scale=self.adapter_scale,
                           mask_ratio=self.mask_ratio)

    def scene_spec(self) -> SceneSpec:
        return SceneSpec(image_size=self.image_size, patch_size=self.patch_size,
                         num_classes=self.num_classes)


_LIST_KEYS = ("et_groups", "domains")


def _parse_value(key: str, raw: str, kind, lineno: int):
    try:
        if key in _LIST_KEYS:
            items = tuple(part.strip() for part in raw.split(",") if part.strip())
            if not items:
                raise ValueError("empty list")
            return items
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        return raw
    except ValueError as e:
        raise ValueError(f"config line {lineno}: bad value for '{key}': {e}") from None


def parse_config_text(text: str) -> RunConfig:
    kinds = {f.name: f.type for f in fields(RunConfig)}
    types = {"int": int, "float": float, "str": str, "tuple": tuple}
    values = {}
    for lineno, raw_line in enumerate(text.splitlines(), 1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected 'key = value', "
                             f"got '{raw_line.strip()}'")
        key, _, raw = line.partition("=")
        key, raw = key.strip(), raw.strip()
        if key not in kinds:
            raise ValueError(f"config line {lineno}: unknown key '{key}'")
        if key in values:
            raise ValueError(f"config line {lineno}: duplicate key '{key}'")
        if not raw:
            raise ValueError(f"config line {lineno}: empty value for '{key}'")
        values[key] = _parse_value(key, raw, types[kinds[key]], lineno)
    cfg = RunConfig(**values)
    validate_config(cfg)
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    return parse_config_text(path.read_text())


def validate_config(cfg: RunConfig) -> None:
    if cfg.mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got '{cfg.mode}'")
    if cfg.optimizer not in ("adam", "sgd"):
        raise ValueError(f"optimizer must be adam or sgd, got '{cfg.optimizer}'")
    if cfg.per_domain < 1 or cfg.rounds < 1:
        raise ValueError("per_domain and rounds must be >= 1")
    if not 0.0 <= cfg.severity <= 1.0:
        raise ValueError("severity must lie in [0, 1]")
    if cfg.source_scenes < 1 or cfg.batch_size < 1 or cfg.source_epochs < 0:
        raise ValueError("source_scenes/batch_size must be >= 1, source_epochs >= 0")
    if cfg.lr_source <= 0 or cfg.lr_tta <= 0 or cfg.ft_lr_mult <= 0:
        raise ValueError("learning rates and ft_lr_mult must be positive")
    cfg.model_config()   # triggers the model-side field validation
    cfg.scene_spec()


def format_config(cfg: RunConfig) -> str:
    lines = []
    for f in fields(RunConfig):
        v = getattr(cfg, f.name)
        if isinstance(v, tuple):
            v = ",".join(v)
        elif isinstance(v, float):
            v = repr(v)
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


@dataclass
class RunResult:
    mode: str
    rows: list
    mean_miou: float
    ft_count: int
    et_count: int
    skip_count: int
    forward_count: int
    total_wall_s: float
    out_dir: Path


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _write_csv(path: Path, columns, rows) -> None:
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_fmt(row[c]) for c in columns])


def _decision_fn_for(mode: str):
    if mode == "hybrid":
        return None
    if mode == "ft-only":
        return lambda loss, tau: True
    if mode == "et-only":
        return lambda loss, tau: False
    raise ValueError(f"no decision function for mode '{mode}'")


def run_experiment(cfg: RunConfig, checkpoint_path, out_dir=None,
                   clock=time.perf_counter) -> RunResult:
    """Stream the corrupted instances through one adaptation mode.

    Writes config_echo.cfg, per_instance.csv, round_summary.csv, and
    summary.txt under out_dir (default: cfg.out_dir). The evaluated
    prediction for each instance is the teacher's output on the unmasked
    image, computed before that instance's update.
    """
    checkpoint_path = Path(checkpoint_path)
    if not checkpoint_path.exists():
        raise FileNotFoundError(f"checkpoint not found: {checkpoint_path}")
    validate_config(cfg)
    out_dir = Path(out_dir) if out_dir is not None else Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config_echo.cfg").write_text(format_config(cfg))

    params, ckpt_config = load_checkpoint(checkpoint_path)
    expected = cfg.model_config()
    if ckpt_config != expected:
        raise ValueError(f"checkpoint model config {ckpt_config} does not match "
                         f"run config {expected}")
    engine = init_adaptation(params, expected, lr=cfg.lr_tta, alpha=cfg.alpha,
                             alpha_l=cfg.alpha_l, optimizer_kind=cfg.optimizer,
                             et_groups=cfg.et_groups, ft_lr_mult=cfg.ft_lr_mult,
                             decision_fn=_decision_fn_for(cfg.mode) if cfg.mode != "no-adapt" else None,
                             mask_seed=cfg.seed, clock=clock)
    stream = build_stream(cfg.scene_spec(), cfg.domains, cfg.per_domain, cfg.rounds,
                          cfg.seed, cfg.severity)
    rows = []
    run_start = clock()
    for inst in stream:
        if cfg.mode == "no-adapt":
            start = clock()
            pred = engine.pseudo_label(inst.image)
            wall_ms = (clock() - start) * 1000.0
            row = {"t": inst.t, "domain": inst.domain, "round": inst.round,
                   "decision": NO_DECISION, "loss_seg": float("nan"),
                   "loss_rec": float("nan"), "tau_before": float("nan"),
                   "tau_after": float("nan"),
                   "miou_instance": compute_miou(inst.labels, pred),
                   "wall_ms": wall_ms}
        else:
            report = engine.step(inst.image, t_index=inst.t, domain=inst.domain)
            miou = (float("nan") if report.teacher_labels is None
                    else compute_miou(inst.labels, report.teacher_labels))
            row = {"t": inst.t, "domain": inst.domain, "round": inst.round,
                   "decision": report.decision, "loss_seg": report.loss_seg,
                   "loss_rec": report.loss_rec, "tau_before": report.tau_before,
                   "tau_after": report.tau_after, "miou_instance": miou,
                   "wall_ms": report.wall_ms}
        rows.append(row)
    total_wall_s = clock() - run_start

    _write_csv(out_dir / "per_instance.csv", PER_INSTANCE_COLUMNS, rows)
    summary_rows = round_summary(rows, cfg.domains)
    _write_csv(out_dir / "round_summary.csv", ROUND_SUMMARY_COLUMNS, summary_rows)

    mious = [r["miou_instance"] for r in rows if not math.isnan(r["miou_instance"])]
    mean_miou = float(np.mean(mious)) if mious else float("nan")
    ft = sum(1 for r in rows if r["decision"] == FT)
    et = sum(1 for r in rows if r["decision"] == ET)
    skip = sum(1 for r in rows if r["decision"] == SKIP)
    if cfg.mode != "no-adapt":
        if (ft, et, skip) != (engine.ft_count, engine.et_count, engine.skipped):
            raise AssertionError("per-instance rows disagree with engine counters")
    summary = (f"mode={cfg.mode} instances={len(rows)} mean_miou={mean_miou!r} "
               f"ft={ft} et={et} skipped={skip}\n")
    (out_dir / "summary.txt").write_text(summary)
    return RunResult(mode=cfg.mode, rows=rows, mean_miou=mean_miou, ft_count=ft,
                     et_count=et, skip_count=skip,
                     forward_count=engine.forward_count,
                     total_wall_s=total_wall_s, out_dir=out_dir)


def round_summary(rows, domain_order) -> list:
    """Aggregate per-instance rows into (round, domain) cells plus totals.

    Emits one row per (round, domain in stream order), one per-round 'all'
    row, and a final ('all', 'all') row; recomputable from the per-instance
    CSV alone.
    """
    out = []

    def cell(round_tag, domain_tag, members):
        mious = [r["miou_instance"] for r in members
                 if not math.isnan(r["miou_instance"])]
        ft = sum(1 for r in members if r["decision"] == FT)
        et = sum(1 for r in members if r["decision"] == ET)
        skip = sum(1 for r in members if r["decision"] == SKIP)
        denom = ft + et
        return {"round": round_tag, "domain": domain_tag, "n": len(members),
                "miou_mean": float(np.mean(mious)) if mious else float("nan"),
                "ft": ft, "et": et, "skip": skip,
                "ft_ratio": ft / denom if denom else float("nan"),
                "mean_wall_ms": (float(np.mean([r["wall_ms"] for r in members]))
                                 if members else float("nan"))}

    rounds = sorted({r["round"] for r in rows})
    for rnd in rounds:
        in_round = [r for r in rows if r["round"] == rnd]
        for domain in domain_order:
            members = [r for r in in_round if r["domain"] == domain]
            if members:
                out.append(cell(rnd, domain, members))
        out.append(cell(rnd, "all", in_round))
    out.append(cell("all", "all", rows))
    return out


def read_per_instance_csv(path) -> list:
    """Load per_instance.csv back into typed rows (inverse of the writer)."""
    with Path(path).open() as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != PER_INSTANCE_COLUMNS:
            raise ValueError(f"per-instance columns must be {PER_INSTANCE_COLUMNS}")
        rows = []
        for rec in reader:
            rows.append({"t": int(rec["t"]), "domain": rec["domain"],
                         "round": int(rec["round"]), "decision": rec["decision"],
                         "loss_seg": float(rec["loss_seg"]),
                         "loss_rec": float(rec["loss_rec"]),
                         "tau_before": float(rec["tau_before"]),
                         "tau_after": float(rec["tau_after"]),
                         "miou_instance": float(rec["miou_instance"]),
                         "wall_ms": float(rec["wall_ms"])})
    return rows


def measure_throughput(result: RunResult) -> tuple:
    """(instances per second, model forwards per instance) for a finished run.

    Asserts the forward-count contract: two forwards per instance in the
    adapting modes, one in no-adapt.
    """
    n = len(result.rows)
    if n == 0:
        raise ValueError("measure_throughput: empty run")
    forwards_per_instance = result.forward_count / n
    expected = 1.0 if result.mode == "no-adapt" else 2.0
    if forwards_per_instance != expected:
        raise AssertionError(f"mode {result.mode}: expected {expected} forwards "
                             f"per instance, measured {forwards_per_instance}")
    if result.total_wall_s <= 0:
        raise ValueError("measure_throughput: non-positive wall time")
    return n / result.total_wall_s, forwards_per_instance


def run_mode_comparison(cfg: RunConfig, checkpoint_path, out_dir,
                        modes=MODES, clock=time.perf_counter) -> dict:
    """Run several modes on the same stream; writes modes_summary.csv."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    results = {}
    summary_rows = []
    for mode in modes:
        mode_cfg = replace(cfg, mode=mode)
        result = run_experiment(mode_cfg, checkpoint_path,
                                out_dir / mode.replace("-", "_"), clock=clock)
        results[mode] = result
        denom = result.ft_count + result.et_count
        summary_rows.append({
            "mode": mode, "instances": len(result.rows),
            "mean_miou": result.mean_miou, "ft": result.ft_count,
            "et": result.et_count, "skip": result.skip_count,
            "ft_ratio": result.ft_count / denom if denom else float("nan"),
            "mean_wall_ms": float(np.mean([r["wall_ms"] for r in result.rows]))})
    _write_csv(out_dir / "modes_summary.csv", MODES_SUMMARY_COLUMNS, summary_rows)
    return results
