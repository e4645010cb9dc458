"""Subcommand interface: train, build-index, retrieve, eval, ttt, sweep.

One flat key=value config file drives a pipeline run; command-line flags win
over file values. Every command is resumable from its on-disk inputs and
writes a manifest (config hash, seed, artifact checksums, wall time) next to
its outputs. Reports are JSON with sorted keys so reruns are byte-identical.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import codebooks as cb
from . import em as em_mod
from .data import InteractionDataset, load_interactions, synthetic_interactions
from .metrics import evaluate_retrieval
from .model import ModelConfig, TrainConfig, TwoTowerModel, load_checkpoint, save_checkpoint, train
from .tree import HierarchicalIndex
from .ttt import TttConfig, extract_pairs, run_ttt

_BUILDERS = ("em", "joint")


class ConfigError(ValueError):
    def __init__(self, violations: list[str]):
        super().__init__("invalid configuration:\n" + "\n".join(f"  - {v}" for v in violations))
        self.violations = violations


@dataclass
class RunConfig:
    data_dir: str = ""
    data_format: str = "adjacency"
    synthetic: bool = False
    synthetic_users: int = 2000
    synthetic_items: int = 3000
    synthetic_interactions: int = 60000

    dim: int = 64
    hidden: int = 0
    epochs: int = 10
    lr: float = 1e-3
    batch_size: int = 1024
    negatives: int = 1
    l2_reg: float = 0.0

    builder: str = "em"
    levels: list[int] = field(default_factory=lambda: [512, 64])
    rounds: int = 1
    kmeans_iters: int = 25
    m_step_epochs: int = 1
    freeze_model: bool = True
    include_zero_centroid: bool = True
    max_alpha: float = 50.0
    exp: float = 2.0
    max_iters: int = 2000
    flops_weight: float = 0.1
    pool_batches: int = 8
    warmup_iters: int = 200
    index_loss_weight: float = 1.0
    node_lr: float = 0.02

    beam_width: int = 32
    top_k: int = 20
    eval_k: int = 20

    ttt_depth: int = 1
    ttt_thresholds: list[float] = field(default_factory=lambda: [0.8])
    finetune_epochs: int = 5
    finetune_lr: float = 1e-3
    sweep_depths: list[int] = field(default_factory=list)
    sweep_thresholds: list[float] = field(default_factory=list)

    checkpoint: str = ""
    index_file: str = ""
    out_dir: str = "out"
    seed: int = 0
    threads: int = 1

    def validate(self) -> None:
        bad: list[str] = []
        if not self.synthetic:
            if not self.data_dir:
                bad.append("data_dir is required unless synthetic=true")
            elif not Path(self.data_dir).exists():
                bad.append(f"data_dir {self.data_dir!r} does not exist")
        if self.data_format not in ("adjacency", "pair_tsv"):
            bad.append(f"data_format must be adjacency or pair_tsv, got {self.data_format!r}")
        if self.builder not in _BUILDERS:
            bad.append(f"builder must be one of {_BUILDERS}, got {self.builder!r}")
        if not self.levels or any(k < 1 for k in self.levels):
            bad.append("levels must be a non-empty list of positive node counts")
        if self.dim < 1:
            bad.append("dim must be >= 1")
        if self.batch_size < 1:
            bad.append("batch_size must be >= 1")
        if self.beam_width < 1 or self.top_k < 1:
            bad.append("beam_width and top_k must be >= 1")
        if self.ttt_depth < 1:
            bad.append("ttt_depth must be >= 1")
        if len(self.ttt_thresholds) != self.ttt_depth:
            bad.append(f"ttt_thresholds must list {self.ttt_depth} values (one per level)")
        if any(not 0.0 <= t <= 1.0 for t in self.ttt_thresholds):
            bad.append("ttt_thresholds must lie in [0, 1]")
        if self.threads < 1:
            bad.append("threads must be >= 1")
        if self.checkpoint and not Path(self.checkpoint).exists():
            bad.append(f"checkpoint {self.checkpoint!r} does not exist")
        if self.index_file and not Path(self.index_file).exists():
            bad.append(f"index_file {self.index_file!r} does not exist")
        if bad:
            raise ConfigError(bad)

    def hash(self) -> str:
        canon = "\n".join(f"{f.name}={getattr(self, f.name)!r}" for f in sorted(fields(self), key=lambda f: f.name))
        return hashlib.sha256(canon.encode()).hexdigest()


def _coerce(name: str, raw: str, kind):
    raw = raw.strip()
    if kind is bool:
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ValueError(f"{name}: expected true/false, got {raw!r}")
    if kind is int:
        return int(raw)
    if kind is float:
        return float(raw)
    if kind == list[int]:
        return [int(t) for t in raw.split(",") if t.strip()] if raw else []
    if kind == list[float]:
        return [float(t) for t in raw.split(",") if t.strip()] if raw else []
    return raw


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    cfg = RunConfig()
    kinds = {f.name: f.type for f in fields(RunConfig)}
    # dataclass field types arrive as strings under future annotations
    resolved = {
        "str": str, "int": int, "float": float, "bool": bool,
        "list[int]": list[int], "list[float]": list[float],
    }
    violations: list[str] = []
    entries: dict[str, str] = {}
    if path is not None:
        for line_no, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if "=" not in stripped:
                violations.append(f"{path}:{line_no}: expected key = value")
                continue
            key, _, value = stripped.partition("=")
            entries[key.strip()] = value.strip()
    for key, value in (overrides or {}).items():
        entries[key] = value if isinstance(value, str) else repr(value)
    for key, value in entries.items():
        if key not in kinds:
            violations.append(f"unknown config key {key!r}")
            continue
        kind = resolved.get(kinds[key], str) if isinstance(kinds[key], str) else kinds[key]
        try:
            setattr(cfg, key, _coerce(key, value, kind))
        except ValueError as exc:
            violations.append(str(exc))
    if violations:
        raise ConfigError(violations)
    cfg.validate()
    return cfg


def _load_dataset(cfg: RunConfig) -> InteractionDataset:
    if cfg.synthetic:
        return synthetic_interactions(
            cfg.synthetic_users, cfg.synthetic_items, cfg.synthetic_interactions, seed=cfg.seed
        )
    return load_interactions(cfg.data_dir, cfg.data_format)


def _paths(cfg: RunConfig) -> dict[str, Path]:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return {
        "out": out,
        "checkpoint": Path(cfg.checkpoint) if cfg.checkpoint else out / "model.ckpt",
        "index": Path(cfg.index_file) if cfg.index_file else out / "index.bin",
    }


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _emit(report: dict, out_dir: Path, name: str) -> str:
    text = json.dumps(report, sort_keys=True, indent=2)
    (out_dir / name).write_text(text + "\n", encoding="utf-8")
    return text


def _manifest(cfg: RunConfig, command: str, out_dir: Path, artifacts: list[Path], started: float) -> None:
    manifest = {
        "command": command,
        "config_hash": cfg.hash(),
        "seed": cfg.seed,
        "artifacts": {p.name: _sha256(p) for p in artifacts if p.exists()},
        "wall_clock_s": round(time.time() - started, 3),
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")


def cmd_train(cfg: RunConfig) -> dict:
    started = time.time()
    paths = _paths(cfg)
    dataset = _load_dataset(cfg)
    model = TwoTowerModel(
        ModelConfig(dataset.num_users, dataset.num_items, dim=cfg.dim, hidden=cfg.hidden, seed=cfg.seed)
    )
    report = train(
        model,
        dataset,
        cfg.epochs,
        TrainConfig(
            lr=cfg.lr, batch_size=cfg.batch_size, negatives=cfg.negatives,
            l2_reg=cfg.l2_reg, seed=cfg.seed,
        ),
    )
    save_checkpoint(model, paths["checkpoint"])
    out = {
        "epochs": cfg.epochs,
        "epoch_losses": [round(x, 8) for x in report.epoch_losses],
        "num_users": dataset.num_users,
        "num_items": dataset.num_items,
        "checkpoint": str(paths["checkpoint"]),
    }
    _emit(out, paths["out"], "train_report.json")
    _manifest(cfg, "train", paths["out"], [paths["checkpoint"], paths["out"] / "train_report.json"], started)
    return out


def _build_index(cfg: RunConfig, model: TwoTowerModel, dataset: InteractionDataset, progress=None):
    if cfg.builder == "em":
        em_cfg = em_mod.EmConfig(
            rounds=cfg.rounds,
            kmeans_iters=cfg.kmeans_iters,
            node_counts=list(cfg.levels),
            m_step_epochs=cfg.m_step_epochs,
            seed=cfg.seed,
            include_zero_centroid=cfg.include_zero_centroid,
            freeze_model=cfg.freeze_model,
            train=TrainConfig(lr=cfg.lr, batch_size=cfg.batch_size, negatives=cfg.negatives, seed=cfg.seed),
        )
        books, _, recon = em_mod.em_build(model, dataset, em_cfg, progress=progress)
    else:
        idx_cfg = cb.IndexTrainConfig(
            levels=len(cfg.levels) + 1,
            node_counts=list(cfg.levels),
            max_alpha=cfg.max_alpha,
            exp=cfg.exp,
            max_iters=cfg.max_iters,
            flops_weight=cfg.flops_weight,
            pool_batches=cfg.pool_batches,
            warmup_iters=cfg.warmup_iters,
            seed=cfg.seed,
            batch_size=cfg.batch_size,
            negatives=cfg.negatives,
            index_loss_weight=cfg.index_loss_weight,
            node_lr=cfg.node_lr,
            freeze_model=cfg.freeze_model,
            include_zero_centroid=cfg.include_zero_centroid,
        )
        books, _, recon = cb.build_hierarchy(model, dataset, idx_cfg, progress=progress)
    index = HierarchicalIndex.assemble(books, model.all_item_embeddings())
    return index, recon


def cmd_build_index(cfg: RunConfig) -> dict:
    started = time.time()
    paths = _paths(cfg)
    dataset = _load_dataset(cfg)
    model = load_checkpoint(paths["checkpoint"])
    progress_path = paths["out"] / "index_progress.jsonl"
    with open(progress_path, "w", encoding="utf-8") as fh:
        index, recon = _build_index(cfg, model, dataset, progress=lambda rec: fh.write(json.dumps(rec, sort_keys=True) + "\n"))
    index.save(paths["index"])
    if not cfg.freeze_model:
        save_checkpoint(model, paths["checkpoint"])
    out = {
        "builder": cfg.builder,
        "levels": cfg.levels,
        "num_levels": index.num_levels,
        "recon_trace": [round(x, 8) for x in recon],
        "index": str(paths["index"]),
    }
    _emit(out, paths["out"], "index_report.json")
    _manifest(cfg, "build-index", paths["out"], [paths["index"], paths["out"] / "index_report.json"], started)
    return out


def cmd_retrieve(cfg: RunConfig, user_ids: list[int], stream=None) -> list[dict]:
    paths = _paths(cfg)
    model = load_checkpoint(paths["checkpoint"])
    index = HierarchicalIndex.load(paths["index"])
    records = []
    for u in user_ids:
        vec = model.user_embedding(int(u)).astype(np.float64)
        res = index.beam_search(vec, cfg.beam_width, cfg.top_k)
        rec = {
            "user_id": int(u),
            "items": [{"id": int(i), "score": float(s)} for i, s in zip(res.items, res.scores)],
            "scoring_calls": res.scoring_calls,
        }
        records.append(rec)
        if stream is not None:
            stream.write(json.dumps(rec, sort_keys=True) + "\n")
    return records


def cmd_eval(cfg: RunConfig) -> dict:
    started = time.time()
    paths = _paths(cfg)
    dataset = _load_dataset(cfg)
    model = load_checkpoint(paths["checkpoint"])
    index = HierarchicalIndex.load(paths["index"])
    flat = evaluate_retrieval(model, dataset, cfg.eval_k, mode="flat", n_threads=cfg.threads)
    beam = evaluate_retrieval(
        model, dataset, cfg.eval_k, mode="beam", index=index,
        beam_width=cfg.beam_width, n_threads=cfg.threads,
    )
    bound = index.cost_estimate(cfg.beam_width)
    out = {
        "flat": flat.to_dict(),
        "beam": beam.to_dict(),
        "beam_width": cfg.beam_width,
        "cost_bound": {
            "per_level_calls": {str(k): v for k, v in bound.per_level_calls.items()},
            "total_calls": bound.total_calls,
            "flat_calls": bound.flat_calls,
        },
    }
    _emit(out, paths["out"], "eval_report.json")
    _manifest(cfg, "eval", paths["out"], [paths["out"] / "eval_report.json"], started)
    return out


def cmd_ttt(cfg: RunConfig) -> dict:
    started = time.time()
    paths = _paths(cfg)
    dataset = _load_dataset(cfg)
    model = load_checkpoint(paths["checkpoint"])
    index = HierarchicalIndex.load(paths["index"])
    ttt_cfg = TttConfig(depth=cfg.ttt_depth, thresholds=list(cfg.ttt_thresholds))
    pairs = extract_pairs(dataset, index, ttt_cfg)
    pairs.to_tsv(paths["out"] / "ttt_pairs.tsv")
    report = run_ttt(
        model, dataset, index, ttt_cfg,
        finetune_epochs=cfg.finetune_epochs, finetune_lr=cfg.finetune_lr,
        k=cfg.eval_k, n_threads=cfg.threads,
    )
    _emit(report, paths["out"], "ttt_report.json")
    _manifest(
        cfg, "ttt", paths["out"],
        [paths["out"] / "ttt_report.json", paths["out"] / "ttt_pairs.tsv"], started,
    )
    return report


def cmd_sweep(cfg: RunConfig) -> dict:
    """Grid over traversal depths and last-level thresholds; each cell runs the
    full pair-extraction + fine-tune + re-eval loop from the same base model."""
    started = time.time()
    paths = _paths(cfg)
    dataset = _load_dataset(cfg)
    base_model = load_checkpoint(paths["checkpoint"])
    index = HierarchicalIndex.load(paths["index"])
    depths = cfg.sweep_depths or [cfg.ttt_depth]
    thresholds = cfg.sweep_thresholds or [cfg.ttt_thresholds[-1]]
    rows = []
    for depth in depths:
        base_thr = list(cfg.ttt_thresholds[:depth])
        while len(base_thr) < depth:
            base_thr.append(base_thr[-1] if base_thr else 0.5)
        for thr in thresholds:
            run_thr = base_thr[:-1] + [thr]
            ttt_cfg = TttConfig(depth=depth, thresholds=run_thr)
            model = base_model.copy()
            pairs = extract_pairs(dataset, index, ttt_cfg)
            report = run_ttt(
                model, dataset, index, ttt_cfg,
                finetune_epochs=cfg.finetune_epochs, finetune_lr=cfg.finetune_lr,
                k=cfg.eval_k, n_threads=cfg.threads,
            )
            rows.append({
                "depth": depth,
                "thresholds": run_thr,
                "pairs": len(pairs),
                "recall_before": report["recall_before"],
                "recall_after": report["recall_after"],
                "ndcg_before": report["ndcg_before"],
                "ndcg_after": report["ndcg_after"],
            })
    out = {"rows": rows}
    _emit(out, paths["out"], "sweep_report.json")
    _manifest(cfg, "sweep", paths["out"], [paths["out"] / "sweep_report.json"], started)
    return out


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="treedex", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=str, default=None)
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--threads", type=int, default=None)
    common.add_argument("--out", type=str, default=None)

    sub.add_parser("train", parents=[common])
    sub.add_parser("build-index", parents=[common])
    p_ret = sub.add_parser("retrieve", parents=[common])
    p_ret.add_argument("--users", type=str, required=True, help="comma-separated user ids")
    sub.add_parser("eval", parents=[common])
    sub.add_parser("ttt", parents=[common])
    sub.add_parser("sweep", parents=[common])

    args = parser.parse_args(argv)
    overrides: dict = {}
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    if args.threads is not None:
        overrides["threads"] = str(args.threads)
    if args.out is not None:
        overrides["out_dir"] = args.out
    try:
        cfg = load_config(args.config, overrides)
    except ConfigError as exc:
        print(str(exc), file=sys.stderr)
        return 2

    if args.command == "train":
        report = cmd_train(cfg)
    elif args.command == "build-index":
        report = cmd_build_index(cfg)
    elif args.command == "retrieve":
        users = [int(t) for t in args.users.split(",") if t.strip()]
        cmd_retrieve(cfg, users, stream=sys.stdout)
        return 0
    elif args.command == "eval":
        report = cmd_eval(cfg)
    elif args.command == "ttt":
        report = cmd_ttt(cfg)
    else:
        report = cmd_sweep(cfg)
    print(json.dumps(report, sort_keys=True, indent=2))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
