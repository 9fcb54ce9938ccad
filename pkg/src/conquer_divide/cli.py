"""Command-line front end: dataset generation, training, evaluation,
ablations, and grounding-heatmap export.

Exit codes: 0 success, 2 usage or input error, 3 numerical failure.
Log verbosity comes from the CD_LOG environment variable
(debug/info/warning/error).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, most_heterogeneous_source
from .checkpoint import load_checkpoint, save_checkpoint
from .data import SynthDataset, generate_dataset, prevalence_table, sample_placements
from .evaluation import attention_grid, evaluate_model, grounding_heatmap, write_pgm
from .training import (
    ABLATION_MODES,
    TrainingDiverged,
    ablation_run,
    model_from_checkpoint,
    train_conquer,
    train_divide,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERIC = 3


def _setup_logging() -> None:
    level = os.environ.get("CD_LOG", "warning").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")


def _load_config(path: str, seed: int | None, threads: int | None) -> RunConfig:
    cfg = RunConfig.load(path)
    if seed is not None:
        cfg = RunConfig.from_dict({**cfg.to_dict(), "seed": seed})
    if threads is not None:
        data = cfg.to_dict()
        data["train"]["threads"] = threads
        cfg = RunConfig.from_dict(data)
    return cfg


def _write_json(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _snapshot_config(out: Path, cfg: RunConfig) -> None:
    _write_json(out / "run_config.json", cfg.to_dict())


def _write_loss_log(path: Path, entries: list[dict]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for entry in entries:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")


def cmd_gen_data(args) -> int:
    cfg = _load_config(args.config, args.seed, args.threads)
    out = Path(args.out)
    dataset = generate_dataset(cfg.dataset, cfg.seed)
    dataset.save(out)
    _snapshot_config(out, cfg)
    table = prevalence_table(dataset)
    print(f"dataset written to {out} (seed {cfg.seed})")
    header = "source | " + " ".join(f"c{j:02d}" for j in range(cfg.dataset.num_classes))
    print(header)
    for sid, rates in table.items():
        cells = " ".join("  . " if r != r else f"{r:.2f}" for r in rates)
        print(f"{sid:6d} | {cells}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_config(args.config, args.seed, args.threads)
    out = Path(args.out)
    dataset = SynthDataset.load(args.dataset)
    _snapshot_config(out, cfg)
    conquer_path = out / "conquer.ckpt"
    if args.stage in ("conquer", "both"):
        trainer_ckpt = train_conquer(dataset, cfg)
        save_checkpoint(trainer_ckpt, conquer_path)
        print(f"conquer checkpoint: {conquer_path} (best val macro AUC {trainer_ckpt.best_metric})")
    if args.stage in ("divide", "both"):
        if args.stage == "divide":
            source = Path(args.checkpoint) if args.checkpoint else conquer_path
            if not source.exists():
                print(f"error: conquer checkpoint not found at {source}", file=sys.stderr)
                return EXIT_USAGE
            conquer_ckpt = load_checkpoint(source)
        else:
            conquer_ckpt = load_checkpoint(conquer_path)
        divide_ckpt = train_divide(conquer_ckpt, dataset, cfg)
        divide_path = out / "divide.ckpt"
        save_checkpoint(divide_ckpt, divide_path)
        print(f"divide checkpoint: {divide_path} (best val macro AUC {divide_ckpt.best_metric})")
    return EXIT_OK


def _load_class_names(path: str) -> list[list[int]]:
    with open(path, encoding="utf-8") as fh:
        names = json.load(fh)
    if not isinstance(names, list) or not all(isinstance(n, list) for n in names):
        raise ValueError("class-name file must be a JSON list of token-id lists")
    return [[int(t) for t in name] for name in names]


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    dataset = SynthDataset.load(args.dataset)
    model = model_from_checkpoint(ckpt)
    class_names = _load_class_names(args.classes) if args.classes else None
    report = evaluate_model(
        model, dataset, split=args.split, class_names=class_names, score_mode=args.score_mode
    )
    out = Path(args.out)
    _write_json(out / "report.json", report.to_dict())
    (out / "report.csv").write_text(report.per_class_csv(), encoding="utf-8")
    _write_json(out / "run_config.json", ckpt.config)
    agg = report.aggregates
    print(
        "aAUC {aAUC} aF1 {aF1} aACC {aACC} mAP {mAP} over {n_classes} classes".format(**agg)
    )
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _load_config(args.config, args.seed, args.threads)
    out = Path(args.out)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [cfg.seed]
    rows = []
    for seed in seeds:
        seed_cfg = RunConfig.from_dict({**cfg.to_dict(), "seed": seed})
        dataset = (
            SynthDataset.load(args.dataset) if args.dataset else generate_dataset(seed_cfg.dataset, seed)
        )
        conquer_ckpt = train_conquer(dataset, seed_cfg)
        hetero = most_heterogeneous_source(seed_cfg.dataset)
        for mode in ABLATION_MODES:
            report, _ = ablation_run(mode, dataset, seed_cfg, conquer_ckpt=conquer_ckpt)
            agg = report.aggregates
            hetero_auc = report.per_source.get(hetero, {}).get("aggregates", {}).get("aAUC")
            rows.append(
                {
                    "mode": mode,
                    "seed": seed,
                    "aAUC": agg["aAUC"],
                    "aF1": agg["aF1"],
                    "aACC": agg["aACC"],
                    "mAP": agg["mAP"],
                    f"source{hetero}_aAUC": hetero_auc,
                }
            )
    _snapshot_config(out, cfg)
    _write_json(out / "ablation.json", {"rows": rows, "most_heterogeneous_source": hetero})
    lines = ["mode,seed,aAUC,aF1,aACC,mAP,hetero_aAUC"]
    for row in rows:
        hetero_key = [k for k in row if k.endswith("_aAUC") and k.startswith("source")][0]
        lines.append(
            f"{row['mode']},{row['seed']},{row['aAUC']},{row['aF1']},{row['aACC']},{row['mAP']},{row[hetero_key]}"
        )
    (out / "ablation.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    for line in lines:
        print(line)
    return EXIT_OK


def _parse_sample_id(text: str) -> tuple[str, int, int]:
    parts = text.split(":")
    if len(parts) != 3:
        raise ValueError(f"sample id must look like split:source:index, got {text!r}")
    return parts[0], int(parts[1]), int(parts[2])


def cmd_ground(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    dataset = SynthDataset.load(args.dataset)
    model = model_from_checkpoint(ckpt)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    class_index = args.class_index
    if not 0 <= class_index < dataset.config.num_classes:
        print(f"error: class index {class_index} out of range", file=sys.stderr)
        return EXIT_USAGE
    for sample_id in args.samples.split(","):
        split, source_id, index = _parse_sample_id(sample_id.strip())
        sample, _ = dataset.locate(split, source_id, index)
        heatmap = grounding_heatmap(model, sample.image, class_index)
        grid, expert = attention_grid(model, sample.image, class_index)
        source = dataset.source_by_id(source_id)
        placements = sample_placements(dataset.config, dataset.seed, source, split, index)
        stem = f"{split}_{source_id}_{index}_class{class_index}"
        write_pgm(out / f"{stem}.pgm", heatmap)
        meta = {
            "sample_id": sample_id.strip(),
            "expert": expert,
            "layer": model.cfg.decoder_layers - 1,
            "class_index": class_index,
            "grid": [float(v) for v in grid.ravel()],
            "grid_shape": list(grid.shape),
            "heatmap_file": f"{stem}.pgm",
            "pattern_bbox": list(placements[class_index].bbox) if class_index in placements else None,
        }
        _write_json(out / f"{stem}.json", meta)
        print(f"wrote {stem}.pgm / {stem}.json (dominant expert {expert})")
    _write_json(out / "run_config.json", ckpt.config)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cdx", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-data", help="generate a synthetic multi-source dataset")
    gen.add_argument("--config", required=True)
    gen.add_argument("--out", required=True)
    gen.add_argument("--seed", type=int, default=None)
    gen.add_argument("--threads", type=int, default=None)
    gen.set_defaults(func=cmd_gen_data)

    train = sub.add_parser("train", help="run the training stages")
    train.add_argument("--config", required=True)
    train.add_argument("--dataset", required=True)
    train.add_argument("--out", required=True)
    train.add_argument("--stage", choices=("conquer", "divide", "both"), default="both")
    train.add_argument("--checkpoint", default=None, help="conquer checkpoint for --stage divide")
    train.add_argument("--seed", type=int, default=None)
    train.add_argument("--threads", type=int, default=None)
    train.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--dataset", required=True)
    ev.add_argument("--out", required=True)
    ev.add_argument("--classes", default=None, help="JSON file of class-name token lists (zero-shot)")
    ev.add_argument("--split", choices=("train", "val", "test"), default="test")
    ev.add_argument("--score-mode", choices=("ensemble", "first_expert"), default="ensemble")
    ev.set_defaults(func=cmd_eval)

    ab = sub.add_parser("ablate", help="run conquer-only / equal-weights / full with shared seeds")
    ab.add_argument("--config", required=True)
    ab.add_argument("--out", required=True)
    ab.add_argument("--dataset", default=None, help="reuse an existing dataset directory")
    ab.add_argument("--seeds", default=None, help="comma-separated seeds (default: config seed)")
    ab.add_argument("--seed", type=int, default=None)
    ab.add_argument("--threads", type=int, default=None)
    ab.set_defaults(func=cmd_ablate)

    gr = sub.add_parser("ground", help="export grounding heatmaps for samples")
    gr.add_argument("--checkpoint", required=True)
    gr.add_argument("--dataset", required=True)
    gr.add_argument("--out", required=True)
    gr.add_argument("--samples", required=True, help="comma-separated ids like test:0:3")
    gr.add_argument("--class-index", type=int, required=True)
    gr.set_defaults(func=cmd_ground)
    return parser


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse uses its own exit codes
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    try:
        return args.func(args)
    except TrainingDiverged as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, FileNotFoundError, KeyError, ValueError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
