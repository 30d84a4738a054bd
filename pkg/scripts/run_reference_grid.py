"""Run the frozen reference-benchmark grid and summarize test AUCs.

One grid = three seeds, each seed a full dependency chain:

  source_rgb pretrain
    -> target_a: baseline / baseline-all / color-module / all
       (baseline and color-module also at train fractions 0.25 and 0.1)
    -> target_a_prime and target_b: baseline vs last-layer, where the
       last-layer cell reuses the seed's target_a color-module checkpoint.

Step budgets are per route, sized by what actually has to converge:
routes with no color module in the loop are done by 300 steps, while
routes that train through one need 600.  Everything else (batch size,
max lr, schedule shape, augmentation) is shared.

Writes grid_summary.json under --out and prints a per-seed table.
"""

import argparse
import json
import sys
import time
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from colorbridge.cli import main as cli_main

SEEDS = (0, 1, 2)
FRACTIONS = (1.0, 0.25, 0.1)

PRETRAIN_STEPS = 300
SHORT_STEPS = 300  # routes with no color module in the loop
LONG_STEPS = 600  # routes that train through a color module
BATCH_SIZE = 32
MAX_LR = 0.05
CHECKPOINT_EVERY = 150

STRATEGY_STEPS = {
    "baseline": SHORT_STEPS,
    "baseline-all": SHORT_STEPS,
    "color-module": LONG_STEPS,
    "all": LONG_STEPS,
    "last-layer": SHORT_STEPS,
}


def _fraction_dirname(fraction):
    return f"{fraction:g}"


def _write_config(path, domain, steps, seed, out_root, encoder=None, transfer=None):
    lines = [
        f"data.domain = {domain}",
        f"train.steps = {steps}",
        f"train.batch_size = {BATCH_SIZE}",
        f"train.max_lr = {MAX_LR}",
        f"train.checkpoint_every = {CHECKPOINT_EVERY}",
        f"train.seed = {seed}",
        f"paths.out = {out_root}",
    ]
    if encoder is not None:
        lines.append(f"paths.encoder_checkpoint = {encoder}")
    if transfer is not None:
        lines.append(f"paths.transfer_checkpoint = {transfer}")
    path.write_text("\n".join(lines) + "\n")


def _run_cell(cfg_path, command, strategy=None, fraction=None):
    argv = [command, "--config", str(cfg_path)]
    if strategy is not None:
        argv += ["--strategy", strategy]
    if fraction is not None:
        argv += ["--fraction", str(fraction)]
    rc = cli_main(argv)
    if rc != 0:
        raise RuntimeError(f"grid cell failed (exit {rc}): {' '.join(argv)}")


def _read_test_auc(run_dir):
    with open(Path(run_dir) / "eval_test.json") as fh:
        return json.load(fh)["mean_auc"]


def run_seed(out, seed):
    """Run one seed's dependency chain; returns a list of cell records."""
    seed_dir = Path(out) / f"s{seed}"
    cfg_dir = seed_dir / "configs"
    cfg_dir.mkdir(parents=True, exist_ok=True)
    roots = {
        "target_a": seed_dir / "a",
        "target_a_prime": seed_dir / "aprime",
        "target_b": seed_dir / "b",
    }
    encoder = roots["target_a"] / "pretrain" / str(seed) / "best.bin"
    transfer = roots["target_a"] / "color-module" / "1" / str(seed) / "best.bin"

    cells = []

    def train_cell(domain, strategy, fraction=1.0, transfer_path=None):
        steps = STRATEGY_STEPS[strategy]
        tag = f"{domain}_{strategy}_{_fraction_dirname(fraction)}"
        cfg = cfg_dir / f"{tag}.cfg"
        _write_config(
            cfg, domain, steps, seed, roots[domain], encoder=encoder, transfer=transfer_path
        )
        _run_cell(cfg, "train", strategy=strategy, fraction=fraction)
        run_dir = roots[domain] / strategy / _fraction_dirname(fraction) / str(seed)
        cells.append(
            {
                "seed": seed,
                "domain": domain,
                "strategy": strategy,
                "fraction": fraction,
                "steps": steps,
                "test_auc": _read_test_auc(run_dir),
                "run_dir": str(run_dir),
            }
        )
        print(f"  {tag}: test AUC {cells[-1]['test_auc']:.4f}", flush=True)

    pre_cfg = cfg_dir / "pretrain.cfg"
    _write_config(pre_cfg, "target_a", PRETRAIN_STEPS, seed, roots["target_a"])
    _run_cell(pre_cfg, "pretrain-source")

    for fraction in FRACTIONS:
        train_cell("target_a", "baseline", fraction)
        train_cell("target_a", "color-module", fraction)
    train_cell("target_a", "baseline-all")
    train_cell("target_a", "all")

    for domain in ("target_a_prime", "target_b"):
        train_cell(domain, "baseline")
        train_cell(domain, "last-layer", transfer_path=transfer)
    return cells


def _mean(values):
    return sum(values) / len(values)


def summarize(cells):
    """Cross-seed mean test AUC per (domain, strategy, fraction) cell."""
    table = {}
    for row in cells:
        key = (row["domain"], row["strategy"], row["fraction"])
        table.setdefault(key, []).append(row["test_auc"])
    return {
        f"{d}/{s}/{_fraction_dirname(f)}": {"mean": _mean(v), "per_seed": v}
        for (d, s, f), v in sorted(table.items())
    }


def run_grid(out, seeds=SEEDS):
    start = time.time()
    cells = []
    for seed in seeds:
        print(f"seed {seed}:", flush=True)
        cells.extend(run_seed(out, seed))
    summary = {
        "protocol": {
            "seeds": list(seeds),
            "fractions": list(FRACTIONS),
            "pretrain_steps": PRETRAIN_STEPS,
            "strategy_steps": STRATEGY_STEPS,
            "batch_size": BATCH_SIZE,
            "max_lr": MAX_LR,
            "checkpoint_every": CHECKPOINT_EVERY,
        },
        "cells": cells,
        "means": summarize(cells),
        "elapsed_seconds": time.time() - start,
    }
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "grid_summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return summary


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", default="runs/reference_grid")
    parser.add_argument("--seeds", type=int, nargs="+", default=list(SEEDS))
    args = parser.parse_args(argv)

    summary = run_grid(args.out, tuple(args.seeds))
    print(f"\ngrid finished in {summary['elapsed_seconds'] / 60:.1f} min")
    for name, entry in summary["means"].items():
        per_seed = ", ".join(f"{v:.4f}" for v in entry["per_seed"])
        print(f"{name}: mean {entry['mean']:.4f}  [{per_seed}]")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
