"""Command-line interface.

Subcommands cover the full experiment lifecycle: ``pretrain-source``
(RGB encoder), ``train`` (one strategy cell), ``eval`` (score a
checkpoint), ``lr-find`` (range test), ``export-colorized`` (inspect
colorizer output), and ``report`` (aggregate runs with paired tests).
Runs live under ``<out>/<strategy>/<fraction>/<seed>/``.  Errors exit
nonzero with one structured ``error: <code>: <detail>`` line on stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from .autodiff import NonFiniteError, ShapeMismatch, TapeError, Tensor, Variable
from .backbone import CheckpointError
from .colorizers import ColorizerKind
from .config import ConfigError, explain_lines, read_config, resolve_config
from .datasets import (
    NormalizationStats,
    compute_norm_stats,
    normalize_images,
    reference_split,
    subsample,
)
from .stats import aggregate_runs, benjamini_hochberg, format_mean_std, paired_t_test
from .training import (
    LrFinderConfig,
    MissingDependencyError,
    Strategy,
    build_model,
    evaluate_model,
    lr_find,
    pretrain_source,
    restore_model,
    run_strategy,
    training_step_fn,
)

_ERROR_CODES = (
    (ConfigError, "config"),
    (MissingDependencyError, "dependency"),
    (CheckpointError, "checkpoint"),
    (ShapeMismatch, "shape"),
    (NonFiniteError, "numeric"),
    (TapeError, "autodiff"),
    (ValueError, "invalid"),
    (OSError, "io"),
)


def _fraction_dirname(fraction):
    return f"{fraction:g}"


def _run_dir(out_root, strategy, fraction, seed):
    return Path(out_root) / strategy / _fraction_dirname(fraction) / str(seed)


def _load_config(args):
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["train.seed"] = args.seed
    if getattr(args, "fraction", None) is not None:
        overrides["data.train_fraction"] = args.fraction
    if getattr(args, "colorizer", None) is not None:
        overrides["model.colorizer"] = args.colorizer
    if getattr(args, "domain", None) is not None:
        overrides["data.domain"] = args.domain
    if getattr(args, "out", None) is not None:
        overrides["paths.out"] = args.out
    if args.config is not None:
        cfg = read_config(args.config, overrides)
    else:
        cfg = resolve_config({}, overrides)
    if args.explain:
        print("\n".join(explain_lines(cfg)))
        return None
    return cfg


def _write_predictions(path, scores, targets, mask):
    k = scores.shape[1]
    header = (
        ["sample_id"]
        + [f"score_{j}" for j in range(k)]
        + [f"target_{j}" for j in range(k)]
        + [f"mask_{j}" for j in range(k)]
    )
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for i in range(scores.shape[0]):
            row = [str(i)]
            row += [f"{scores[i, j]:.6f}" for j in range(k)]
            row += [f"{targets[i, j]:g}" for j in range(k)]
            row += [f"{mask[i, j]:g}" for j in range(k)]
            writer.writerow(row)


def _stats_near_checkpoint(checkpoint, domain):
    """Use the producing run's normalization stats when available."""
    sibling = Path(checkpoint).parent / "norm_stats.json"
    if sibling.exists():
        with open(sibling) as fh:
            raw = json.load(fh)
        return NormalizationStats(mean=raw["mean"], std=raw["std"])
    return compute_norm_stats(reference_split(domain, "train"))


def _evaluate_to_dir(model, cfg, domain, split, checkpoint, out_dir):
    from .datasets import apply_policy
    from .training import predict_scores

    dataset = reference_split(domain, split)
    stats = _stats_near_checkpoint(checkpoint, domain)
    report = evaluate_model(model, dataset, stats, cfg.policies)
    scores = predict_scores(model, dataset.images, stats)
    targets, mask = apply_policy(dataset.labels, cfg.policies)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_predictions(out / f"predictions_{split}.csv", scores, targets, mask)
    payload = {
        "domain": domain,
        "split": split,
        "checkpoint": str(checkpoint),
        "mean_auc": report.mean,
        "per_observation": list(report.per_observation),
        "n_samples": report.n_samples,
    }
    with open(out / f"eval_{split}.json", "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return report


def cmd_pretrain_source(args):
    cfg = _load_config(args)
    if cfg is None:
        return 0
    out = Path(cfg.out) / "pretrain" / str(cfg.seed)
    train_ds = reference_split("source_rgb", "train")
    val_ds = reference_split("source_rgb", "val")
    run = pretrain_source(
        cfg.encoder_config(), 4, train_ds, val_ds, cfg.train_config(train_ds.spec.image_size), out
    )
    print(f"pretrain-source: best val mean AUC {run.best_val_mean_auc:.4f} at step {run.best_step}")
    print(f"encoder checkpoint: {run.best_path}")
    return 0


def _auto_checkpoints(cfg, strategy, out_root):
    """Fill strategy checkpoint dependencies from the runs layout."""
    checkpoints = {}
    if strategy is Strategy.ALL and cfg.colorizer_checkpoint is None:
        sibling = _run_dir(out_root, Strategy.COLOR_MODULE.value, cfg.train_fraction, cfg.seed)
        checkpoints["colorizer"] = str(sibling / "best.bin")
    if strategy is Strategy.LAST_LAYER and cfg.transfer_checkpoint is None:
        sibling = _run_dir(out_root, Strategy.COLOR_MODULE.value, cfg.train_fraction, cfg.seed)
        checkpoints["transfer"] = str(sibling / "best.bin")
    return checkpoints


def cmd_train(args):
    cfg = _load_config(args)
    if cfg is None:
        return 0
    strategy = Strategy(args.strategy)
    out_dir = _run_dir(cfg.out, strategy.value, cfg.train_fraction, cfg.seed)

    train_ds = reference_split(cfg.domain, "train")
    if cfg.train_fraction < 1.0:
        train_ds = subsample(train_ds, cfg.train_fraction, seed=cfg.seed)
    val_ds = reference_split(cfg.domain, "val")

    strategy_cfg = cfg.strategy_config(strategy, **_auto_checkpoints(cfg, strategy, cfg.out))
    run = run_strategy(
        strategy_cfg, train_ds, val_ds, cfg.policies, cfg.train_config(train_ds.spec.image_size), out_dir
    )

    model = restore_model(strategy_cfg, run.best_path)
    report = _evaluate_to_dir(model, cfg, cfg.domain, "test", run.best_path, out_dir)
    print(
        f"train[{strategy.value} frac={cfg.train_fraction:g} seed={cfg.seed}]: "
        f"val {run.best_val_mean_auc:.4f} @ step {run.best_step}, test {report.mean:.4f}"
    )
    print(f"run dir: {out_dir}")
    return 0


def cmd_eval(args):
    cfg = _load_config(args)
    if cfg is None:
        return 0
    strategy_cfg = cfg.strategy_config(Strategy(args.strategy))
    model = restore_model(strategy_cfg, args.checkpoint)
    out_dir = args.eval_out or Path(args.checkpoint).parent
    report = _evaluate_to_dir(model, cfg, cfg.domain, args.split, args.checkpoint, out_dir)
    per = ", ".join(
        "undefined" if v is None else f"{v:.4f}" for v in report.per_observation
    )
    print(f"eval[{cfg.domain}/{args.split}]: mean AUC {report.mean:.4f} ({per})")
    return 0


def cmd_lr_find(args):
    cfg = _load_config(args)
    if cfg is None:
        return 0
    strategy = Strategy(args.strategy)
    train_ds = reference_split(cfg.domain, "train")
    if cfg.train_fraction < 1.0:
        train_ds = subsample(train_ds, cfg.train_fraction, seed=cfg.seed)
    strategy_cfg = cfg.strategy_config(strategy, **_auto_checkpoints(cfg, strategy, cfg.out))
    rng = np.random.default_rng([cfg.seed, 1])
    network = build_model(strategy_cfg, rng)
    step_fn = training_step_fn(network, train_ds, cfg.policies, cfg.train_config(train_ds.spec.image_size))
    result = lr_find(step_fn, LrFinderConfig(n_steps=args.steps))
    print(f"lr-find[{strategy.value}]: suggested max_lr {result.lr:.6g} over {len(result.lrs)} probes")
    if args.out is not None:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "lr_find.json", "w") as fh:
            json.dump(
                {"lr": result.lr, "lrs": list(result.lrs), "losses": list(result.losses)},
                fh,
                indent=2,
                sort_keys=True,
            )
            fh.write("\n")
    return 0


def _to_png(array01, path):
    arr = np.clip(np.asarray(array01, dtype=np.float64), 0.0, 1.0)
    data = np.round(arr * 255.0).astype(np.uint8)
    if data.shape[0] == 1:
        Image.fromarray(data[0], mode="L").save(path)
    else:
        Image.fromarray(np.transpose(data, (1, 2, 0)), mode="RGB").save(path)


def cmd_export_colorized(args):
    cfg = _load_config(args)
    if cfg is None:
        return 0
    strategy_cfg = cfg.strategy_config(Strategy(args.strategy))
    model = restore_model(strategy_cfg, args.checkpoint)
    if getattr(model.front_end, "kind", None) is None:
        raise MissingDependencyError(
            "front end is not a colorizer; export needs a color-module, all, or last-layer checkpoint"
        )
    dataset = reference_split(cfg.domain, args.split)
    n = min(args.n, len(dataset))
    stats = _stats_near_checkpoint(args.checkpoint, cfg.domain)
    gray = dataset.images[:n]
    colored = model.front_end(Variable(Tensor(normalize_images(gray, stats), copy=False)))
    rgb = colored.value.data

    out = Path(args.export_out)
    out.mkdir(parents=True, exist_ok=True)
    for i in range(n):
        img = rgb[i]
        lo, hi = float(img.min()), float(img.max())
        scaled = (img - lo) / (hi - lo) if hi > lo else np.zeros_like(img)
        _to_png(scaled, out / f"{i:03d}_color.png")
        _to_png(gray[i], out / f"{i:03d}_gray.png")
    print(f"export-colorized: wrote {n} image pairs to {out}")
    return 0


def _collect_runs(runs_root):
    """Gather eval_test.json results keyed by (strategy, fraction, seed)."""
    runs_root = Path(runs_root)
    found = {}
    for path in sorted(runs_root.glob("*/*/*/eval_test.json")):
        seed_dir = path.parent
        try:
            seed = int(seed_dir.name)
            fraction = float(seed_dir.parent.name)
        except ValueError:
            continue
        strategy = seed_dir.parent.parent.name
        with open(path) as fh:
            payload = json.load(fh)
        found[(strategy, fraction, seed)] = payload["mean_auc"]
    if not found:
        raise ValueError(f"report: no eval_test.json files under {runs_root}")
    return found


def cmd_report(args):
    results = _collect_runs(args.runs)
    conditions = {}
    for (strategy, fraction, seed), auc in sorted(results.items()):
        conditions.setdefault((strategy, fraction), {})[seed] = auc

    summary_rows = []
    for (strategy, fraction), by_seed in sorted(conditions.items()):
        aucs = [by_seed[s] for s in sorted(by_seed)]
        if len(aucs) >= 2:
            agg = aggregate_runs(aucs)
            formatted = format_mean_std(agg.mean, agg.std)
        else:
            agg = None
            formatted = f"{100 * aucs[0]:.1f}"
        summary_rows.append(
            {
                "strategy": strategy,
                "fraction": fraction,
                "n_seeds": len(aucs),
                "mean_auc": sum(aucs) / len(aucs),
                "std_auc": agg.std if agg else 0.0,
                "formatted": formatted,
            }
        )

    comparisons = []
    for fraction in sorted({f for _, f in conditions}):
        strategies = sorted(s for s, f in conditions if f == fraction)
        for i, a in enumerate(strategies):
            for b in strategies[i + 1 :]:
                seeds = sorted(set(conditions[(a, fraction)]) & set(conditions[(b, fraction)]))
                if len(seeds) < 2:
                    continue
                xs = [conditions[(a, fraction)][s] for s in seeds]
                ys = [conditions[(b, fraction)][s] for s in seeds]
                t_res = paired_t_test(xs, ys)
                comparisons.append(
                    {
                        "fraction": fraction,
                        "strategy_a": a,
                        "strategy_b": b,
                        "mean_a": sum(xs) / len(seeds),
                        "mean_b": sum(ys) / len(seeds),
                        "t": t_res.t,
                        "p": t_res.p_two_sided,
                    }
                )
    if comparisons:
        adjusted = benjamini_hochberg([c["p"] for c in comparisons], alpha=args.alpha)
        for c, adj, rej in zip(comparisons, adjusted.adjusted_p, adjusted.reject):
            c["p_adjusted"] = adj
            c["significant"] = bool(rej)

    gaps = []
    for (strategy, fraction), by_seed in sorted(conditions.items()):
        full = conditions.get((strategy, 1.0))
        if fraction == 1.0 or not full:
            continue
        seeds = sorted(set(by_seed) & set(full))
        if not seeds:
            continue
        diffs = [by_seed[s] - full[s] for s in seeds]
        gaps.append(
            {
                "strategy": strategy,
                "fraction": fraction,
                "gap_vs_full": sum(diffs) / len(diffs),
                "n_seeds": len(seeds),
            }
        )

    out = Path(args.report_out or args.runs)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "report.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["strategy", "fraction", "n_seeds", "mean_auc", "std_auc", "formatted"])
        for row in summary_rows:
            writer.writerow(
                [
                    row["strategy"],
                    f"{row['fraction']:g}",
                    row["n_seeds"],
                    f"{row['mean_auc']:.6f}",
                    f"{row['std_auc']:.6f}",
                    row["formatted"],
                ]
            )
    payload = {"conditions": summary_rows, "comparisons": comparisons, "fraction_gaps": gaps}
    with open(out / "report.json", "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")

    print(f"{'strategy':<14} {'fraction':>8} {'AUC x100':>14}")
    for row in summary_rows:
        print(f"{row['strategy']:<14} {row['fraction']:>8g} {row['formatted']:>14}")
    for c in comparisons:
        mark = "*" if c.get("significant") else " "
        print(
            f"{mark} frac {c['fraction']:g}: {c['strategy_a']} vs {c['strategy_b']}: "
            f"t={c['t']:.3f} p={c['p']:.4f} adj={c.get('p_adjusted', float('nan')):.4f}"
        )
    for g in gaps:
        print(f"gap {g['strategy']} @ {g['fraction']:g}: {100 * g['gap_vs_full']:+.1f} vs full data")
    print(f"report written to {out}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="colorbridge",
        description="Colorization-bridged transfer learning on synthetic benchmarks.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, strategy=False):
        p.add_argument("--config", default=None, help="path to a section.key = value config file")
        p.add_argument("--seed", type=int, default=None, help="override train.seed")
        p.add_argument("--out", default=None, help="override paths.out")
        p.add_argument("--explain", action="store_true", help="print resolved config and exit")
        if strategy:
            p.add_argument(
                "--strategy",
                required=True,
                choices=[s.value for s in Strategy],
                help="weight-handling strategy",
            )
            p.add_argument(
                "--colorizer",
                default=None,
                choices=[k.value for k in ColorizerKind],
                help="override model.colorizer",
            )
            p.add_argument("--fraction", type=float, default=None, help="override data.train_fraction")
            p.add_argument("--domain", default=None, help="override data.domain")

    p = sub.add_parser("pretrain-source", help="train the RGB source encoder")
    common(p)
    p.set_defaults(func=cmd_pretrain_source)

    p = sub.add_parser("train", help="train one strategy cell")
    common(p, strategy=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a reference split")
    common(p, strategy=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.add_argument("--eval-out", default=None, help="directory for predictions/eval json")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("lr-find", help="learning-rate range test")
    common(p, strategy=True)
    p.add_argument("--steps", type=int, default=60, help="number of sweep steps")
    p.set_defaults(func=cmd_lr_find)

    p = sub.add_parser("export-colorized", help="write colorizer outputs as PNG pairs")
    common(p, strategy=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--export-out", required=True, help="output directory for PNG pairs")
    p.set_defaults(func=cmd_export_colorized)

    p = sub.add_parser("report", help="aggregate eval results with paired tests")
    p.add_argument("--runs", required=True, help="runs root directory")
    p.add_argument("--report-out", default=None, help="where to write report files")
    p.add_argument("--alpha", type=float, default=0.05)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except tuple(exc for exc, _ in _ERROR_CODES) as exc:
        for exc_type, code in _ERROR_CODES:
            if isinstance(exc, exc_type):
                print(f"error: {code}: {exc}", file=sys.stderr)
                break
        return 2


if __name__ == "__main__":
    sys.exit(main())
