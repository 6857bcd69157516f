"""Command line entry point: ``crdflow <subcommand> [options]``.

Exit codes: 0 success, 1 failed check, 2 configuration error, 3 numeric abort.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import trainer
from .config import ConfigError, RunConfig, builtin_config, load_config
from .io import RunDir, default_run_root, read_checkpoint, read_metrics, write_checkpoint
from .plotting import plot_metrics, plot_png, plot_svg
from .rewards import bon_curve, eval_reward
from .flow import SamplerConfig, ode_sample
from .tilt import run_oracle_suite

log = logging.getLogger("crdflow")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3


def _load(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else builtin_config(args.preset)
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def _out_dir(args, cfg: RunConfig) -> Path:
    if args.out:
        return Path(args.out)
    return default_run_root() / f"{args.command}_seed{cfg.seed}"


def _emit(rows: list[dict]) -> None:
    """Comma-separated report on stdout."""
    if not rows:
        return
    writer = csv.DictWriter(sys.stdout, fieldnames=list(rows[0]), lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)


def cmd_pretrain(args) -> int:
    cfg = _load(args)
    rd = RunDir(_out_dir(args, cfg)).create()
    rd.write_config(cfg.to_yaml())
    history: list[float] = []
    phi = trainer.pretrain(cfg, history=history)
    path = write_checkpoint(rd.checkpoint_path("pretrained"), {"phi": phi})
    with open(rd.path / "pretrain_loss.csv", "w", encoding="utf-8") as fh:
        fh.write("step,fm_loss\n")
        fh.writelines(f"{i + 1},{v!r}\n" for i, v in enumerate(history))
    steps = np.arange(1, len(history) + 1)
    if history:
        plot_svg({"fm_loss": (steps, history)}, rd.plots / "pretrain_loss.svg", title="pretraining", ylabel="loss")
        plot_png({"fm_loss": (steps, history)}, rd.plots / "pretrain_loss.png", title="pretraining", ylabel="loss")
    reward, _ = trainer.evaluate(phi, phi, cfg, np.random.default_rng([cfg.seed, 1]))
    _emit([{"checkpoint": str(path), "steps": len(history),
            "final_fm_loss": history[-1] if history else float("nan"), "eval_reward": reward}])
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load(args)
    out = _out_dir(args, cfg)
    result = trainer.run(cfg, out, resume=args.resume)
    plot_metrics(read_metrics(result.run_dir.metrics_path), result.run_dir.plots)
    _emit([{"run_dir": str(out), **result.summary}])
    return EXIT_OK


def _eval_models(args):
    models, _, meta = read_checkpoint(Path(args.checkpoint))
    cfg = load_config(args.config) if args.config else _config_next_to(Path(args.checkpoint), args)
    if args.seed is not None:
        cfg.seed = args.seed
    return models, cfg


def _config_next_to(ckpt: Path, args) -> RunConfig:
    snapshot = ckpt.parent.parent / "config.yaml"
    return load_config(snapshot) if snapshot.exists() else builtin_config(args.preset)


def cmd_eval(args) -> int:
    models, cfg = _eval_models(args)
    phi = models["phi"]
    rows = []
    for name in ("theta", "samp", "old", "eval_ema", "phi"):
        if name in models:
            reward, kl = trainer.evaluate(models[name], phi, cfg, np.random.default_rng([cfg.seed, 1]), n=args.n)
            rows.append({"model": name, "mean_reward": reward, "kl_to_phi": kl})
    _emit(rows)
    return EXIT_OK


def cmd_bon(args) -> int:
    if args.checkpoint:
        models, cfg = _eval_models(args)
        params = models[args.model] if args.model in models else models["phi"]
    else:
        cfg = _load(args)
        params = trainer.load_phi(cfg.pretrain.checkpoint) if cfg.pretrain.checkpoint else trainer.pretrain(cfg)
    rewards = cfg.rewards_list()
    sampler = SamplerConfig(cfg.eval.sampler_steps, cfg.eval.cfg_scale)

    def model(n, rng):
        c = np.full(n, rng.integers(cfg.task.n_prompts))
        return ode_sample(params, c, n, sampler, rng=rng), c

    curve = bon_curve(model, lambda c, x: eval_reward(rewards, c, x), args.n_max, args.repeats,
                      np.random.default_rng([cfg.seed, 2]))
    out = _out_dir(args, cfg)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "bon.csv", "w", encoding="utf-8") as fh:
        fh.write("n,best_of_n_reward,mean_reward\n")
        fh.writelines(f"{n},{b!r},{m!r}\n" for n, b, m in curve.rows())
    series = {"best_of_n": (curve.n, curve.best), "mean": (curve.n, curve.mean)}
    plot_svg(series, out / "bon.svg", title="Best-of-N", xlabel="N", ylabel="reward")
    plot_png(series, out / "bon.png", title="Best-of-N", xlabel="N", ylabel="reward")
    _emit([{"n": n, "best_of_n_reward": b, "mean_reward": m} for n, b, m in curve.rows()])
    return EXIT_OK


def cmd_tilt_check(args) -> int:
    results = run_oracle_suite(seed=args.seed or 0)
    _emit([{"check": r.name, "value": f"{r.value:.3e}", "tolerance": f"{r.tolerance:.0e}",
            "status": "PASS" if r.passed else "FAIL"} for r in results])
    return EXIT_OK if all(r.passed for r in results) else EXIT_FAIL


def cmd_plot(args) -> int:
    run = Path(args.run) if args.run else None
    metrics_path = Path(args.metrics) if args.metrics else run / "metrics.csv"
    out = Path(args.out) if args.out else metrics_path.parent / "plots"
    columns = args.columns.split(",") if args.columns else None
    written = plot_metrics(read_metrics(metrics_path), out, columns, png=not args.svg_only)
    _emit([{"file": str(p)} for p in written])
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run config (YAML); defaults to the built-in preset")
    common.add_argument("--preset", default="desk", help="built-in config name (desk, large_group)")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--out", help="output directory (default: $CRDFLOW_RUN_ROOT/<command>_seed<seed>)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="crdflow", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("pretrain", parents=[common], help="flow-matching pretraining of phi")
    tr = sub.add_parser("train", parents=[common], help="pretrain (or load phi) then CRD fine-tune")
    tr.add_argument("--resume", help="checkpoint directory to resume from")
    ev = sub.add_parser("eval", parents=[common], help="evaluate the models in a checkpoint")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("-n", type=int, default=2048, help="samples per model")
    bon = sub.add_parser("bon", parents=[common], help="Best-of-N curve")
    bon.add_argument("--checkpoint")
    bon.add_argument("--model", default="phi", help="model inside the checkpoint")
    bon.add_argument("--n-max", type=int, default=32)
    bon.add_argument("--repeats", type=int, default=200)
    sub.add_parser("tilt-check", parents=[common], help="closed-form tilting oracle suite")
    pl = sub.add_parser("plot", parents=[common], help="render metrics to SVG/PNG")
    pl.add_argument("--run", help="run directory")
    pl.add_argument("--metrics", help="metrics CSV (default: <run>/metrics.csv)")
    pl.add_argument("--columns", help="comma-separated metric columns for a single chart")
    pl.add_argument("--svg-only", action="store_true")
    return p


COMMANDS = {
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "eval": cmd_eval,
    "bon": cmd_bon,
    "tilt-check": cmd_tilt_check,
    "plot": cmd_plot,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if args.command == "plot" and not (args.run or args.metrics):
        print("plot: give --run or --metrics", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except trainer.NumericAbort as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
