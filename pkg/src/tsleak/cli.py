"""Command-line drivers for the gradient-leakage laboratory.

Pipeline order matches the subcommands: `data prepare` -> `model init` ->
`capture` -> (`finv train` / `lti train`) -> `attack` -> `eval` / `plot`,
with `grid run` wrapping whole sweeps.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import attacks, data, federation, grid, inversion, metrics, models, plots


def _add_data_prepare(sub: argparse._SubParsersAction) -> None:
    p = sub.add_parser("prepare", help="ingest a CSV or synthesize a series, window and split it")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--input", help="CSV file with a header and one value column")
    src.add_argument("--synthetic", action="store_true", help="generate a periodic series")
    p.add_argument("--column", help="value column name for CSV input")
    p.add_argument("--h", type=int, required=True, help="observation length")
    p.add_argument("--f", type=int, required=True, help="forecast length")
    p.add_argument("--step-attack", type=int, default=None, help="stride for attacked windows")
    p.add_argument("--step-aux", type=int, default=None, help="stride for auxiliary windows")
    p.add_argument("--period", type=int, default=24, help="cycle length in steps")
    p.add_argument("--length", type=int, default=None, help="synthetic series length")
    p.add_argument("--noise-std", type=float, default=0.0, help="synthetic noise level")
    p.add_argument("--trend-slope", type=float, default=0.0, help="synthetic linear trend")
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--out", required=True, help="output dataset directory")


def _add_model_init(sub: argparse._SubParsersAction) -> None:
    p = sub.add_parser("init", help="initialize a forecasting model checkpoint")
    p.add_argument("--arch", required=True, choices=models.ARCHITECTURES)
    p.add_argument("--h", type=int, required=True)
    p.add_argument("--f", type=int, required=True)
    p.add_argument("--hidden", type=int, default=64)
    p.add_argument("--dropout-rate", type=float, default=0.2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="checkpoint path (JSON + .bin)")


def _add_capture(sub: argparse._SubParsersAction) -> None:
    p = sub.add_parser("capture", help="simulate one client round and record its gradient")
    p.add_argument("--model", required=True, help="model checkpoint")
    p.add_argument("--data", required=True, help="prepared dataset directory")
    p.add_argument("--batch-size", type=int, default=1)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--defense", default="none", choices=federation.DEFENSE_KINDS)
    p.add_argument("--noise-std", type=float, default=0.1)
    p.add_argument("--prune-ratio", type=float, default=0.9)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="capture path (JSON + blobs)")


def _add_net_train(sub: argparse._SubParsersAction, kind: str, default_epochs: int) -> None:
    p = sub.add_parser("train", help=f"train the {kind} inversion net on auxiliary captures")
    p.add_argument("--aux", required=True, help="prepared dataset directory (val split is used)")
    p.add_argument("--model", required=True, help="model checkpoint the captures come from")
    p.add_argument("--epochs", type=int, default=default_epochs)
    p.add_argument("--captures", type=int, default=128, help="training captures to generate")
    p.add_argument("--batch-size", type=int, default=1, help="batch size of the target captures")
    if kind == "quantile":
        p.add_argument("--quantiles", default="0.1,0.3,0.7,0.9")
    p.add_argument("--defense", default="none", choices=federation.DEFENSE_KINDS)
    p.add_argument("--noise-std", type=float, default=0.1)
    p.add_argument("--prune-ratio", type=float, default=0.9)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="net checkpoint path")


def _add_attack(sub: argparse._SubParsersAction) -> None:
    p = sub.add_parser("attack", help="reconstruct the client batch from a capture")
    p.add_argument("--capture", required=True)
    p.add_argument("--model", required=True, help="model checkpoint")
    p.add_argument("--method", required=True, choices=attacks.METHODS)
    p.add_argument("--steps", type=int, default=5000)
    p.add_argument("--lp", type=float, default=0.0, help="periodicity weight")
    p.add_argument("--lt", type=float, default=0.0, help="trend weight")
    p.add_argument("--lq-obs", type=float, default=0.0, help="observation bound weight")
    p.add_argument("--lq-tar", type=float, default=0.0, help="target bound weight")
    p.add_argument("--ltv-obs", type=float, default=None, help="observation TV weight")
    p.add_argument("--ltv-tar", type=float, default=None, help="target TV weight")
    p.add_argument("--period", type=int, default=1)
    p.add_argument("--bounds", help="quantile net checkpoint for bound regularization")
    p.add_argument("--net", help="direct net checkpoint (method lti)")
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--no-clamp", action="store_true", help="do not project iterates to [0,1]")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="result path (JSON + .bin)")


def _add_eval(sub: argparse._SubParsersAction) -> None:
    p = sub.add_parser("eval", help="score a result against the capture's hidden truth")
    p.add_argument("--result", required=True)
    p.add_argument("--capture", required=True)
    p.add_argument("--out", required=True, help="metrics JSON path")


def _add_grid_run(sub: argparse._SubParsersAction) -> None:
    p = sub.add_parser("run", help="run a JSON-configured experiment grid")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=None, help="grid directory (defaults next to the config)")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--plots", action="store_true", help="emit reconstruction figures per cell")


def _add_plot(sub: argparse._SubParsersAction) -> None:
    p = sub.add_parser("plot", help="render reconstruction figures for a result")
    p.add_argument("--result", required=True)
    p.add_argument("--capture", help="overlay ground truth from this capture")
    p.add_argument("--bounds", help="quantile net checkpoint to shade bands")
    p.add_argument("--out", required=True, help="output directory for SVG files")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tsleak", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    data_p = sub.add_parser("data", help="dataset preparation")
    _add_data_prepare(data_p.add_subparsers(dest="subcommand", required=True))

    model_p = sub.add_parser("model", help="forecasting models")
    _add_model_init(model_p.add_subparsers(dest="subcommand", required=True))

    _add_capture(sub)

    finv_p = sub.add_parser("finv", help="quantile-bounds inversion net")
    _add_net_train(finv_p.add_subparsers(dest="subcommand", required=True), "quantile", 75)

    lti_p = sub.add_parser("lti", help="direct gradient-to-sample net")
    _add_net_train(lti_p.add_subparsers(dest="subcommand", required=True), "direct", 250)

    _add_attack(sub)
    _add_eval(sub)

    grid_p = sub.add_parser("grid", help="experiment grids")
    _add_grid_run(grid_p.add_subparsers(dest="subcommand", required=True))

    _add_plot(sub)
    return parser


def _defense_from_args(args) -> federation.DefenseSpec:
    if args.defense == "gauss":
        return federation.DefenseSpec("gauss", noise_std=args.noise_std)
    if args.defense == "prune":
        return federation.DefenseSpec("prune", prune_ratio=args.prune_ratio)
    return federation.DefenseSpec(args.defense)


def cmd_data_prepare(args) -> int:
    if args.synthetic:
        series = data.synth_series(
            seed=args.seed,
            length=args.length or max(40 * args.period, 12 * (args.h + args.f)),
            period_steps=args.period,
            trend_slope=args.trend_slope,
            noise_std=args.noise_std,
        )
        period = args.period
    else:
        series = data.load_csv(args.input, column=args.column)
        period = args.period
    spec = data.WindowingSpec(
        h=args.h,
        f=args.f,
        step_attack=args.step_attack or args.h,
        step_aux=args.step_aux or max(1, args.h // 6),
    )
    prep = data.prepare_dataset(series, spec, period_steps=period)
    out = data.save_prepared(prep, args.out)
    counts = {k: len(v) for k, v in prep.split.items()}
    print(f"prepared {len(prep.windows)} windows ({counts}) + {len(prep.aux_windows)} aux -> {out}")
    return 0


def cmd_model_init(args) -> int:
    spec = models.ModelSpec(
        architecture=args.arch,
        h=args.h,
        f=args.f,
        hidden=args.hidden,
        dropout_rate=args.dropout_rate,
        init_seed=args.seed,
    )
    params = models.init_params(spec)
    ref = models.save_checkpoint(spec, params, args.out)
    print(f"initialized {args.arch} (m={params.m}) -> {args.out} [ref {ref}]")
    return 0


def cmd_capture(args) -> int:
    spec, params, ref = models.load_checkpoint(args.model)
    model = models.build_model(spec)
    prep = data.load_prepared(args.data)
    windows = prep.windows_of(args.split)
    if not windows:
        raise SystemExit(f"split {args.split!r} is empty")
    rng = np.random.default_rng([args.seed, 17])
    idx = rng.choice(len(windows), size=args.batch_size, replace=len(windows) < args.batch_size)
    batch = data.stack_batch([windows[i] for i in idx])
    capture = federation.client_gradient(model, params, batch, seed=args.seed, model_ref=ref)
    defense = _defense_from_args(args)
    if defense.kind != "none":
        capture = federation.apply_defense(capture, defense)
    federation.save_capture(capture, args.out)
    print(
        f"captured gradient m={capture.m} B={capture.batch_size} defense={defense.kind} -> {args.out}"
    )
    return 0


def _cmd_net_train(args, kind: str) -> int:
    spec, params, ref = models.load_checkpoint(args.model)
    model = models.build_model(spec)
    prep = data.load_prepared(args.aux)
    defense = _defense_from_args(args)
    kwargs = dict(
        target_batch_size=args.batch_size,
        defense=defense if defense.kind != "none" else None,
        epochs=args.epochs,
        n_captures=args.captures,
        model_ref=ref,
    )
    if kind == "quantile":
        levels = tuple(float(x) for x in args.quantiles.split(","))
        net, losses = inversion.train_quantile_net(
            prep.aux_windows, model, params, seed=args.seed, levels=levels, **kwargs
        )
    else:
        net, losses = inversion.train_direct_net(
            prep.aux_windows, model, params, seed=args.seed, **kwargs
        )
    net.save(args.out)
    print(f"trained {kind} net: loss {losses[0]:.4g} -> {losses[-1]:.4g} over {args.epochs} epochs")
    return 0


def cmd_attack(args) -> int:
    spec, params, _ = models.load_checkpoint(args.model)
    model = models.build_model(spec)
    capture = federation.load_capture(args.capture)  # attack view: no truth

    if args.method == "lti":
        if not args.net:
            raise SystemExit("--net is required for the lti method")
        net = inversion.InvNet.load(args.net)
        recon_obs, recon_tar = inversion.reconstruct_direct(net, capture)
        result = attacks.AttackResult(
            recon_obs=recon_obs,
            recon_tar=recon_tar,
            loss_trace=[],
            distance_trace=[],
            wall_time=0.0,
            config=attacks.AttackConfig(steps=1, seed=args.seed),
            best_step=0,
            best_loss=float("nan"),
        )
        result.save(args.out)
        print(f"direct net reconstruction -> {args.out}")
        return 0

    bounds = None
    if args.bounds:
        net = inversion.InvNet.load(args.bounds)
        bounds = inversion.predict_bounds(net, capture)
    overrides: dict = {
        "seed": args.seed,
        "steps": args.steps,
        "lambda_periodicity": args.lp,
        "lambda_trend": args.lt,
        "lambda_q_obs": args.lq_obs,
        "lambda_q_tar": args.lq_tar,
        "period": args.period,
        "clamp01": not args.no_clamp,
    }
    if args.ltv_obs is not None:
        overrides["lambda_tv_obs"] = args.ltv_obs
    if args.ltv_tar is not None:
        overrides["lambda_tv_tar"] = args.ltv_tar
    if args.lr is not None:
        overrides["learning_rate"] = args.lr
    if bounds is not None:
        overrides["bounds"] = bounds
    config = attacks.config_for_method(args.method, model, **overrides)
    result = attacks.run_attack(capture, model, params, config)
    result.save(args.out)
    print(
        f"attack {args.method}: best loss {result.best_loss:.4g} at step {result.best_step} "
        f"({result.wall_time:.1f}s) -> {args.out}"
    )
    return 0


def cmd_eval(args) -> int:
    result = attacks.AttackResult.load(args.result)
    capture = federation.load_capture(args.capture, include_truth=True)
    if capture.true_batch is None:
        raise SystemExit("capture carries no ground truth to evaluate against")
    true_obs, true_tar = capture.true_batch
    report = metrics.match_batch(result.recon_obs, result.recon_tar, true_obs, true_tar)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(json.dumps(report.to_dict(), indent=2))
    print(
        f"sMAPE obs {report.smape_obs:.4g} tar {report.smape_tar:.4g} "
        f"(matching {report.matching}) -> {args.out}"
    )
    return 0


def cmd_grid_run(args) -> int:
    config = json.loads(Path(args.config).read_text())
    out = args.out or str(Path(args.config).with_suffix("")) + "_grid"
    grid.run_grid(config, out, workers=args.workers, emit_plots=args.plots)
    return 0


def cmd_plot(args) -> int:
    result = attacks.AttackResult.load(args.result)
    true_obs = true_tar = None
    if args.capture:
        capture = federation.load_capture(args.capture, include_truth=True)
        if capture.true_batch is not None:
            true_obs, true_tar = capture.true_batch
    bounds = None
    if args.bounds and args.capture:
        net = inversion.InvNet.load(args.bounds)
        bounds = inversion.predict_bounds(net, federation.load_capture(args.capture))
    paths = plots.plot_reconstruction(
        result.recon_obs, result.recon_tar, true_obs, true_tar,
        bounds=bounds, out_dir=args.out, prefix="recon",
    )
    trace = plots.plot_loss_trace(result.loss_trace, result.distance_trace, Path(args.out) / "trace.svg") if result.loss_trace else None
    made = [str(p) for p in paths] + ([str(trace)] if trace else [])
    print("wrote " + ", ".join(made))
    return 0


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "data":
        return cmd_data_prepare(args)
    if args.command == "model":
        return cmd_model_init(args)
    if args.command == "capture":
        return cmd_capture(args)
    if args.command == "finv":
        return _cmd_net_train(args, "quantile")
    if args.command == "lti":
        return _cmd_net_train(args, "direct")
    if args.command == "attack":
        return cmd_attack(args)
    if args.command == "eval":
        return cmd_eval(args)
    if args.command == "grid":
        return cmd_grid_run(args)
    if args.command == "plot":
        return cmd_plot(args)
    raise SystemExit(f"unknown command {args.command!r}")  # pragma: no cover


if __name__ == "__main__":
    sys.exit(main())
