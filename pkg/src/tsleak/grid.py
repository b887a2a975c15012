"""Seeded experiment grids over datasets x models x attacks x defenses.

A grid expands to independent cells (one per seed), each of which
prepares its data, captures a client gradient, runs one attack and writes
metrics plus reconstructions into its own directory. Completed cells are
skipped on re-runs via the grid manifest, which only the coordinating
process writes. Aggregation produces one CSV row per configuration with
mean and standard deviation over seeds.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
import tempfile
import traceback
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import attacks, data, federation, inversion, metrics, models, plots

DEFAULT_SEEDS = (10, 43, 28, 80, 71)


class GridError(ValueError):
    pass


@dataclass(frozen=True)
class GridCell:
    dataset: dict
    model: dict
    attack: dict
    defense: dict
    batch_size: int
    seed: int

    @property
    def group_id(self) -> str:
        return "__".join(
            [
                self.dataset["name"],
                _model_label(self.model),
                attack_label(self.attack),
                _defense_label(self.defense),
                f"B{self.batch_size}",
            ]
        )

    @property
    def cell_id(self) -> str:
        return f"{self.group_id}__s{self.seed}"


def _model_label(model_spec: dict) -> str:
    label = model_spec["arch"]
    if model_spec.get("hidden", 64) != 64:
        label += f"-h{model_spec['hidden']}"
    return label


def _defense_label(defense: dict) -> str:
    kind = defense.get("kind", "none")
    if kind == "gauss":
        return f"gauss{defense['noise_std']:g}"
    if kind == "prune":
        return f"prune{defense['prune_ratio']:g}"
    return kind


def attack_label(attack_spec: dict) -> str:
    if "name" in attack_spec:
        return attack_spec["name"]
    label = attack_spec["method"]
    extras = {k: v for k, v in attack_spec.items() if k not in ("method", "name") and v}
    if extras:
        digest = hashlib.sha256(json.dumps(extras, sort_keys=True).encode()).hexdigest()[:6]
        label += f"-{digest}"
    return label


def expand_grid(config: dict) -> list[GridCell]:
    datasets = config.get("datasets")
    if not datasets:
        raise GridError("grid config needs a non-empty 'datasets' list")
    for ds in datasets:
        if "name" not in ds:
            raise GridError("every dataset needs a 'name'")
    seeds = config.get("seeds", list(DEFAULT_SEEDS))
    cells = [
        GridCell(
            dataset=ds,
            model=mdl,
            attack=att,
            defense=dfn,
            batch_size=int(b),
            seed=int(seed),
        )
        for ds in datasets
        for mdl in config.get("models", [{"arch": "fcn"}])
        for att in config.get("attacks", [{"method": "ts-inverse"}])
        for dfn in config.get("defenses", [{"kind": "none"}])
        for b in config.get("batch_sizes", [1])
        for seed in seeds
    ]
    return cells


# -- per-cell building blocks -------------------------------------------------


def _prepare_dataset(ds: dict, h: int, f: int) -> data.PreparedData:
    if "prepared" in ds:
        return data.load_prepared(ds["prepared"])
    if "csv" in ds:
        series = data.load_csv(ds["csv"], column=ds.get("column"))
        period = ds.get("period")
    else:
        syn = ds.get("synthetic", {})
        period = syn.get("period", 24)
        series = data.synth_series(
            seed=syn.get("seed", 1),
            length=syn.get("length", max(40 * period, 12 * (h + f))),
            period_steps=period,
            trend_slope=syn.get("trend_slope", 0.0),
            noise_std=syn.get("noise_std", 0.0),
            name=ds["name"],
        )
    spec = data.WindowingSpec(
        h=h,
        f=f,
        step_attack=ds.get("step_attack", h),
        step_aux=ds.get("step_aux", max(1, h // 6)),
    )
    return data.prepare_dataset(series, spec, period_steps=period)


def _build_model(model_spec: dict, h: int, f: int) -> tuple[models.Model, models.ParamVector, str]:
    spec = models.ModelSpec(
        architecture=model_spec["arch"],
        h=h,
        f=f,
        hidden=model_spec.get("hidden", 64),
        dropout_rate=model_spec.get("dropout_rate", 0.2),
        init_seed=model_spec.get("init_seed", 0),
    )
    params = models.init_params(spec)
    ref = hashlib.sha256(params.flatten().tobytes()).hexdigest()[:16]
    return models.build_model(spec), params, ref


def _capture_for_cell(
    cell: GridCell, prep: data.PreparedData, model: models.Model,
    params: models.ParamVector, model_ref: str,
) -> federation.GradientCapture:
    test_windows = prep.windows_of("test")
    if not test_windows:
        raise GridError(f"dataset {cell.dataset['name']} has no test windows")
    rng = np.random.default_rng([cell.seed, 17])
    replace = len(test_windows) < cell.batch_size
    idx = rng.choice(len(test_windows), size=cell.batch_size, replace=replace)
    batch = data.stack_batch([test_windows[i] for i in idx])
    capture = federation.client_gradient(model, params, batch, seed=cell.seed, model_ref=model_ref)
    spec = federation.DefenseSpec.from_dict(cell.defense or None)
    if spec.kind != "none":
        capture = federation.apply_defense(capture, spec)
    return capture


def _net_cache_path(nets_dir: Path, kind: str, cell: GridCell, model_ref: str) -> Path:
    key = json.dumps(
        {
            "kind": kind,
            "dataset": cell.dataset,
            "model_ref": model_ref,
            "defense": cell.defense,
            "batch": cell.batch_size,
            "seed": cell.seed,
        },
        sort_keys=True,
    )
    return nets_dir / f"{kind}-{hashlib.sha256(key.encode()).hexdigest()[:16]}"


def _train_or_load_net(
    kind: str,
    nets_dir: Path,
    cell: GridCell,
    prep: data.PreparedData,
    model: models.Model,
    params: models.ParamVector,
    model_ref: str,
) -> inversion.InvNet:
    path = _net_cache_path(nets_dir, kind, cell, model_ref)
    if path.exists():
        return inversion.InvNet.load(path)
    defense = federation.DefenseSpec.from_dict(cell.defense or None)
    trainer = inversion.train_quantile_net if kind == "quantile" else inversion.train_direct_net
    kwargs = dict(
        target_batch_size=cell.batch_size,
        defense=defense if defense.kind != "none" else None,
        model_ref=model_ref,
    )
    att = cell.attack
    if att.get("net_epochs"):
        kwargs["epochs"] = int(att["net_epochs"])
    if att.get("net_captures"):
        kwargs["n_captures"] = int(att["net_captures"])
    net, _ = trainer(prep.aux_windows, model, params, seed=cell.seed, **kwargs)
    nets_dir.mkdir(parents=True, exist_ok=True)
    with tempfile.TemporaryDirectory(dir=nets_dir) as tmp:
        tmp_base = Path(tmp) / "net"
        net.save(tmp_base)
        os.replace(str(tmp_base) + ".bin", str(path) + ".bin")
        os.replace(tmp_base, path)
    return net


def _attack_config_from_spec(
    att: dict, model: models.Model, seed: int, period: int,
    bounds: inversion.QuantileBounds | None,
) -> attacks.AttackConfig:
    overrides: dict = {"seed": seed}
    if att.get("steps"):
        overrides["steps"] = int(att["steps"])
    for key, field in (
        ("ltv_obs", "lambda_tv_obs"),
        ("ltv_tar", "lambda_tv_tar"),
        ("lp", "lambda_periodicity"),
        ("lt", "lambda_trend"),
        ("lq_obs", "lambda_q_obs"),
        ("lq_tar", "lambda_q_tar"),
        ("lr", "learning_rate"),
        ("distance", "distance"),
        ("optimizer", "optimizer"),
        ("init", "init"),
        ("clamp01", "clamp01"),
    ):
        if key in att:
            overrides[field] = att[key]
    overrides["period"] = int(att.get("period") or period or 1)
    if bounds is not None:
        overrides["bounds"] = bounds
    return attacks.config_for_method(att["method"], model, **overrides)


def run_cell(cell_dict: dict, grid_dir: str, h: int, f: int, emit_plots: bool = False) -> dict:
    """Execute one grid cell; returns the row dict written to its directory."""
    cell = GridCell(**cell_dict)
    grid_path = Path(grid_dir)
    cell_dir = grid_path / "cells" / cell.cell_id
    cell_dir.mkdir(parents=True, exist_ok=True)

    prep = _prepare_dataset(cell.dataset, h, f)
    model, params, model_ref = _build_model(cell.model, h, f)
    capture = _capture_for_cell(cell, prep, model, params, model_ref)
    true_obs, true_tar = capture.true_batch
    period = cell.attack.get("period") or prep.period_steps or 1

    method = cell.attack["method"]
    one_shot_used = False
    if method == "lti":
        net = _train_or_load_net("direct", grid_path / "nets", cell, prep, model, params, model_ref)
        recon_obs, recon_tar = inversion.reconstruct_direct(net, capture)
        result = None
    else:
        bounds = None
        if cell.attack.get("lq_obs") or cell.attack.get("lq_tar"):
            net = _train_or_load_net(
                "quantile", grid_path / "nets", cell, prep, model, params, model_ref
            )
            bounds = inversion.predict_bounds(net, capture)
        config = _attack_config_from_spec(cell.attack, model, cell.seed, period, bounds)
        result = attacks.run_attack(capture, model, params, config)
        recon_obs, recon_tar = result.recon_obs, result.recon_tar
        result.save(cell_dir / "result")
        one_shot_used = result.one_shot_used

    report = metrics.match_batch(recon_obs, recon_tar, true_obs, true_tar)
    row = {
        "dataset": cell.dataset["name"],
        "model": _model_label(cell.model),
        "attack": attack_label(cell.attack),
        "defense": _defense_label(cell.defense),
        "batch_size": cell.batch_size,
        "seed": cell.seed,
        "one_shot_used": one_shot_used,
        **report.to_dict(),
    }
    row.pop("per_sample")
    (cell_dir / "metrics.json").write_text(json.dumps(report.to_dict(), indent=2))
    (cell_dir / "row.json").write_text(json.dumps(row, indent=2))
    blob = np.concatenate([recon_obs.reshape(-1), recon_tar.reshape(-1)])
    (cell_dir / "recon.bin").write_bytes(blob.astype("<f8").tobytes())
    if emit_plots:
        plots.plot_reconstruction(
            recon_obs, recon_tar, true_obs, true_tar,
            out_dir=cell_dir, prefix="recon", title=cell.cell_id,
        )
    return row


# -- orchestration -------------------------------------------------------------


def _load_manifest(path: Path) -> dict:
    if path.exists():
        return json.loads(path.read_text())
    return {"cells": {}}


def run_grid(
    config: dict,
    grid_dir: str | Path,
    workers: int = 1,
    emit_plots: bool = False,
    log=print,
) -> Path:
    """Run every incomplete cell, then aggregate into grid_results.csv."""
    grid_path = Path(grid_dir)
    grid_path.mkdir(parents=True, exist_ok=True)
    h = int(config.get("h", 24))
    f = int(config.get("f", 24))
    cells = expand_grid(config)
    manifest_path = grid_path / "manifest.json"
    manifest = _load_manifest(manifest_path)

    pending = [c for c in cells if manifest["cells"].get(c.cell_id) != "done"]
    log(f"grid: {len(cells)} cells, {len(pending)} to run, workers={workers}")

    rows: list[dict] = []
    for c in cells:
        row_file = grid_path / "cells" / c.cell_id / "row.json"
        if manifest["cells"].get(c.cell_id) == "done" and row_file.exists():
            rows.append(json.loads(row_file.read_text()))

    def record(cell: GridCell, status: str) -> None:
        manifest["cells"][cell.cell_id] = status
        manifest_path.write_text(json.dumps(manifest, indent=2))

    if workers <= 1:
        for cell in pending:
            try:
                row = run_cell(cell.__dict__, str(grid_path), h, f, emit_plots)
                rows.append(row)
                record(cell, "done")
                log(f"  done {cell.cell_id}: obs={row['smape_obs']:.4g} tar={row['smape_tar']:.4g}")
            except Exception as exc:  # cell failures are recorded, not fatal
                record(cell, f"failed: {exc}")
                log(f"  FAILED {cell.cell_id}: {exc}")
                traceback.print_exc()
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = {
                pool.submit(run_cell, cell.__dict__, str(grid_path), h, f, emit_plots): cell
                for cell in pending
            }
            for fut in as_completed(futures):
                cell = futures[fut]
                try:
                    row = fut.result()
                    rows.append(row)
                    record(cell, "done")
                    log(f"  done {cell.cell_id}")
                except Exception as exc:
                    record(cell, f"failed: {exc}")
                    log(f"  FAILED {cell.cell_id}: {exc}")

    out_csv = grid_path / "grid_results.csv"
    aggregate_rows(rows, out_csv)
    log(f"grid: wrote {out_csv}")
    return out_csv


def aggregate_rows(rows: list[dict], out_csv: Path) -> None:
    """One CSV row per configuration: mean and std over seeds."""
    groups: dict[tuple, list[dict]] = {}
    for row in rows:
        key = (row["dataset"], row["model"], row["attack"], row["defense"], row["batch_size"])
        groups.setdefault(key, []).append(row)
    fields = [
        "dataset", "model", "attack", "defense", "batch_size", "n_seeds",
        "smape_obs_mean", "smape_obs_std", "smape_tar_mean", "smape_tar_std",
        "mae_obs_mean", "mae_tar_mean", "mse_obs_mean", "mse_tar_mean",
        "identity_smape_obs_mean", "identity_smape_tar_mean",
    ]
    out_csv.parent.mkdir(parents=True, exist_ok=True)
    with out_csv.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for key in sorted(groups):
            rs = groups[key]
            agg = {
                "dataset": key[0],
                "model": key[1],
                "attack": key[2],
                "defense": key[3],
                "batch_size": key[4],
                "n_seeds": len(rs),
            }
            for metric in ("smape_obs", "smape_tar"):
                vals = np.array([r[metric] for r in rs])
                agg[f"{metric}_mean"] = float(vals.mean())
                agg[f"{metric}_std"] = float(vals.std())
            for metric in (
                "mae_obs", "mae_tar", "mse_obs", "mse_tar",
                "identity_smape_obs", "identity_smape_tar",
            ):
                agg[f"{metric}_mean"] = float(np.mean([r[metric] for r in rs]))
            writer.writerow(agg)
