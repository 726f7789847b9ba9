"""Command-line entry point: ``kwtse <subcommand> ...``.

Every subcommand accepts ``--seed``, ``--deterministic`` and ``--out-dir`` and
writes ``manifest-<subcommand>.json`` into the output directory.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import platform
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .ensemble import Ensemble, ensemble_predict, load_ensemble, predict_kmph, reconstruct
from .evaluation import export_field, rmse_by_regime
from .grid import SpaceTimeGrid, read_trajectories_csv, write_trajectories_csv
from .groundtruth import InterpolationParams
from .masks import WaveParams, build_anisotropic_mask, build_isotropic_mask
from .microsim import load_sim_config, record_section, regime_scenario, run_simulation
from .nn.model import build_model, count_params
from .nn.serialize import load_model, save_model
from .probes import DEFAULT_V_SCALE, encode_input
from .training import (Frame, TrainConfig, build_dataset, load_dataset, save_dataset,
                       simulate_frame, train, write_history_csv)

log = logging.getLogger("kwtse")


class CliError(ValueError):
    """Invalid command-line usage or configuration."""


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _read_json(path: str | None) -> tuple[dict, bytes]:
    if path is None:
        return {}, b""
    raw = Path(path).read_bytes()
    try:
        return json.loads(raw), raw
    except json.JSONDecodeError as exc:
        raise CliError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from exc


def _parse_size(text: str) -> tuple[int, int]:
    try:
        a, b = text.lower().split("x")
        return int(a), int(b)
    except ValueError as exc:
        raise CliError(f"expected a size like 80x60, got {text!r}") from exc


def _waves(args) -> WaveParams:
    return WaveParams(args.c_v_max, args.c_v_min, args.c_w)


def _out(args, name: str | None, default: str) -> Path:
    path = Path(name) if name else Path(default)
    if not path.is_absolute():
        path = Path(args.out_dir) / path
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _write_manifest(args, config_bytes: bytes, outputs: list[Path], extra: dict | None = None) -> Path:
    settings = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    h = hashlib.sha256(config_bytes + json.dumps(settings, sort_keys=True, default=str).encode())
    manifest = {
        "command": args.command,
        "config_hash": h.hexdigest(),
        "seed": args.seed,
        "deterministic": args.deterministic,
        "arguments": settings,
        "versions": {"kwtse": __version__, "numpy": np.__version__, "python": platform.python_version()},
        "outputs": [str(p) for p in outputs],
    }
    if extra:
        manifest.update(extra)
    path = Path(args.out_dir) / f"manifest-{args.command}.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_simulate(args) -> int:
    cfg, raw = _read_json(args.config)
    if "scenario" in cfg:
        scenario, drivers, cfg = load_sim_config(args.config)
    else:
        regime = cfg.get("regime", args.regime)
        scenario = regime_scenario(regime, float(cfg.get("duration", args.duration)), args.seed)
        drivers = None
    length = float(cfg.get("section_length", 2000.0))
    result = run_simulation(scenario, length, drivers)
    trajs = result.trajectories
    rec = cfg.get("record")
    if rec:
        trajs = record_section(trajs, float(rec["x_start"]), float(rec["x_end"]))
    out = _out(args, args.out, "trajectories.csv")
    write_trajectories_csv(trajs, out)
    _write_manifest(args, raw, [out], {"vehicles": len(trajs),
                                       "dropped": [result.dropped_mainline, result.dropped_ramp]})
    print(f"wrote {len(trajs)} trajectories to {out}")
    return 0


def _frame_from_entry(entry: dict, seed: int) -> Frame:
    if "csv" in entry:
        g = entry["grid"]
        grid = SpaceTimeGrid(float(g.get("x0", 0.0)), float(g.get("t0", 0.0)), float(g.get("dx", 10.0)),
                             float(g.get("dt", 1.0)), int(g["nx"]), int(g["nt"]))
        return Frame(read_trajectories_csv(entry["csv"]), grid, entry["regime"])
    kw = {k: entry[k] for k in ("duration", "warmup") if k in entry}
    return simulate_frame(entry["regime"], int(entry.get("seed", seed)), **kw)


def cmd_build_dataset(args) -> int:
    cfg, raw = _read_json(args.config)
    if "frames" not in cfg or "penetration_rates" not in cfg:
        raise CliError("dataset config needs 'frames' and 'penetration_rates'")
    frames = [_frame_from_entry(e, args.seed + k) for k, e in enumerate(cfg["frames"])]
    data = build_dataset(frames, [float(r) for r in cfg["penetration_rates"]],
                         window=tuple(cfg.get("window", (80, 60))), stride_t=int(cfg.get("stride_t", 2)),
                         seeds=[int(s) for s in cfg.get("seeds", [args.seed])], shuffle_seed=args.seed,
                         v_scale=float(cfg.get("v_scale", DEFAULT_V_SCALE)),
                         interp=InterpolationParams(**cfg.get("interpolation", {})))
    out = _out(args, args.out, "dataset.npz")
    save_dataset(data, out, {"config": cfg, "seed": args.seed})
    _write_manifest(args, raw, [out], {"samples": len(data)})
    print(f"wrote {len(data)} samples to {out}")
    return 0


def cmd_train(args) -> int:
    cfg, raw = _read_json(args.config)
    model_cfg = cfg.pop("model", {})
    cfg.setdefault("seed", args.seed)
    config = TrainConfig.from_dict(cfg)
    data = load_dataset(args.data)
    waves = WaveParams(**model_cfg["waves"]) if "waves" in model_cfg else None
    model = build_model(model_cfg.get("kind", args.kind), seed=config.seed, waves=waves,
                        dx=data.dx, dt=data.dt, v_scale=config.v_scale)
    model, hist = train(model, data, config)
    out = _out(args, args.out, "model.npz")
    save_model(model, out)
    hist_path = out.with_name(out.stem + "-history.csv")
    write_history_csv(hist, hist_path)
    _write_manifest(args, raw, [out, hist_path], {"parameters": count_params(model)})
    last = hist.val_rmse_kmph[-1] if len(hist) else float("nan")
    print(f"trained {model.kind} model ({count_params(model)} parameters), "
          f"final val RMSE {last:.3f} kmph -> {out}")
    return 0


def _predictor(args):
    if bool(args.model) == bool(args.ensemble):
        raise CliError("give exactly one of --model or --ensemble")
    return load_model(args.model) if args.model else load_ensemble(args.ensemble)


def cmd_reconstruct(args) -> int:
    predictor = _predictor(args)
    nx, nt = _parse_size(args.grid)
    grid = SpaceTimeGrid(args.x0, args.t0, args.dx, args.dt, nx, nt)
    v_scale = predictor.models[0].v_scale if isinstance(predictor, Ensemble) else predictor.v_scale
    tensor = encode_input(read_trajectories_csv(args.probes), grid, v_scale)
    field = reconstruct(predictor, tensor)
    csv_path = export_field(field, _out(args, None, f"{args.name}.csv"))
    img_path = export_field(field, _out(args, None, f"{args.name}.ppm"))
    _write_manifest(args, b"", [csv_path, img_path])
    print(f"wrote {csv_path} and {img_path}")
    return 0


def _predict_dataset(predictor, data) -> np.ndarray:
    outs = []
    for s in range(0, len(data), 64):
        x = data.scaled_inputs(np.arange(s, min(s + 64, len(data))))
        if isinstance(predictor, Ensemble):
            outs.append(ensemble_predict(predictor, x))
        else:
            outs.append(predict_kmph(predictor, x))
    return np.concatenate(outs)


def _write_table(rows: list[list], header: list[str], path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def cmd_evaluate(args) -> int:
    predictor = _predictor(args)
    data = load_dataset(args.data)
    table = rmse_by_regime(_predict_dataset(predictor, data), data.targets, data.regimes)
    out = _out(args, args.out, "evaluation.csv")
    _write_table([[r.regime, r.mean_rmse, r.std_rmse, r.n] for r in table],
                 ["regime", "mean_rmse_kmph", "std_rmse_kmph", "n"], out)
    for r in table:
        print(f"{r.regime:10s} {r.mean_rmse:8.3f} +- {r.std_rmse:.3f} kmph (n={r.n})")
    _write_manifest(args, b"", [out])
    return 0


def cmd_mask_info(args) -> int:
    k_h, k_w = _parse_size(args.size)
    k_h = args.kh if args.kh is not None else k_h
    k_w = args.kw if args.kw is not None else k_w
    waves = _waves(args)
    mask = (build_isotropic_mask(k_h, k_w) if args.kind == "isotropic"
            else build_anisotropic_mask(k_h, k_w, waves, args.dx, args.dt))
    print(mask.to_text())
    print(f"cells: {mask.cardinality} of {k_h * k_w}")
    iso = count_params(build_model("isotropic"))
    ani = count_params(build_model("anisotropic", waves=waves, dx=args.dx, dt=args.dt))
    print(f"model parameters: isotropic {iso}, anisotropic {ani} (ratio {ani / iso:.3f})")
    out = _out(args, args.out, "mask.txt")
    out.write_text(mask.to_text() + "\n")
    _write_manifest(args, b"", [out], {"cardinality": mask.cardinality})
    return 0


def cmd_compare(args) -> int:
    paths = [p for p in args.models.split(",") if p]
    if not paths:
        raise CliError("--models needs at least one model file")
    sets = [p for p in args.testset.split(",") if p]
    rows = []
    for mp in paths:
        model = load_model(mp)
        for dp in sets:
            data = load_dataset(dp)
            for r in rmse_by_regime(_predict_dataset(model, data), data.targets, data.regimes):
                rows.append([Path(mp).name, model.kind, count_params(model), Path(dp).name,
                             r.regime, r.mean_rmse, r.std_rmse, r.n])
    out = _out(args, args.out, "comparison.csv")
    _write_table(rows, ["model", "kind", "parameters", "testset", "regime",
                        "mean_rmse_kmph", "std_rmse_kmph", "n"], out)
    for row in rows:
        print(f"{row[0]:24s} {row[3]:20s} {row[4]:10s} {row[5]:8.3f} kmph")
    _write_manifest(args, b"", [out])
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="root seed for all randomness")
    common.add_argument("--deterministic", action="store_true",
                        help="fixed-order reductions (recorded in the manifest)")
    common.add_argument("--out-dir", default=".", help="directory for outputs and the manifest")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="kwtse", description="Probe-vehicle traffic speed reconstruction")
    p.add_argument("--version", action="version", version=f"kwtse {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="run the car-following simulator")
    s.add_argument("--config", help="JSON with 'scenario' (+ 'drivers') or a 'regime' preset")
    s.add_argument("--regime", default="congested", choices=["free", "slow", "congested"])
    s.add_argument("--duration", type=float, default=1800.0)
    s.add_argument("--out", help="trajectory CSV (default trajectories.csv)")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("build-dataset", parents=[common], help="slice frames into window samples")
    s.add_argument("--config", required=True)
    s.add_argument("--out", help="dataset cache (default dataset.npz)")
    s.set_defaults(func=cmd_build_dataset)

    s = sub.add_parser("train", parents=[common], help="train a model on a dataset cache")
    s.add_argument("--config", help="training JSON (TrainConfig fields, optional 'model')")
    s.add_argument("--data", required=True)
    s.add_argument("--kind", default="anisotropic", choices=["isotropic", "anisotropic"])
    s.add_argument("--out", help="model file (default model.npz)")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("reconstruct", parents=[common], help="estimate a speed field from probe CSV")
    s.add_argument("--model")
    s.add_argument("--ensemble")
    s.add_argument("--probes", required=True)
    s.add_argument("--grid", default="80x60", help="cells as NXxNT")
    s.add_argument("--x0", type=float, default=0.0)
    s.add_argument("--t0", type=float, default=0.0)
    s.add_argument("--dx", type=float, default=10.0)
    s.add_argument("--dt", type=float, default=1.0)
    s.add_argument("--name", default="field", help="output file stem")
    s.set_defaults(func=cmd_reconstruct)

    s = sub.add_parser("evaluate", parents=[common], help="regime-wise RMSE on a dataset cache")
    s.add_argument("--model")
    s.add_argument("--ensemble")
    s.add_argument("--data", required=True)
    s.add_argument("--out", help="table CSV (default evaluation.csv)")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("mask-info", parents=[common], help="print a kernel mask and parameter counts")
    s.add_argument("--size", default="7x7", help="kernel as KHxKW")
    s.add_argument("--kh", type=int, help="kernel height (overrides --size)")
    s.add_argument("--kw", type=int, help="kernel width (overrides --size)")
    s.add_argument("--kind", default="anisotropic", choices=["isotropic", "anisotropic"])
    s.add_argument("--c-v-max", "--cvmax", dest="c_v_max", type=float, default=100.0)
    s.add_argument("--c-v-min", "--cvmin", dest="c_v_min", type=float, default=60.0)
    s.add_argument("--c-w", "--cw", dest="c_w", type=float, default=18.0)
    s.add_argument("--dx", type=float, default=10.0)
    s.add_argument("--dt", type=float, default=1.0)
    s.add_argument("--out", help="mask text file (default mask.txt)")
    s.set_defaults(func=cmd_mask_info)

    s = sub.add_parser("compare", parents=[common], help="regime x model RMSE table")
    s.add_argument("--models", required=True, help="comma-separated model files")
    s.add_argument("--testset", required=True, help="comma-separated dataset caches")
    s.add_argument("--out", help="table CSV (default comparison.csv)")
    s.set_defaults(func=cmd_compare)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, OSError, KeyError, TypeError, RuntimeError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        if isinstance(exc, KeyError):
            msg = f"missing key {exc}"
        print(f"kwtse {args.command}: error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
