"""Command-line interface: train, convert, forecast, verify, energy, eval, plot-data.

Exit codes: 0 success, 1 verification failure, 2 usage or input error.
Config files are flat ``key = value`` text; ``#`` starts a comment.
"""

from __future__ import annotations

import argparse
import sys

import numpy as np

from .activations import (SILU_GRAD_BOUND, SILU_VALUE_BOUND, SOFTPLUS_GRAD_BOUND,
                          SOFTPLUS_VALUE_BOUND, branch_continuity_gaps,
                          verify_deviation_bounds)
from .dataset import denormalize, load_csv, make_windows, write_csv
from .energy import EnergyTable, compare_ann_energy, profile
from .metrics import r2, rrse
from .quantize import Quantizer
from .spike import average_if_encode, decode, encode_quantized
from .ssm import ForecastModel, ModelConfig
from .train import (TrainConfig, apply_threshold_scaling, convert_to_snn,
                    load_checkpoint, save_checkpoint, train)

MODEL_KEYS = {"d_hidden": int, "state_size": int, "conv_kernel": int,
              "delta_rank": int, "blocks": int, "rmsnorm_eps": float,
              "history": int, "horizon": int, "bits": int}
TRAIN_KEYS = {"lr": float, "batch_size": int, "max_epochs": int, "patience": int,
              "beta1": float, "beta2": float, "eps": float, "seed": int}
SPLIT_KEYS = {"split_train": float, "split_val": float, "split_test": float}
ENERGY_KEYS = {"e_acc": float, "e_mac": float, "e_shift": float, "e_cmp": float}
ALL_KEYS = {**MODEL_KEYS, **TRAIN_KEYS, **SPLIT_KEYS, **ENERGY_KEYS}


def parse_kv_file(path: str) -> dict[str, str]:
    out: dict[str, str] = {}
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            s = line.split("#", 1)[0].strip()
            if not s:
                continue
            if "=" not in s:
                raise ValueError(f"{path}:{lineno}: expected 'key = value', got {line.strip()!r}")
            k, v = s.split("=", 1)
            out[k.strip()] = v.strip()
    return out


def load_config(path: str | None) -> dict:
    if path is None:
        return {}
    raw = parse_kv_file(path)
    cfg: dict = {}
    for k, v in raw.items():
        if k not in ALL_KEYS:
            raise ValueError(f"{path}: unknown config key {k!r} (known: {', '.join(sorted(ALL_KEYS))})")
        try:
            cfg[k] = ALL_KEYS[k](v)
        except ValueError:
            raise ValueError(f"{path}: key {k!r} expects {ALL_KEYS[k].__name__}, got {v!r}") from None
    return cfg


def _split_from(cfg: dict) -> tuple[float, float, float]:
    return (cfg.get("split_train", 0.7), cfg.get("split_val", 0.1), cfg.get("split_test", 0.2))


def _predict(model: ForecastModel, x: np.ndarray, batch: int = 256) -> np.ndarray:
    outs = [model.forward(x[i:i + batch]).data for i in range(0, x.shape[0], batch)]
    return np.concatenate(outs, axis=0)


def _norm_from_meta(meta: dict) -> tuple[np.ndarray, np.ndarray]:
    norm = meta.get("norm")
    if not norm:
        raise ValueError("checkpoint carries no normalization statistics; retrain with this version")
    return np.asarray(norm["mean"]), np.asarray(norm["std"])


# --- subcommands -----------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    history = args.history if args.history is not None else cfg.get("history")
    horizon = args.horizon if args.horizon is not None else cfg.get("horizon")
    if history is None or horizon is None:
        raise ValueError("history and horizon must be given (flags or config file)")
    bits = args.bits if args.bits is not None else cfg.get("bits", 2)

    ds = load_csv(args.data, has_header=args.has_header)
    splits = make_windows(ds, history, horizon, _split_from(cfg))
    n_tr, n_va, n_te = splits.counts()
    print(f"windows: {n_tr} train / {n_va} val / {n_te} test "
          f"({ds.values.shape[0]} rows, {ds.values.shape[1]} variables)")

    mc = ModelConfig(d_value=ds.values.shape[1], history=history, horizon=horizon, bits=bits,
                     **{k: cfg[k] for k in ("d_hidden", "state_size", "conv_kernel",
                                            "delta_rank", "blocks", "rmsnorm_eps") if k in cfg})
    tc = TrainConfig(**{k: cfg[k] for k in TRAIN_KEYS if k in cfg})
    model = ForecastModel.build(mc, seed=tc.seed)
    model.calibrate(splits.x_train[:512])

    res = train(model, splits.x_train, splits.y_train, splits.x_val, splits.y_val, tc)
    print(f"trained {res.epochs_run} epochs; best val mse {res.best_val:.6f} at epoch {res.best_epoch}")
    norm = {"mean": splits.mean.tolist(), "std": splits.std.tolist()}
    save_checkpoint(args.out, model, norm=norm,
                    extra={"split": list(_split_from(cfg)), "data": args.data})
    print(f"saved {args.out}")
    return 0


def cmd_convert(args) -> int:
    model, meta = load_checkpoint(args.in_path)
    if model.mode == "snn":
        raise ValueError(f"{args.in_path} is already a converted (snn-mode) checkpoint")
    convert_to_snn(model)
    if args.threshold_scale:
        if args.data is None:
            raise ValueError("--threshold-scale needs --data to observe which sites saturate")
        ds = load_csv(args.data, has_header=args.has_header)
        mean, std = _norm_from_meta(meta)
        splits = make_windows(ds, model.cfg.history, model.cfg.horizon,
                              (1.0, 0.0, 0.0), stats=(mean, std))
        scaled = apply_threshold_scaling(model, splits.x_train[:256])
        if scaled:
            print("threshold-scaled sites: " + ", ".join(scaled))
        else:
            print("no sites were threshold-scaled (none saturate, or verification rolled back)")
    save_checkpoint(args.out, model, norm=meta.get("norm"), extra=meta.get("extra"))
    print(f"saved {args.out}")
    return 0


def cmd_forecast(args) -> int:
    model, meta = load_checkpoint(args.model)
    mean, std = _norm_from_meta(meta)
    ds = load_csv(args.data, has_header=args.has_header)
    H, G = model.cfg.history, model.cfg.horizon
    rows = ds.values.shape[0]
    if rows < H:
        raise ValueError(f"{args.data}: {rows} rows is shorter than the model history {H}")
    z = (ds.values - mean) / std
    starts = np.arange(0, rows - H + 1)
    x = np.stack([z[s:s + H] for s in starts])
    pred = denormalize(_predict(model, x), mean, std)  # [W, G, N]

    header = ["t"] + [f"{c}_step{g + 1}" for g in range(G) for c in ds.columns]
    out = np.column_stack([starts + H, pred.reshape(pred.shape[0], -1)])
    write_csv(args.out, out, header)
    print(f"wrote {out.shape[0]} forecasts to {args.out}")
    return 0


def _eval_model(model: ForecastModel, meta: dict, data: str, has_header: bool):
    mean, std = _norm_from_meta(meta)
    ds = load_csv(data, has_header=has_header)
    splits = make_windows(ds, model.cfg.history, model.cfg.horizon,
                          (1.0, 0.0, 0.0), stats=(mean, std))
    pred = denormalize(_predict(model, splits.x_train), mean, std)
    true = denormalize(splits.y_train, mean, std)
    return true, pred


def cmd_eval(args) -> int:
    model, meta = load_checkpoint(args.model)
    true, pred = _eval_model(model, meta, args.data, args.has_header)
    print(f"windows: {true.shape[0]}   mode: {model.mode}")
    print(f"overall  R2 = {r2(true, pred):.6f}   RRSE = {rrse(true, pred):.6f}")
    for g in range(true.shape[1]):
        print(f"step {g + 1:2d}  R2 = {r2(true[:, g], pred[:, g]):.6f}   "
              f"RRSE = {rrse(true[:, g], pred[:, g]):.6f}")
    return 0


def cmd_plot_data(args) -> int:
    model, meta = load_checkpoint(args.model)
    mean, std = _norm_from_meta(meta)
    ds = load_csv(args.data, has_header=args.has_header)
    H, G = model.cfg.history, model.cfg.horizon
    step = args.step
    if not 1 <= step <= G:
        raise ValueError(f"--step must be in 1..{G}, got {step}")
    splits = make_windows(ds, H, G, (1.0, 0.0, 0.0), stats=(mean, std))
    pred = denormalize(_predict(model, splits.x_train), mean, std)
    true = denormalize(splits.y_train, mean, std)
    rows = []
    for w in range(true.shape[0]):
        t = w + H + step - 1
        for j, col in enumerate(ds.columns):
            rows.append([t, j, true[w, step - 1, j], pred[w, step - 1, j]])
    write_csv(args.out, np.asarray(rows), ["t", "variable", "true", "predicted"])
    print(f"wrote {len(rows)} (t, true, predicted) rows to {args.out}")
    return 0


def cmd_energy(args) -> int:
    model, meta = load_checkpoint(args.model)
    table = EnergyTable.from_config(load_config(args.table))
    mean, std = _norm_from_meta(meta)
    ds = load_csv(args.data, has_header=args.has_header)
    splits = make_windows(ds, model.cfg.history, model.cfg.horizon,
                          (1.0, 0.0, 0.0), stats=(mean, std))
    x = splits.x_train if args.limit is None else splits.x_train[:args.limit]
    report = profile(model, x, table)
    print(report.to_text())
    if args.compare:
        print()
        print(compare_ann_energy(model, x, table).to_text())
    if args.out:
        kv = report.to_kv()
        with open(args.out, "w") as f:
            for k in sorted(kv):
                f.write(f"{k} = {kv[k]:.12e}\n")
        print(f"\nwrote {args.out}")
    return 0


def _verify_checks(model_path: str | None, data_path: str | None,
                   has_header: bool) -> list[tuple[str, bool, str]]:
    checks: list[tuple[str, bool, str]] = []
    rep = verify_deviation_bounds()
    checks.append(("pow2 softplus deviation bounds",
                   rep.softplus_value_max <= SOFTPLUS_VALUE_BOUND
                   and rep.softplus_grad_max <= SOFTPLUS_GRAD_BOUND,
                   f"value {rep.softplus_value_max:.4f}/{SOFTPLUS_VALUE_BOUND} "
                   f"grad {rep.softplus_grad_max:.4f}/{SOFTPLUS_GRAD_BOUND}"))
    checks.append(("pow2 silu deviation bounds",
                   rep.silu_value_max <= SILU_VALUE_BOUND
                   and rep.silu_grad_max <= SILU_GRAD_BOUND,
                   f"value {rep.silu_value_max:.4f}/{SILU_VALUE_BOUND} "
                   f"grad {rep.silu_grad_max:.4f}/{SILU_GRAD_BOUND}"))
    for name, gap in branch_continuity_gaps().items():
        checks.append((f"branch continuity: {name}", gap <= 1e-12, f"gap {gap:.2e}"))

    rng = np.random.default_rng(0)
    q = Quantizer(bits=2, alpha=0.25, beta=-0.1, name="verify")
    vals = 0.25 * rng.integers(0, 4, size=500) - 0.1
    codec_gap = float(np.max(np.abs(decode(encode_quantized(vals, q)) - vals)))
    checks.append(("spike codec round-trip", codec_gap == 0.0, "500 grid values"))

    sim_ok = True
    for _ in range(200):
        T = int(rng.integers(1, 9))
        theta = float(rng.uniform(0.05, 2.0))
        drive = float(rng.uniform(-1.0, 2.5 * T * theta))
        tr = average_if_encode(np.asarray([drive]), T, theta)
        v, fired = 0.0, 0
        for _t in range(T):
            v += drive / T
            if v >= theta * (1.0 - 1e-9):
                fired += 1
                v -= theta
        if fired != int(tr.counts[0]):
            sim_ok = False
            break
    checks.append(("average-IF vs literal simulator", sim_ok, "200 random cases"))

    if model_path is not None:
        model, meta = load_checkpoint(model_path)
        if data_path is not None:
            mean, std = _norm_from_meta(meta)
            ds = load_csv(data_path, has_header=has_header)
            splits = make_windows(ds, model.cfg.history, model.cfg.horizon,
                                  (1.0, 0.0, 0.0), stats=(mean, std))
            x = splits.x_train[:128]
        else:
            x = np.random.default_rng(1).normal(size=(32, model.cfg.history, model.cfg.d_value))
        if model.mode != "snn":
            convert_to_snn(model)
        out_snn = model.forward(x).data
        model.mode = "ann"
        out_ann = model.forward(x).data
        gap = float(np.max(np.abs(out_snn - out_ann)))
        checks.append(("ann/snn forward equivalence", gap <= 1e-9, f"max gap {gap:.2e} on {x.shape[0]} windows"))
    return checks


def cmd_verify(args) -> int:
    checks = _verify_checks(args.model, args.data, args.has_header)
    width = max(len(name) for name, _, _ in checks)
    failed = 0
    for name, ok, detail in checks:
        status = "PASS" if ok else "FAIL"
        failed += 0 if ok else 1
        print(f"{name:<{width}}  {status}  {detail}")
    if failed:
        print(f"{failed} of {len(checks)} checks failed")
        return 1
    print(f"all {len(checks)} checks passed")
    return 0


# --- argument parsing --------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="spikescan",
                                 description="Spiking state-space forecaster: train, convert, profile.")
    sub = ap.add_subparsers(dest="command", required=True)

    def add_common(p, data_required=True):
        p.add_argument("--data", required=data_required, help="CSV series, rows = time steps")
        p.add_argument("--has-header", action="store_true", help="first CSV row is column names")

    p = sub.add_parser("train", help="train a forecaster and write a checkpoint")
    add_common(p)
    p.add_argument("--history", type=int, help="input window length H")
    p.add_argument("--horizon", type=int, help="forecast length G")
    p.add_argument("--bits", type=int, help="activation code width (default 2)")
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--out", required=True, help="checkpoint path to write")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("convert", help="convert a trained checkpoint to spiking inference")
    p.add_argument("--in", dest="in_path", required=True, help="trained (ann-mode) checkpoint")
    p.add_argument("--out", required=True, help="converted checkpoint path")
    p.add_argument("--threshold-scale", action="store_true",
                   help="collapse saturated sites to single-spike windows (needs --data)")
    p.add_argument("--data", help="CSV used to observe site saturation")
    p.add_argument("--has-header", action="store_true")
    p.set_defaults(fn=cmd_convert)

    p = sub.add_parser("forecast", help="emit predictions for every history window")
    add_common(p)
    p.add_argument("--model", required=True, help="checkpoint (ann or snn mode)")
    p.add_argument("--out", required=True, help="CSV to write")
    p.set_defaults(fn=cmd_forecast)

    p = sub.add_parser("verify", help="run the built-in verification suite")
    p.add_argument("--model", help="checkpoint to check ann/snn equivalence on")
    p.add_argument("--data", help="CSV for the equivalence check inputs")
    p.add_argument("--has-header", action="store_true")
    p.set_defaults(fn=cmd_verify)

    p = sub.add_parser("energy", help="profile spiking inference under an energy table")
    add_common(p)
    p.add_argument("--model", required=True, help="snn-mode checkpoint")
    p.add_argument("--table", required=True, help="key = value file with e_acc, e_mac, e_shift, e_cmp")
    p.add_argument("--limit", type=int, help="profile at most this many windows")
    p.add_argument("--compare", action="store_true", help="also compare against the dense path")
    p.add_argument("--out", help="write the report as key = value text")
    p.set_defaults(fn=cmd_energy)

    p = sub.add_parser("eval", help="print R2 and RRSE against a labeled series")
    add_common(p)
    p.add_argument("--model", required=True)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("plot-data", help="emit (t, variable, true, predicted) rows")
    add_common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--step", type=int, default=1, help="which forecast step to emit (1-based)")
    p.set_defaults(fn=cmd_plot_data)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ValueError, OSError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
