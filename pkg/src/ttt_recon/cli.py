"""Command-line harness orchestrating the experimental protocol.

Subcommands: gen-data, train, ttt-eval, gap-report, mixture-sweep, theory,
export-png-like. All outputs except the training-history CSV (which carries
wall-clock seconds) are byte-identical across reruns with the same config
and seed. TTT_RECON_THREADS caps the per-sample worker count of ttt-eval.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .config import SHIFTS, Experiment, load_config
from .errors import (
    ConfigError,
    ContractError,
    DegenerateError,
    FormatError,
    NumericError,
    RankError,
    ShapeError,
)
from .ksp import load_checkpoint, save_checkpoint
from .metrics import GapReport, gap_metrics, ssim
from .operators import make_mask, undersample
from .phantoms import load_dataset, make_dataset
from .rng import derive_seed
from .subspace import expected_lss, lss, make_model, risk, sample, supervised_fit, ttt_alpha, ttt_alpha_pooled
from .training import LoadedDataset, train, train_mixture
from .ttt import reconstruct_with_ttt_traced
from .unet import ReconModel, reconstruct_baseline, unet_init

DISTS = ("P", "Q")


# ---------------------------------------------------------------------------
# helpers


def write_pgm(path: str | Path, image: np.ndarray, data_range: float) -> None:
    """8-bit binary PGM (P5); values mapped linearly [0, data_range] -> [0, 255]."""
    arr = np.clip(np.asarray(image, dtype=np.float64) / data_range, 0.0, 1.0)
    data = np.round(arr * 255).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(data.tobytes())


def _save_cli_checkpoint(path: Path, model: ReconModel, meta: dict) -> None:
    cfg = {"unet": model.config.to_dict(), "meta": meta}
    save_checkpoint(path, cfg, {k: v.data for k, v in model.params.items()})


def _load_cli_checkpoint(path: Path) -> tuple[ReconModel, dict]:
    from .unet import UNetConfig

    cfg, arrays = load_checkpoint(path)
    unet_cfg = cfg["unet"] if "unet" in cfg else cfg
    model = unet_init(UNetConfig.from_dict(unet_cfg))
    model.load_param_arrays(arrays)
    return model, cfg.get("meta", {})


def _mean_ssim_from_csv(path: Path) -> float:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise FormatError(f"{path}: eval CSV has no rows")
    return float(np.mean([float(r["ssim"]) for r in rows]))


def _worker_count(n_items: int) -> int:
    cap = int(os.environ.get("TTT_RECON_THREADS", "1"))
    return max(1, min(cap, n_items))


def _eval_one(payload) -> tuple[str, float, int | None]:
    (ckpt_path, data_dir, file_name, accel, cf, mask_seed, ttt_dict, ttt_lr) = payload
    from .phantoms import load_dataset as _ld  # re-import for worker processes
    from .ttt import TTTConfig

    model, _ = _load_cli_checkpoint(Path(ckpt_path))
    _, samples = _ld(data_dir)
    sample_obj = next(s for s in samples if f"{s.id}.ksp" == file_name)
    mask = make_mask(sample_obj.shape[1], accel, cf, mask_seed)
    meas = undersample(sample_obj, mask)
    ref = sample_obj.reference.numpy()
    if ttt_dict is None:
        out = reconstruct_baseline(model, meas).numpy()
        chosen = None
    else:
        cfg = TTTConfig(
            lr=ttt_lr,
            max_iters=ttt_dict["max_iters"],
            val_fraction=ttt_dict["val_fraction"],
            patience=ttt_dict["patience"],
            eval_every=ttt_dict["eval_every"],
            seed=ttt_dict["seed"],
            final_input=ttt_dict["final_input"],
        )
        img, trace = reconstruct_with_ttt_traced(model, meas, cfg)
        out = img.numpy()
        chosen = trace.chosen_iteration
    score = ssim(out, ref, data_range=float(ref.max()))
    return sample_obj.id, score, chosen


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> int:
    exp = Experiment(load_config(args.config))
    for dist in DISTS:
        spec = exp.phantom_spec(dist)
        make_dataset(spec, exp.n_train, exp.data_dir(dist, "train"))
        # test indices continue past the training range so ids are disjoint
        make_dataset(spec, exp.n_test, exp.data_dir(dist, "test"), start_index=exp.n_train)
        print(f"{dist}: {exp.n_train} train + {exp.n_test} test samples under {exp.data_dir(dist, 'train').parent}")
    return 0


def cmd_train(args) -> int:
    exp = Experiment(load_config(args.config))
    accel, cf = exp.undersampling(args.dist)
    _, samples = load_dataset(exp.data_dir(args.dist, "train"))
    dataset = LoadedDataset(samples, accel, cf)
    cfg = exp.train_config(mode=args.mode)
    model = unet_init(exp.unet_config(args.mode, args.dist))
    trained, history = train(model, dataset, cfg)
    out_path = exp.model_path(args.mode, args.dist)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    _save_cli_checkpoint(out_path, trained, {"lr": cfg.lr, "mode": args.mode, "dist": args.dist})
    history.write_csv(out_path.with_name(out_path.stem + "_history.csv"))
    last = history.epochs[-1] if history.epochs else None
    summary = (
        f"l_sup {last.l_sup:.4f} l_self {last.l_self:.4f} val_ssim "
        f"{'-' if last.val_ssim is None else f'{last.val_ssim:.4f}'}"
        if last
        else "no epochs"
    )
    print(f"trained {args.mode} on {args.dist}: {summary} -> {out_path}")
    return 0


def cmd_ttt_eval(args) -> int:
    exp = Experiment(load_config(args.config))
    accel, cf = exp.undersampling(args.dist)
    test_dir = Path(args.test_dir) if args.test_dir else exp.data_dir(args.dist, "test")
    manifest = json.loads((test_dir / "manifest.json").read_text())
    model_path = Path(args.model)
    _, meta = _load_cli_checkpoint(model_path)
    ttt_on = args.ttt == "on"
    ttt_cfg = exp.ttt_config(default_lr=meta.get("lr")) if ttt_on else None
    if ttt_on and ttt_cfg.lr is None:
        raise ConfigError("no TTT learning rate: set ttt.lr in the config or use a checkpoint with metadata")
    payloads = [
        (
            str(model_path),
            str(test_dir),
            entry["file"],
            accel,
            cf,
            exp.eval_mask_seed(entry["id"]),
            ttt_cfg.to_dict() if ttt_on else None,
            ttt_cfg.lr if ttt_on else None,
        )
        for entry in manifest["samples"]
    ]
    workers = _worker_count(len(payloads))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_eval_one, payloads))
    else:
        results = [_eval_one(p) for p in payloads]
    out = Path(args.out) if args.out else (
        exp.output_dir / "evals" / f"{model_path.stem}_{args.dist}_ttt-{args.ttt}.csv"
    )
    out.parent.mkdir(parents=True, exist_ok=True)
    lines = ["id,ssim,ttt,chosen_iteration"]
    for sample_id, score, chosen in results:
        lines.append(f"{sample_id},{score:.6f},{args.ttt},{'' if chosen is None else chosen}")
    out.write_text("\n".join(lines) + "\n")
    mean = float(np.mean([score for _, score, _ in results]))
    print(f"evaluated {len(results)} samples (ttt {args.ttt}): mean SSIM {mean:.4f} -> {out}")
    return 0


def cmd_gap_report(args) -> int:
    report = gap_metrics(
        _mean_ssim_from_csv(Path(args.qq)),
        _mean_ssim_from_csv(Path(args.pq)),
        _mean_ssim_from_csv(Path(args.qq_ttt)),
        _mean_ssim_from_csv(Path(args.pq_ttt)),
    )
    rows = [
        ("train on Q test on Q", report.ssim_QQ),
        ("train on P test on Q", report.ssim_PQ),
        ("gap before TTT", report.gap_before),
        ("train on Q test on Q + TTT", report.ssim_QQ_ttt),
        ("train on P test on Q + TTT", report.ssim_PQ_ttt),
        ("gap after TTT", report.gap_after),
    ]
    for label, value in rows:
        print(f"{label:<30s} {value:8.4f}")
    if report.fraction_closed is None:
        print(f"{'fraction of gap closed by TTT':<30s}       -- (gap below threshold)")
    else:
        print(f"{'fraction of gap closed by TTT':<30s} {100 * report.fraction_closed:7.1f}%")
    if args.out_json:
        Path(args.out_json).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out_json).write_text(report.to_json() + "\n")
    if args.out_csv:
        Path(args.out_csv).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out_csv).write_text(GapReport.CSV_HEADER + "\n" + report.csv_row() + "\n")
    return 0


def cmd_mixture_sweep(args) -> int:
    exp = Experiment(load_config(args.config))
    coeffs = [float(c) for c in args.coeffs.split(",") if c != ""]
    for c in coeffs:
        if not 0.0 <= c <= 1.0:
            raise ConfigError(f"mixture coefficient {c} outside [0, 1]")
    mode = args.mode or exp.cfg["train"]["mode"]
    pools = {}
    tests = {}
    for dist in DISTS:
        accel, cf = exp.undersampling(dist)
        _, tr = load_dataset(exp.data_dir(dist, "train"))
        _, te = load_dataset(exp.data_dir(dist, "test"))
        pools[dist] = LoadedDataset(tr, accel, cf)
        tests[dist] = (te, accel, cf)
    cfg = exp.train_config(mode=mode)
    rows = []
    for m in coeffs:
        model = unet_init(exp.unet_config(mode, "mixture"))
        trained, _ = train_mixture(model, pools["P"], pools["Q"], m, cfg)
        means = {}
        for dist in DISTS:
            te, accel, cf = tests[dist]
            scores = []
            for s in te:
                mask = make_mask(s.shape[1], accel, cf, exp.eval_mask_seed(s.id))
                meas = undersample(s, mask)
                ref = s.reference.numpy()
                scores.append(ssim(reconstruct_baseline(trained, meas).numpy(), ref, data_range=float(ref.max())))
            means[dist] = float(np.mean(scores))
        rows.append((m, means["P"], means["Q"]))
        print(f"coeff {m:4.2f}: SSIM on P {means['P']:.4f}  SSIM on Q {means['Q']:.4f}")
    out = Path(args.out) if args.out else exp.output_dir / "reports" / "mixture_sweep.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    lines = ["coefficient,ssim_P,ssim_Q"] + [f"{m:.4f},{p:.6f},{q:.6f}" for m, p, q in rows]
    out.write_text("\n".join(lines) + "\n")
    print(f"-> {out}")
    return 0


def cmd_theory(args) -> int:
    n, d = args.n, args.d
    sigma2, varsigma2 = args.sigma2, args.varsigma2
    draws = args.samples
    sup_alphas, ttt_pooled, ttt_instance = [], [], []
    for k in range(args.seeds):
        model = make_model(n, d, sigma2, varsigma2, seed=derive_seed(args.seed, "theory", k))
        alpha_hat, _ = supervised_fit(model, draws)
        sup_alphas.append(alpha_hat)
        _, y = sample(model, "Q", 10_000)
        ttt_pooled.append(ttt_alpha_pooled(model.U, y))
        ttt_instance.append(float(np.mean(ttt_alpha(model.U, y))))
    model = make_model(n, d, sigma2, varsigma2, seed=derive_seed(args.seed, "theory", 0))
    _, y_mc = sample(model, "Q", draws, stream=1)
    alphas = np.round(np.arange(0.0, 1.2000001, 0.05), 10)
    lines = ["alpha,expected_lss,monte_carlo_lss,risk_P,risk_Q"]
    for a in alphas:
        mc = float(np.mean(lss(float(a), model.U, y_mc)))
        lines.append(
            f"{a:.2f},{expected_lss(float(a), model):.6f},{mc:.6f},"
            f"{risk(float(a), model.U, model, sigma2):.6f},{risk(float(a), model.U, model, varsigma2):.6f}"
        )
    out = Path(args.out) if args.out else Path("theory_curves.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text("\n".join(lines) + "\n")
    sup, pooled = float(np.mean(sup_alphas)), float(np.mean(ttt_pooled))
    print(f"supervised_alpha={sup:.4f} (target {1 / (1 + sigma2):.4f})")
    print(f"mean_ttt_alpha={pooled:.4f} (target {1 / (1 + varsigma2):.4f})")
    print(f"mean_instance_alpha={float(np.mean(ttt_instance)):.4f}")
    print(
        f"risk_Q(ttt)={risk(pooled, model.U, model, varsigma2):.4f} "
        f"risk_Q(supervised)={risk(sup, model.U, model, varsigma2):.4f}"
    )
    print(f"-> {out}")
    return 0


def cmd_export(args) -> int:
    exp = Experiment(load_config(args.config))
    accel, cf = exp.undersampling(args.dist)
    test_dir = Path(args.test_dir) if args.test_dir else exp.data_dir(args.dist, "test")
    _, samples = load_dataset(test_dir)
    model, meta = _load_cli_checkpoint(Path(args.model))
    ttt_cfg = exp.ttt_config(default_lr=meta.get("lr")) if args.ttt == "on" else None
    out_dir = Path(args.out_dir) if args.out_dir else exp.output_dir / "images"
    out_dir.mkdir(parents=True, exist_ok=True)
    for s in samples:
        mask = make_mask(s.shape[1], accel, cf, exp.eval_mask_seed(s.id))
        meas = undersample(s, mask)
        if ttt_cfg is None:
            out = reconstruct_baseline(model, meas).numpy()
        else:
            img, _ = reconstruct_with_ttt_traced(model, meas, ttt_cfg)
            out = img.numpy()
        ref = s.reference.numpy()
        write_pgm(out_dir / f"{s.id}_recon.pgm", out, data_range=float(ref.max()))
    print(f"wrote {len(samples)} PGM images -> {out_dir}")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ttt-recon",
        description="Compressed-sensing reconstruction with test-time training",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the P/Q train and test datasets")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a reconstructor on one distribution")
    p.add_argument("--config", required=True)
    p.add_argument("--mode", choices=["supervised", "joint"], required=True)
    p.add_argument("--dist", choices=list(DISTS), required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("ttt-eval", help="per-sample SSIM evaluation, with or without TTT")
    p.add_argument("--config", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--test-dir", default=None)
    p.add_argument("--dist", choices=list(DISTS), default="Q")
    p.add_argument("--ttt", choices=["on", "off"], required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_ttt_eval)

    p = sub.add_parser("gap-report", help="distribution-shift gap from four eval CSVs")
    p.add_argument("--qq", required=True, help="eval CSV: train on Q, test on Q")
    p.add_argument("--pq", required=True, help="eval CSV: train on P, test on Q")
    p.add_argument("--qq-ttt", required=True, help="eval CSV: train on Q + TTT")
    p.add_argument("--pq-ttt", required=True, help="eval CSV: train on P + TTT")
    p.add_argument("--out-json", default=None)
    p.add_argument("--out-csv", default=None)
    p.set_defaults(func=cmd_gap_report)

    p = sub.add_parser("mixture-sweep", help="train on P/Q mixtures and evaluate both")
    p.add_argument("--config", required=True)
    p.add_argument("--coeffs", default="0,0.05,0.1,0.25,0.5,0.75,0.9,0.95,1.0")
    p.add_argument("--mode", choices=["supervised", "joint"], default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_mixture_sweep)

    p = sub.add_parser("theory", help="closed-form subspace example with Monte-Carlo checks")
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--d", type=int, default=20)
    p.add_argument("--sigma2", type=float, default=1.0)
    p.add_argument("--varsigma2", type=float, default=0.5)
    p.add_argument("--samples", type=int, default=100_000)
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_theory)

    p = sub.add_parser("export-png-like", help="write reconstructions as binary PGM images")
    p.add_argument("--config", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--test-dir", default=None)
    p.add_argument("--dist", choices=list(DISTS), default="Q")
    p.add_argument("--ttt", choices=["on", "off"], default="off")
    p.add_argument("--out-dir", default=None)
    p.set_defaults(func=cmd_export)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (
        ConfigError,
        ContractError,
        DegenerateError,
        FormatError,
        NumericError,
        RankError,
        ShapeError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
