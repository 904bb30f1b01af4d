"""Command-line entry point: ``hrdyn <subcommand> [options]``.

Every subcommand writes its outputs plus ``run_manifest.json`` into an output
directory (``--out``; default ``$HRDYN_OUTPUT_ROOT/<subcommand>`` or
``./hrdyn-runs/<subcommand>``).  Options may also come from a TOML or JSON
file given with ``--config``; explicit flags override file values.

Exit status: 0 success, 1 usage or validation error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .exceptions import ConfigurationError, HrdynError, InputError
from .nn.checkpoint import FORMAT_VERSION

logger = logging.getLogger("hrdyn")

OUTPUT_ROOT_ENV = "HRDYN_OUTPUT_ROOT"
DEFAULT_OUTPUT_ROOT = "hrdyn-runs"


class UsageError(ConfigurationError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# --------------------------------------------------------------------------
# argument helpers


def parse_range(text):
    """``"a:b"`` -> inclusive integer range; ``"a,b,c"`` -> explicit list; ``"a"`` -> [a]."""
    text = str(text).strip()
    try:
        if ":" in text:
            lo, hi = (int(p) for p in text.split(":"))
            if hi < lo:
                raise UsageError(f"empty range {text!r}")
            return list(range(lo, hi + 1))
        return [int(p) for p in text.split(",") if p.strip()]
    except ValueError:
        raise UsageError(f"bad range {text!r}; use a:b or a,b,c") from None


def parse_float_list(text):
    try:
        return [float(p) for p in str(text).split(",") if p.strip()]
    except ValueError:
        raise UsageError(f"bad number list {text!r}") from None


def _snr(text):
    return None if str(text).lower() == "none" else float(text)


def load_config_file(path):
    if not os.path.exists(path):
        raise InputError(f"config file not found: {path}")
    with open(path, "rb") as fh:
        raw = fh.read()
    try:
        if path.endswith(".json"):
            data = json.loads(raw.decode())
        else:
            try:
                import tomllib
            except ImportError:  # Python < 3.11
                import tomli as tomllib
            data = tomllib.loads(raw.decode())
    except Exception as exc:
        raise ConfigurationError(f"{path}: malformed config: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigurationError(f"{path}: config must be a table/object")
    return {k.replace("-", "_"): v for k, v in data.items()}


def _output_dir(args, allow_existing=False):
    out = args.out or os.path.join(os.environ.get(OUTPUT_ROOT_ENV, DEFAULT_OUTPUT_ROOT),
                                   args.command)
    if os.path.exists(out):
        if not os.path.isdir(out):
            raise ConfigurationError(f"output path {out} is not a directory")
        if os.listdir(out) and not (args.force or allow_existing):
            raise ConfigurationError(f"output directory {out} is not empty (use --force)")
    os.makedirs(out, exist_ok=True)
    return out


def _resolved_args(args):
    skip = {"func", "config", "out", "force", "verbose"}
    return {k: v for k, v in sorted(vars(args).items()) if k not in skip}


def _read_series(path, column=None):
    """HR series from a session directory (its labels) or a CSV column."""
    from .datagen import load_session

    if os.path.isdir(path):
        return load_session(path).labels
    if not os.path.exists(path):
        raise InputError(f"series file not found: {path}")
    import csv

    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if not rows:
        raise InputError(f"{path}: empty file")
    header = None
    try:
        [float(c) for c in rows[0]]
    except ValueError:
        header, rows = [c.strip() for c in rows[0]], rows[1:]
    if column is None:
        col = len(rows[0]) - 1 if rows else 0
    elif header is not None and column in header:
        col = header.index(column)
    else:
        raise InputError(f"{path}: no column named {column!r}")
    try:
        return np.array([float(r[col]) for r in rows])
    except (ValueError, IndexError) as exc:
        raise InputError(f"{path}: cannot read numeric column {col}: {exc}") from None


def _default_series(seed):
    from .datagen import SynthConfig, gen_hr_trajectory

    return gen_hr_trajectory(SynthConfig(seed=seed)).values


def _model_config(args):
    from .model import preset

    overrides = {}
    if getattr(args, "conditioning", None):
        overrides["conditioning"] = args.conditioning
    if getattr(args, "k", None) is not None:
        overrides["k_history"] = args.k
    return preset(args.preset, **overrides)


def _train_config(args):
    from .training import TrainConfig

    return TrainConfig(
        batch_size=args.batch_size, lr=args.lr, weight_decay=args.weight_decay,
        max_epochs=args.max_epochs, early_stop_patience=args.early_stop_patience,
        plateau_patience=args.plateau_patience, aug_fraction=args.aug_fraction,
        aug_sigma=args.aug_sigma, k_history=_model_config(args).k_history, seed=args.seed,
        inner_folds=args.inner_folds, inner_max_splits=args.inner_max_splits,
        xi_train_source=args.xi_train_source)


def _spectral_config(sessions):
    from .spectral import SpectralConfig

    rates = {s.fs_hz for s in sessions}
    if len(rates) != 1:
        raise InputError(f"sessions use different sampling rates: {sorted(rates)}")
    return SpectralConfig(fs_hz=rates.pop())


# --------------------------------------------------------------------------
# subcommands


def cmd_synth(args):
    from .datagen import SynthConfig, save_dataset, synth_dataset
    from .harness import dataset_hash, write_manifest

    cfg = SynthConfig(duration_s=args.duration, fs_hz=args.fs, hr_mean_bpm=args.hr_mean,
                      hr_std_bpm=args.hr_std, artifact_rate=args.artifact_rate,
                      snr_db=args.snr_db, seed=args.seed, transition_s=args.transition_s)
    out = _output_dir(args)
    sessions = synth_dataset(args.subjects, cfg)
    save_dataset(sessions, out)
    write_manifest(out, "synth", {"args": _resolved_args(args)}, {"root": args.seed},
                   metrics={"sessions": len(sessions), "dataset_hash": dataset_hash(sessions)},
                   outputs=[s.subject_id for s in sessions])
    print(f"wrote {len(sessions)} sessions to {out}")


def _sweep_series(args):
    return _read_series(args.input, args.column) if args.input else _default_series(args.seed)


def cmd_analyze_mi(args):
    from .harness import write_manifest
    from .infodyn import mi_noise_sweep

    series = _sweep_series(args)
    grid = mi_noise_sweep(series, parse_range(args.n), parse_float_list(_range_as_floats(args.sigma)),
                          estimator=args.estimator, seed=args.seed, k=args.k_neighbors,
                          bins=args.bins, include_current=args.include_current)
    out = _output_dir(args)
    grid.to_csv(os.path.join(out, "mi_heatmap.csv"), bits=args.bits)
    write_manifest(out, "analyze-mi", {"args": _resolved_args(args)}, {"root": args.seed},
                   metrics={"max": float(grid.cells.max()), "min": float(grid.cells.min()),
                            "unit": "bits" if args.bits else "nats"},
                   outputs=["mi_heatmap.csv"])
    print(f"wrote {grid.cells.size} cells to {os.path.join(out, 'mi_heatmap.csv')}")


def _range_as_floats(text):
    """Integer ``a:b`` ranges expand; anything else passes through as a float list."""
    text = str(text)
    if ":" in text:
        return ",".join(str(v) for v in parse_range(text))
    return text


def cmd_analyze_pcc(args):
    from .harness import write_manifest
    from .infodyn import pcc_sweep

    series = _sweep_series(args)
    grid = pcc_sweep(series, parse_range(args.n), parse_float_list(_range_as_floats(args.sigma)),
                     seed=args.seed, include_current=args.include_current)
    out = _output_dir(args)
    grid.to_csv(os.path.join(out, "pcc_heatmap.csv"))
    write_manifest(out, "analyze-pcc", {"args": _resolved_args(args)}, {"root": args.seed},
                   metrics={"max": float(grid.cells.max())}, outputs=["pcc_heatmap.csv"])
    print(f"wrote {grid.cells.size} cells to {os.path.join(out, 'pcc_heatmap.csv')}")


def cmd_transfer_entropy(args):
    import math

    from .harness import write_manifest
    from .infodyn import TransferEntropyConfig, transfer_entropy

    src = _read_series(args.src, args.column)
    dst = _read_series(args.dst, args.column)
    res = transfer_entropy(src, dst, TransferEntropyConfig(args.lag, args.bins, args.src_lag))
    value = res.value / math.log(2) if args.bits else res.value
    out = _output_dir(args)
    doc = {"value": value, "unit": "bits" if args.bits else "nats", "n_samples": res.n_samples,
           "mean_occupancy": res.mean_occupancy, "low_occupancy": res.low_occupancy}
    with open(os.path.join(out, "transfer_entropy.json"), "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    write_manifest(out, "transfer-entropy", {"args": _resolved_args(args)}, {}, metrics=doc,
                   outputs=["transfer_entropy.json"])
    print(f"transfer entropy: {value:.6f} {doc['unit']}")
    if res.low_occupancy:
        print(f"warning: mean occupancy {res.mean_occupancy:.2f} per cell is below 5; "
              "estimate is unreliable", file=sys.stderr)


def cmd_train(args):
    from ._rng import derive_seed
    from .datagen import load_dataset
    from .harness import dataset_hash, fit_fold, write_manifest
    from .model import HRNet

    sessions = load_dataset(args.dataset)
    mc, tc = _model_config(args), _train_config(args)
    out = _output_dir(args)
    if args.init_only:
        net, history, inner = HRNet(mc, seed=derive_seed(args.seed, "model", "init")), None, []
    else:
        net, history, inner = fit_fold(sessions, mc, tc, args.seed, _spectral_config(sessions))
    net.save(os.path.join(out, "model.json"),
             extra={"history": history, "inner": inner, "train_config": tc.to_dict()})
    metrics = {"best_val_mae": None if history is None else history["best_val_mae"],
               "n_parameters": net.n_parameters()}
    write_manifest(out, "train", {"args": _resolved_args(args), "model": mc.to_dict(),
                                  "train": tc.to_dict()},
                   {"root": args.seed}, dataset_hash(sessions), metrics, ["model.json"])
    print(f"saved checkpoint to {os.path.join(out, 'model.json')}; "
          f"best validation MAE {metrics['best_val_mae']}")


def cmd_eval(args):
    from .datagen import load_dataset
    from .harness import LabelAccessTracker, autoregressive_eval, dataset_hash, file_hash, write_manifest
    from .model import HRNet
    from .report import EvalReport, bland_altman, phase_space, write_bland_altman_csv, write_phase_space_csv

    if not os.path.exists(args.checkpoint):
        raise InputError(f"checkpoint not found: {args.checkpoint}")
    net = HRNet.load(args.checkpoint)
    sessions = load_dataset(args.dataset)
    scfg = _spectral_config(sessions)
    preds = []
    for s in sessions:
        view = LabelAccessTracker(s)
        series = autoregressive_eval(net, view, net.config.k_history, scfg, args.bootstrap)
        if view.label_reads:
            raise RuntimeError(f"labels of {s.subject_id} were read during inference")
        preds.append((s.subject_id, series.values, s.labels))
    report = EvalReport.from_predictions(preds, {"checkpoint": os.path.abspath(args.checkpoint)})
    out = _output_dir(args)
    report.to_json(os.path.join(out, "report.json"))
    all_p = np.concatenate([p for _, p, _ in preds])
    all_l = np.concatenate([l for _, _, l in preds])
    write_bland_altman_csv(os.path.join(out, "bland_altman.csv"), bland_altman(all_p, all_l).rows)
    rows = []
    for _, _, labels in preds:
        rows.extend(phase_space(labels, args.phase_delay))
    write_phase_space_csv(os.path.join(out, "phase_space.csv"), rows)
    write_manifest(out, "eval", {"args": _resolved_args(args), "model": net.config.to_dict()}, {},
                   dataset_hash(sessions) + " " + file_hash([args.checkpoint]),
                   {"mae_mean": report.mae_mean, "mae_std": report.mae_std},
                   ["report.json", "bland_altman.csv", "phase_space.csv"])
    print(f"MAE {report.summary} bpm over {len(sessions)} sessions")


def cmd_ablate(args):
    from .datagen import load_dataset
    from .harness import dataset_hash, default_ablation_matrix, run_ablation, write_ablation_csv, write_manifest

    sessions = load_dataset(args.dataset)
    matrix = default_ablation_matrix(tuple(parse_range(args.k_values)), args.k or 5)
    seeds = parse_range(args.seeds) if args.seeds else [args.seed]
    rows = run_ablation(sessions, _model_config(args), _train_config(args), matrix,
                        dataset=args.dataset_name or os.path.basename(os.path.normpath(args.dataset)),
                        seeds=seeds, spectral_cfg=_spectral_config(sessions), jobs=args.jobs)
    out = _output_dir(args)
    write_ablation_csv(os.path.join(out, "ablation.csv"), rows)
    write_manifest(out, "ablate", {"args": _resolved_args(args)}, {"seeds": seeds},
                   dataset_hash(sessions), {"rows": rows}, ["ablation.csv"])
    for r in rows:
        print(f"{r['variant']:>18} k={r['k']!s:>2} aug={r['aug']:<3} {r['mae_mean']:.2f}±{r['mae_std']:.2f}")


def cmd_gradcheck(args):
    from .harness import write_manifest
    from .model import HRNet, xi_scaling
    from .nn import grad_check, mae_loss

    mc = _model_config(args)
    net = HRNet(mc, seed=args.seed)
    rng = np.random.default_rng(args.seed)
    for arr in net.named_parameters().values():
        arr += 0.05 * rng.standard_normal(arr.shape)  # move biases off exact ReLU kinks
    x = rng.standard_normal((args.batch, args.length))
    xi = 85.0 + 17.0 * rng.standard_normal((args.batch, mc.k_history))
    y = xi_scaling(85.0 + 17.0 * rng.standard_normal(args.batch))

    def fn(params, inputs):
        net.zero_grad()
        out = net.forward(x, xi, train=True)
        if args.loss == "mae":
            loss, dout = mae_loss(out, y)
        else:
            loss, dout = 0.5 * float(np.sum((out - y) ** 2)), out - y
        net.backward(dout)
        return loss, net.named_gradients()

    worst, details = grad_check(fn, net.named_parameters(), None, n_coords=args.n_coords,
                                seed=args.seed, return_details=True)
    out = _output_dir(args)
    metrics = {"max_relative_error": worst, **details, "tolerance": args.tolerance}
    write_manifest(out, "gradcheck", {"args": _resolved_args(args), "model": mc.to_dict()},
                   {"root": args.seed}, metrics=metrics)
    print(f"max relative error {worst:.3e} ({details['probed']} coordinates, "
          f"{details['skipped_kinks']} on kinks)")
    if worst > args.tolerance:
        from .exceptions import GradientCheckError
        raise GradientCheckError(f"max relative error {worst:.3e} exceeds {args.tolerance:.1e}")


def cmd_hr_fft(args):
    from .datagen import load_dataset, load_session
    from .harness import dataset_hash, session_segments, write_manifest
    from .report import EvalReport, write_rows_csv
    from .spectral import SpectralConfig, estimate_hr_fft

    path = args.dataset
    sessions = ([load_session(path, require_labels=False)]
                if os.path.exists(os.path.join(path, "meta.json"))
                else load_dataset(path, require_labels=False))
    out = _output_dir(args)
    rows, scored = [], []
    for s in sessions:
        cfg = SpectralConfig(fs_hz=s.fs_hz, fft_len=args.fft_len)
        segs = session_segments(s)
        est = np.array([estimate_hr_fft(segs[i].values, cfg) if i in segs else np.nan
                        for i in range(s.n_segments)])
        rows.extend((s.subject_id, i, v) for i, v in enumerate(est))
        if s.labels is not None:
            ok = np.isfinite(est)
            scored.append((s.subject_id, est[ok], s.labels[ok]))
    write_rows_csv(os.path.join(out, "hr_fft.csv"), ["session", "segment_index", "hr_bpm"], rows)
    metrics = {}
    if scored:
        report = EvalReport.from_predictions(scored)
        metrics = {"mae_mean": report.mae_mean, "mae_std": report.mae_std}
        print(f"spectral MAE {report.summary} bpm")
    write_manifest(out, "hr-fft", {"args": _resolved_args(args)}, {}, dataset_hash(sessions),
                   metrics, ["hr_fft.csv"])


# --------------------------------------------------------------------------
# parser


def _add_common(p):
    p.add_argument("--config", help="TOML or JSON file with option values; flags win")
    p.add_argument("--out", help=f"output directory (default ${OUTPUT_ROOT_ENV}/<subcommand>)")
    p.add_argument("--force", action="store_true", help="allow a non-empty output directory")
    p.add_argument("--seed", type=int, default=0, help="root seed")
    p.add_argument("--jobs", type=int, default=1, help="parallel folds/cells where safe")
    p.add_argument("-v", "--verbose", action="store_true")


def _add_model(p):
    p.add_argument("--preset", default="bench", help="model preset: desk, bench, paper-scale")
    p.add_argument("--conditioning", choices=["encoder_decoder", "mlp_concat", "none"])
    p.add_argument("--k", type=int, help="HR history length K")


def _add_training(p):
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=5e-4)
    p.add_argument("--weight-decay", type=float, default=1e-6)
    p.add_argument("--max-epochs", type=int, default=500)
    p.add_argument("--early-stop-patience", type=int, default=30)
    p.add_argument("--plateau-patience", type=int, default=10)
    p.add_argument("--aug-fraction", type=float, default=0.1)
    p.add_argument("--aug-sigma", type=float, default=3.0)
    p.add_argument("--inner-folds", type=int, default=3)
    p.add_argument("--inner-max-splits", type=int, default=None,
                   help="train only the first N inner splits")
    p.add_argument("--xi-train-source", choices=["labels", "predictions"], default="labels")


def _add_sweep(p):
    p.add_argument("--input", help="session directory (uses its labels) or CSV series; "
                                   "default: a synthetic trajectory from --seed")
    p.add_argument("--column", help="CSV column name (default: last column)")
    p.add_argument("--n", default="1:10", help="history lengths, a:b inclusive or a,b,c")
    p.add_argument("--sigma", default="0:10", help="noise levels in bpm, a:b or a,b,c")
    p.add_argument("--include-current", action="store_true",
                   help="let the history include y_t itself")


def build_parser():
    parser = _Parser(prog="hrdyn", description="Heart-rate dynamics from PPG.")
    parser.add_argument("--version", action="version",
                        version=f"hrdyn {__version__} (checkpoint format_version {FORMAT_VERSION})")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic PPG dataset")
    _add_common(p)
    p.add_argument("--subjects", type=int, default=4)
    p.add_argument("--duration", type=float, default=600.0, help="seconds per session")
    p.add_argument("--fs", type=float, default=64.0)
    p.add_argument("--hr-mean", type=float, default=85.0)
    p.add_argument("--hr-std", type=float, default=17.0)
    p.add_argument("--artifact-rate", type=float, default=0.0, help="bursts per minute")
    p.add_argument("--snr-db", type=_snr, default=30.0, help="dB, or 'none' for noise-free")
    p.add_argument("--transition-s", type=float, default=20.0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("analyze-mi", help="MI heatmap over history length and noise level")
    _add_common(p)
    _add_sweep(p)
    p.add_argument("--estimator", choices=["ksg", "hist"], default="ksg")
    p.add_argument("--k-neighbors", type=int, default=3)
    p.add_argument("--bins", type=int, default=16)
    p.add_argument("--bits", action="store_true", help="report bits instead of nats")
    p.set_defaults(func=cmd_analyze_mi)

    p = sub.add_parser("analyze-pcc", help="summed |Pearson| heatmap")
    _add_common(p)
    _add_sweep(p)
    p.set_defaults(func=cmd_analyze_pcc)

    p = sub.add_parser("transfer-entropy", help="binned transfer entropy src -> dst")
    _add_common(p)
    p.add_argument("--src", required=True)
    p.add_argument("--dst", required=True)
    p.add_argument("--column")
    p.add_argument("--lag", type=int, default=1, help="destination history depth L")
    p.add_argument("--src-lag", type=int, default=1)
    p.add_argument("--bins", type=int, default=2)
    p.add_argument("--bits", action="store_true")
    p.set_defaults(func=cmd_transfer_entropy)

    p = sub.add_parser("train", help="train on every session of a dataset")
    _add_common(p)
    _add_model(p)
    _add_training(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--init-only", action="store_true", help="save an untrained checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="autoregressive evaluation of a checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--bootstrap", type=int, default=None,
                   help="segments seeded by the spectral estimate (default K)")
    p.add_argument("--phase-delay", type=int, default=2, help="phase-space delay in segments")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="LOSO ablation table")
    _add_common(p)
    _add_model(p)
    _add_training(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--dataset-name")
    p.add_argument("--k-values", default="3,5,7")
    p.add_argument("--seeds", help="seed list, a:b or a,b,c (default: --seed)")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full network")
    _add_common(p)
    _add_model(p)
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--length", type=int, default=128)
    p.add_argument("--n-coords", type=int, default=8, help="probed coordinates per tensor")
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--loss", choices=["mse", "mae"], default="mse")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("hr-fft", help="spectral-peak HR for a session or dataset")
    _add_common(p)
    p.add_argument("--dataset", required=True, help="session or dataset directory")
    p.add_argument("--fft-len", type=int, default=8192)
    p.set_defaults(func=cmd_hr_fft)
    return parser


def parse_args(argv):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        raise UsageError("a subcommand is required (see --help)")
    if args.config:
        cfg = load_config_file(args.config)
        sub = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest for a in sub._actions}
        unknown = sorted(set(cfg) - known)
        if unknown:
            raise ConfigurationError(f"{args.config}: unknown option(s) {unknown}")
        sub.set_defaults(**cfg)
        args = parser.parse_args(argv)
    return args


def main(argv=None):
    argv = sys.argv[1:] if argv is None else argv
    try:
        args = parse_args(argv)
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except (HrdynError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with threadpool_limits(limits=1):
            args.func(args)
    except (FloatingPointError, AssertionError) as exc:
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except (HrdynError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
