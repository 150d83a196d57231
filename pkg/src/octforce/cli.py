"""``octforce`` command line: simulate, train, eval, compare, plot.

Every command accepts ``--config FILE`` with ``key = value`` lines whose keys are
the long flag names (``batch-size`` or ``batch_size``); flags given on the command
line win. The fully resolved configuration is echoed to stderr as one JSON line.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import dataset, nets, sim, streams
from . import train as tr

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
ARCH_NAMES = [a.value for a in nets.ArchId]

log = logging.getLogger("octforce")


class CliError(Exception):
    def __init__(self, message, code=EXIT_DATA):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------------------
# value parsing


def _groups(text):
    try:
        out = []
        for part in text.split(","):
            n, f = part.lower().split("x")
            out.append((int(n), int(f)))
        return tuple(out)
    except ValueError:
        raise argparse.ArgumentTypeError(f"groups must look like '2x16,2x32', got {text!r}") from None


def _fractions(text):
    try:
        vals = [float(v) for v in text.split(",")]
        return dataset.SplitSpec(*vals)
    except (TypeError, ValueError) as e:
        raise argparse.ArgumentTypeError(f"bad split {text!r}: {e}") from None


def _archs(text):
    try:
        return [nets.ArchId.parse(a.strip()).value for a in text.split(",") if a.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(str(e)) from None


def _optics(text) -> sim.OpticalParams:
    if not text:
        return sim.OpticalParams()
    known = {f.name: f.type for f in fields(sim.OpticalParams)}
    kw = {}
    for part in text.split(","):
        key, _, value = part.partition("=")
        key = key.strip()
        if key not in known:
            raise CliError(f"unknown optics key {key!r}; known: {', '.join(known)}", EXIT_USAGE)
        kw[key] = int(value) if key.endswith("_idx") or key == "depth_px" else float(value)
    try:
        return sim.OpticalParams(**kw)
    except sim.SimulationInputError as e:
        raise CliError(str(e), EXIT_USAGE) from None


def _preset(name) -> sim.NeedlePreset:
    if name in sim.PRESETS:
        return sim.PRESETS[name]
    if Path(name).is_file():
        try:
            return sim.load_preset(name)
        except (ValueError, TypeError) as e:
            raise CliError(f"bad preset file {name}: {e}", EXIT_USAGE) from None
    raise CliError(f"unknown preset {name!r}; use one of {', '.join(sim.PRESETS)} or a key=value file", EXIT_USAGE)


# ---------------------------------------------------------------------------
# parser


def _add_train_flags(p):
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dtype", choices=["float32", "float64"], default="float32")
    p.add_argument("--no-scale-labels", action="store_true", help="train on raw mN labels")
    p.add_argument("--split", type=_fractions, default=dataset.SplitSpec(), help="train,val,test fractions")
    g = p.add_argument_group("architecture size (defaults: library LayerSpec)")
    g.add_argument("--groups", type=_groups, help="residual groups as blocks x maps, e.g. 2x16,2x32,2x64")
    g.add_argument("--kernel", type=int)
    g.add_argument("--convgru-layers", type=int)
    g.add_argument("--convgru-maps", type=int)
    g.add_argument("--convgru-kernel", type=int)
    g.add_argument("--gru-layers", type=int)
    g.add_argument("--gru-hidden", type=int)
    g.add_argument("--cnn-gru-layers", type=int)


SPEC_KEYS = ("groups", "kernel", "convgru_layers", "convgru_maps", "convgru_kernel", "gru_layers", "gru_hidden", "cnn_gru_layers")


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value file; command-line flags win")
    common.add_argument("-v", "--verbose", action="store_true", help="log training progress")

    parser = argparse.ArgumentParser(prog="octforce", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="simulate streams and write a dataset file")
    p.add_argument("--preset", default="needle1", help="needle1/needle2/needle3 or a key=value preset file")
    p.add_argument("--mode", choices=["calibration", "insertion"], default="calibration")
    p.add_argument("--duration", type=float, default=60.0, help="seconds (calibration only)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--t-s", type=int, default=50)
    p.add_argument("--d-c", type=int, default=70)
    p.add_argument("--stride", type=int, default=1)
    p.add_argument("--shielded", action="store_true", help="insertion with the shielding tube")
    p.add_argument("--force-noise", type=float, help="force sensor noise std in mN (default 0 calibration, 1 insertion)")
    p.add_argument("--friction", type=float, default=sim.DEFAULT_INSERTION.friction_per_mm, help="shaft friction mN/mm")
    p.add_argument("--optics", default="", help="optics overrides, e.g. noise_floor=0.03,speckle_sigma=0.2")
    p.add_argument("--out", help="dataset file to write")
    p.set_defaults(func=cmd_simulate, required=("out",))

    p = sub.add_parser("train", parents=[common], help="train one architecture on a dataset file")
    p.add_argument("--data")
    p.add_argument("--arch", choices=ARCH_NAMES, default=nets.ArchId.ConvGruCnn.value)
    p.add_argument("--t-s", type=int, help="expected window length; checked against the dataset")
    p.add_argument("--d-c", type=int, help="expected crop size; checked against the dataset")
    p.add_argument("--out", help="checkpoint path")
    p.add_argument("--history", help="history CSV (default: <out>.history.csv)")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train, required=("data", "out"))

    p = sub.add_parser("eval", parents=[common], help="metrics of a checkpoint on a dataset")
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--subset", choices=["all", "train", "val", "test"], default="test")
    p.add_argument("--split", type=_fractions, default=dataset.SplitSpec())
    p.add_argument("--out", help="also write the metrics table here")
    p.set_defaults(func=cmd_eval, required=("checkpoint", "data"))

    p = sub.add_parser("compare", parents=[common], help="train several architectures over seeds and rank them")
    p.add_argument("--data")
    p.add_argument("--archs", type=_archs, default=ARCH_NAMES, help="comma-separated architecture names")
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--out", help="ranking table CSV")
    _add_train_flags(p)
    p.set_defaults(func=cmd_compare, required=("data",))

    p = sub.add_parser("plot", parents=[common], help="export t, predicted, measured base and tip truth columns")
    p.add_argument("--checkpoint")
    p.add_argument("--data", help="insertion dataset written by simulate --mode insertion")
    p.add_argument("--forces", help="force sidecar (default: <data>.forces.csv)")
    p.add_argument("--out")
    p.set_defaults(func=cmd_plot, required=("checkpoint", "data", "out"))
    return parser, sub


def _subparser(sub, name):
    return sub.choices[name]


def _apply_config(parser, sub, argv):
    args = parser.parse_args(argv)
    if args.config:
        try:
            kv = sim.parse_kv_file(args.config)
        except (OSError, ValueError) as e:
            raise CliError(f"cannot read config: {e}", EXIT_USAGE) from None
        sp = _subparser(sub, args.command)
        actions = {a.dest: a for a in sp._actions if a.dest not in ("help", "config")}
        defaults = {}
        for key, value in kv.items():
            dest = key.replace("-", "_")
            if dest not in actions:
                raise CliError(f"{args.config}: unknown key {key!r} for '{args.command}'", EXIT_USAGE)
            if isinstance(actions[dest], argparse._StoreTrueAction):
                defaults[dest] = value.lower() in ("1", "true", "yes", "on")
            else:
                defaults[dest] = value  # string defaults go through the flag's type
        sp.set_defaults(**defaults)
        args = parser.parse_args(argv)
    missing = [k for k in args.required if getattr(args, k) in (None, "")]
    if missing:
        raise CliError(f"{args.command}: missing required setting(s): {', '.join('--' + m.replace('_', '-') for m in missing)}", EXIT_USAGE)
    return args


def _jsonable(v):
    if isinstance(v, dataset.SplitSpec):
        return [v.train_frac, v.val_frac, v.test_frac]
    if isinstance(v, (sim.NeedlePreset, sim.OpticalParams)):
        return asdict(v)
    if isinstance(v, tuple):
        return [_jsonable(x) for x in v]
    return v


def _echo(args, **extra):
    cfg = {k: _jsonable(v) for k, v in vars(args).items() if k not in ("func", "required")}
    cfg.update({k: _jsonable(v) for k, v in extra.items()})
    print("config " + json.dumps(cfg, sort_keys=True), file=sys.stderr)


# ---------------------------------------------------------------------------
# checkpoints


def _spec_from_args(args) -> nets.LayerSpec:
    over = {k: getattr(args, k) for k in SPEC_KEYS if getattr(args, k, None) is not None}
    try:
        return nets.LayerSpec(**over)
    except ValueError as e:
        raise CliError(f"bad architecture size: {e}", EXIT_USAGE) from None


def _train_config(args) -> tr.TrainConfig:
    try:
        return tr.TrainConfig(
            batch_size=args.batch_size,
            lr=args.lr,
            epochs=args.epochs,
            seed=args.seed,
            scale_labels=not args.no_scale_labels,
            dtype=args.dtype,
        )
    except ValueError as e:
        raise CliError(str(e), EXIT_USAGE) from None


def save_trained(trained: tr.TrainedModel, header: dataset.DatasetHeader, path, extra=None):
    """Checkpoint (parameters + normalisation tensors) and a ``.json`` sidecar."""
    st = trained.stats
    state = trained.model.state()
    state["norm.pixel_mean"] = st.pixel_mean
    state["norm.pixel_std"] = st.pixel_std
    state["norm.labels"] = np.array([st.label_min, st.label_max, st.label_mean, st.count])
    nets.save_checkpoint(state, path)
    meta = {
        "arch": trained.model.arch.value,
        "spec": trained.model.spec.to_dict(),
        "t_s": header.t_s,
        "d_c": header.d_c,
        "scale_labels": trained.scale_labels,
        "dtype": str(next(iter(trained.model.params.values())).dtype),
        "preset": header.preset_name,
        **(extra or {}),
    }
    Path(str(path) + ".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_trained(path) -> tuple[tr.TrainedModel, dict]:
    meta_path = Path(str(path) + ".json")
    if not meta_path.is_file():
        raise CliError(f"{path}: missing sidecar {meta_path}")
    meta = json.loads(meta_path.read_text())
    state = nets.load_checkpoint(path)
    norm = {k: state.pop(k) for k in [k for k in state if k.startswith("norm.")]}
    lab = norm["norm.labels"]
    stats = dataset.Stats(norm["norm.pixel_mean"], norm["norm.pixel_std"], lab[0], lab[1], lab[2], int(lab[3]))
    model = nets.build(meta["arch"], nets.LayerSpec.from_dict(meta["spec"]), d_c=meta["d_c"], dtype=np.dtype(meta["dtype"]))
    model.load_state(state)
    return tr.TrainedModel(model, stats, meta["scale_labels"]), meta


def _check_shape(meta, header, ckpt, data):
    if (meta["t_s"], meta["d_c"]) != (header.t_s, header.d_c):
        raise CliError(
            f"checkpoint {ckpt} expects t_s={meta['t_s']}, d_c={meta['d_c']} "
            f"but dataset {data} has t_s={header.t_s}, d_c={header.d_c}"
        )


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(args):
    preset = _preset(args.preset)
    optics = _optics(args.optics)
    _echo(args, preset=preset, optics=optics)
    truth = None
    if args.mode == "calibration":
        noise = 0.0 if args.force_noise is None else args.force_noise
        oct_, force = sim.simulate_calibration(preset, optics, args.duration, args.seed, noise)
    else:
        noise = 1.0 if args.force_noise is None else args.force_noise
        base = sim.DEFAULT_INSERTION
        profile = sim.InsertionProfile(base.segments, friction_per_mm=args.friction, velocity_mm_s=base.velocity_mm_s)
        oct_, force, truth = sim.simulate_insertion(preset, optics, profile, args.shielded, args.seed, noise)
    labeled = streams.match_streams(oct_, force)
    samples = streams.make_windows(streams.crop_labeled(labeled, args.d_c, optics), args.t_s, args.stride)
    if len(samples) == 0:
        raise CliError(f"{len(labeled)} scans are fewer than t_s={args.t_s}; nothing to write")
    header = dataset.save(samples, dataset.DatasetHeader(0, 0, 0, preset.name, args.seed, args.stride), args.out)
    print(
        f"wrote {header.n_samples} samples (t_s={header.t_s}, d_c={header.d_c}, stride={header.stride}) to {args.out}; "
        f"force range [{samples.labels.min():.2f}, {samples.labels.max():.2f}] mN"
    )
    if truth is not None:
        last = samples.starts + samples.t_s - 1
        tip = truth.f[labeled.force_index[last]]
        side = Path(str(args.out) + ".forces.csv")
        _write_csv(side, ["t", "measured_base_mN", "tip_truth_mN"], zip(samples.t_end, samples.labels, tip))
        print(f"wrote per-sample base and tip-truth forces to {side}")
    return EXIT_OK


def _load_data(path):
    try:
        return dataset.load(path)
    except FileNotFoundError:
        raise CliError(f"dataset not found: {path}") from None


def cmd_train(args):
    spec = _spec_from_args(args)
    cfg = _train_config(args)
    _echo(args, spec=spec.to_dict(), train_config=asdict(cfg))
    header, samples = _load_data(args.data)
    for name in ("t_s", "d_c"):
        want = getattr(args, name)
        if want is not None and want != getattr(header, name):
            raise CliError(f"--{name.replace('_', '-')} {want} does not match dataset {args.data} ({name}={getattr(header, name)})")
    splits = dataset.split(samples, args.split)
    trained, hist = tr.train(args.arch, spec, splits, cfg)
    save_trained(trained, header, args.out, {"best_epoch": hist.best_epoch, "seed": cfg.seed})
    hist_path = args.history or str(args.out) + ".history.csv"
    Path(hist_path).write_text(hist.to_csv())
    best = hist.rows[hist.best_epoch]
    print(f"best epoch {best[0]}: train loss {best[1]:.6g}, val loss {best[2]:.6g}; checkpoint {args.out}, history {hist_path}")
    return EXIT_OK


def _metrics_table(m: tr.Metrics):
    head = list(tr.Metrics.FIELDS) + ["note"]
    return head, [[f"{v:.6g}" for v in m.as_row()] + [m.note]]


def cmd_eval(args):
    _echo(args)
    trained, meta = load_trained(args.checkpoint)
    header, samples = _load_data(args.data)
    _check_shape(meta, header, args.checkpoint, args.data)
    if args.subset != "all":
        samples = dict(zip(("train", "val", "test"), dataset.split(samples, args.split)))[args.subset]
    m = tr.evaluate(trained, samples)
    head, rows = _metrics_table(m)
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(head)
    w.writerows(rows)
    if args.out:
        _write_csv(args.out, head, rows)
    return EXIT_OK


def cmd_compare(args):
    spec = _spec_from_args(args)
    cfg = _train_config(args)
    if args.seeds < 1:
        raise CliError("--seeds must be >= 1", EXIT_USAGE)
    _echo(args, spec=spec.to_dict(), train_config=asdict(cfg))
    _, samples = _load_data(args.data)
    splits = dataset.split(samples, args.split)
    report = tr.compare_models(splits, args.archs, spec, cfg, n_seeds=args.seeds)
    table = report.to_csv()
    sys.stdout.write(table)
    print("ranking by mean MAE: " + " < ".join(report.ranking()))
    if args.out:
        Path(args.out).write_text(table)
    return EXIT_OK


def cmd_plot(args):
    _echo(args)
    trained, meta = load_trained(args.checkpoint)
    header, samples = _load_data(args.data)
    _check_shape(meta, header, args.checkpoint, args.data)
    side = args.forces or str(args.data) + ".forces.csv"
    if not Path(side).is_file():
        raise CliError(f"force sidecar not found: {side} (written by simulate --mode insertion)")
    forces = np.loadtxt(side, delimiter=",", skiprows=1, ndmin=2)
    if len(forces) != len(samples):
        raise CliError(f"{side} has {len(forces)} rows but {args.data} has {len(samples)} samples")
    pred = trained.predict(samples)
    _write_csv(
        args.out,
        ["t", "predicted_mN", "measured_base_mN", "tip_truth_mN"],
        ([repr(float(a)), repr(float(b)), repr(float(c)), repr(float(d))] for a, b, c, d in zip(forces[:, 0], pred, forces[:, 1], forces[:, 2])),
    )
    err = np.abs(pred - forces[:, 2])
    print(f"wrote {len(pred)} rows to {args.out}; MAE vs tip truth {err.mean():.3f} mN, "
          f"mean |base - tip| {np.abs(forces[:, 1] - forces[:, 2]).mean():.3f} mN")
    return EXIT_OK


# ---------------------------------------------------------------------------


def main(argv=None) -> int:
    parser, sub = build_parser()
    try:
        args = _apply_config(parser, sub, argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(asctime)s %(message)s")
        return args.func(args)
    except SystemExit as e:  # argparse usage errors and --help
        return e.code if isinstance(e.code, int) else EXIT_USAGE
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except (tr.TrainingDiverged, tr.NonFiniteGradientError, FloatingPointError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ValueError, KeyError, dataset.DatasetError, nets.CheckpointError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
