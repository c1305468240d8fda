"""Command line surface: ``pcs train|recover|eval|gradcheck|features``.

Run configs are flat ``key = value`` text files (UTF-8, '#' comments, no
nesting); command-line flags override file values and presets, and every
effective value is echoed before the run starts. Exit codes are stable:
0 success, 1 config/data problems, 2 training divergence, 3 verification
failure.
"""

import argparse
import sys
from pathlib import Path

import numpy as np

from . import losses as losses_mod
from . import metrics as metrics_mod
from . import model as model_mod
from . import netpbm
from . import train as train_mod
from .errors import ConfigError, DivergenceError, PcsError
from .tensor import ConvSpec, Tensor

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_DIVERGED = 2
EXIT_VERIFY = 3

# Published hyperparameter presets. The batch-of-5, 1e6-iteration settings
# are the full-scale recipe; note that learning rates are tied to this
# package's loss normalization (sum over pixels, mean over batch), so they
# must be retuned if the normalization changes.
PRESETS = {
    "paper-mr1-vgg22": dict(stride=16, target_mr=0.01, loss="perceptual", tap="pool2",
                            learning_rate=1e-8, batch_size=5, iterations=1000000, crop_size=256),
    "paper-mr1-vgg34": dict(stride=16, target_mr=0.01, loss="perceptual", tap="pool3",
                            learning_rate=1e-9, batch_size=5, iterations=1000000, crop_size=256),
    "paper-mr4-vgg22": dict(stride=16, target_mr=0.04, loss="perceptual", tap="pool2",
                            learning_rate=1e-8, batch_size=5, iterations=1000000, crop_size=256),
    "paper-mr4-vgg34": dict(stride=16, target_mr=0.04, loss="perceptual", tap="pool3",
                            learning_rate=1e-9, batch_size=5, iterations=1000000, crop_size=256),
}

_TRAIN_KEYS = {
    "learning_rate": float,
    "momentum": float,
    "batch_size": int,
    "iterations": int,
    "seed": int,
    "loss": str,
    "tap": str,
    "extractor": str,
    "stride": int,
    "kernel": int,
    "channels": int,
    "recovery_channels": int,
    "res_blocks": int,
    "target_mr": float,
    "dataset_dir": str,
    "crop_size": int,
    "checkpoint_every": int,
    "out_dir": str,
}

_TRAIN_DEFAULTS = {
    "momentum": 0.9,
    "seed": 0,
    "loss": "pixel",
    "kernel": 0,
    "recovery_channels": 64,
    "res_blocks": 1,
    "checkpoint_every": 100,
    "out_dir": "runs/out",
}


def parse_config_file(path):
    """Flat ``key = value`` lines; '#' starts a comment, blank lines ignored."""
    values = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e}") from None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _TRAIN_KEYS:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        values[key] = value
    return values


def _coerce(values):
    out = {}
    for key, raw in values.items():
        caster = _TRAIN_KEYS[key]
        try:
            out[key] = caster(raw) if not isinstance(raw, caster) else raw
        except (TypeError, ValueError):
            raise ConfigError(f"config key {key!r}: cannot parse {raw!r} as {caster.__name__}") from None
    return out


def build_train_config(file_values, preset=None, overrides=None):
    values = dict(_TRAIN_DEFAULTS)
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        values.update(PRESETS[preset])
    values.update(file_values)
    if overrides:
        values.update({k: v for k, v in overrides.items() if v is not None})
    values = _coerce(values)

    required = ["learning_rate", "batch_size", "iterations", "dataset_dir", "crop_size", "stride"]
    missing = [k for k in required if k not in values]
    if missing:
        raise ConfigError(f"missing required config keys: {', '.join(missing)}")

    if "channels" in values:
        model_config = model_mod.ModelConfig(
            measurement_stride=values["stride"],
            measurement_channels=values["channels"],
            measurement_kernel=values["kernel"],
            recovery_channels=values["recovery_channels"],
            res_blocks=values["res_blocks"],
            target_mr=values.get("target_mr", 0.0),
        )
    elif "target_mr" in values:
        model_config = model_mod.ModelConfig.from_rate(
            values["target_mr"], values["stride"],
            measurement_kernel=values["kernel"],
            recovery_channels=values["recovery_channels"],
            res_blocks=values["res_blocks"],
        )
    else:
        raise ConfigError("config needs either 'channels' or 'target_mr'")

    if values["loss"] == "pixel":
        loss = losses_mod.LossSpec(kind="pixel")
    else:
        if "extractor" not in values:
            raise ConfigError("perceptual loss requires an 'extractor' source "
                              "(a .pcsw path or random:SEED:DEPTH)")
        loss = losses_mod.LossSpec(kind="perceptual", tap=values.get("tap", "pool2"),
                                   extractor=values["extractor"])

    return train_mod.TrainConfig(
        learning_rate=values["learning_rate"],
        momentum=values["momentum"],
        batch_size=values["batch_size"],
        iterations=values["iterations"],
        seed=values["seed"],
        loss=loss,
        model=model_config,
        dataset_dir=values["dataset_dir"],
        crop_size=values["crop_size"],
        checkpoint_every=values["checkpoint_every"],
        out_dir=values["out_dir"],
    ), values


def _echo_config(values, model_config, stream):
    for key in sorted(values):
        print(f"{key} = {values[key]}", file=stream)
    print(model_config.mr_report(), file=stream)


def cmd_train(args, stdout):
    file_values = parse_config_file(args.config) if args.config else {}
    overrides = {
        "learning_rate": args.learning_rate,
        "momentum": args.momentum,
        "batch_size": args.batch_size,
        "iterations": args.iterations,
        "seed": args.seed,
        "loss": args.loss,
        "tap": args.tap,
        "extractor": args.extractor,
        "dataset_dir": args.dataset_dir,
        "crop_size": args.crop_size,
        "checkpoint_every": args.checkpoint_every,
        "out_dir": args.out_dir,
        "stride": args.stride,
        "channels": args.channels,
        "target_mr": args.target_mr,
    }
    config, values = build_train_config(file_values, preset=args.preset, overrides=overrides)
    _echo_config(values, config.model, stdout)
    state = train_mod.train(config, resume_from=args.resume)
    final = train_mod.checkpoint_path(config.out_dir, state.iteration)
    print(f"finished at iteration {state.iteration}; final checkpoint {final}", file=stdout)
    return EXIT_OK


def _recover_channel(params, channel, pad_policy):
    return model_mod.recover_image(params, channel, pad_policy=pad_policy)


def cmd_recover(args, stdout):
    params = model_mod.load_params(args.model)
    image = netpbm.read_image(args.input)
    channels = []
    for c in range(image.data.shape[1]):
        channel = Tensor._wrap(np.ascontiguousarray(image.data[:, c : c + 1]))
        channels.append(_recover_channel(params, channel, args.pad_policy).data)
    out = Tensor._wrap(np.concatenate(channels, axis=1))
    netpbm.write_image(out, args.output)
    print(f"wrote {args.output}", file=stdout)
    return EXIT_OK


def _print_report(report, columns, stdout):
    all_cols = ["psnr_db", "ssim", "blockiness"]
    cols = [c for c in all_cols if c in columns]
    text = report.to_tsv()
    lines = text.rstrip("\n").split("\n")
    header = lines[1].split("\t")
    keep = [0] + [header.index(c) for c in cols]
    print(lines[0], file=stdout)
    for line in lines[1:]:
        parts = line.split("\t")
        print("\t".join(parts[i] for i in keep), file=stdout)


def cmd_eval(args, stdout):
    columns = [c.strip() for c in args.metrics.split(",")] if args.metrics else ["psnr_db", "ssim", "blockiness"]
    bad = [c for c in columns if c not in ("psnr_db", "ssim", "blockiness", "psnr")]
    if bad:
        raise ConfigError(f"unknown metric column(s): {', '.join(bad)}")
    columns = ["psnr_db" if c == "psnr" else c for c in columns]
    params = model_mod.load_params(args.model)
    report = metrics_mod.evaluate(params, args.dataset)
    _print_report(report, columns, stdout)
    if args.compare:
        other = model_mod.load_params(args.compare)
        other_report = metrics_mod.evaluate(other, args.dataset)
        print("", file=stdout)
        print(f"mean comparison ({Path(args.model).name} vs {Path(args.compare).name})", file=stdout)
        print("metric\tmodel_a\tmodel_b", file=stdout)
        pairs = [
            ("psnr_db", report.mean_psnr, other_report.mean_psnr),
            ("ssim", report.mean_ssim, other_report.mean_ssim),
            ("blockiness", report.mean_blockiness, other_report.mean_blockiness),
        ]
        for name, a, b in pairs:
            if name in columns:
                print(f"{name}\t{a:.6f}\t{b:.6f}", file=stdout)
    return EXIT_OK


def _gradcheck_suite(double):
    """(name, max_relative_error, tolerance) for every differentiable op plus
    both end-to-end losses on a 16x16 instance.

    Finite-difference gradient checks always run in float64 (anything less
    drowns in rounding noise); the --double flag additionally runs the
    adjointness identity on float64 data and tightens its tolerance from
    1e-4 to 1e-10.
    """
    import pcs.tensor as T
    from . import losses, model

    adj_dtype = np.float64 if double else np.float32
    adj_tol = 1e-10 if double else 1e-4
    grad_tol = 1e-3
    eps = 1e-5
    rng = np.random.default_rng(20240901)

    def away_from_kinks(shape, margin=0.15):
        x = rng.standard_normal(shape)
        return np.where(np.abs(x) < margin, x + np.sign(x + 0.5) * margin, x)

    def dt(arr):
        return Tensor(np.asarray(arr, dtype=np.float64))

    checks = []

    # adjointness of the conv pair, reported as a relative identity error
    worst_adj = 0.0
    spec = ConvSpec(2, 3, 4, 4, 2, 2, 1, 1)
    tspec = ConvSpec(3, 2, 4, 4, 2, 2, 1, 1, transposed=True)
    for _ in range(10):
        x = Tensor(rng.standard_normal((1, 2, 8, 8)).astype(adj_dtype))
        w = Tensor(rng.standard_normal((3, 2, 4, 4)).astype(adj_dtype))
        y = Tensor(rng.standard_normal((1, 3, 4, 4)).astype(adj_dtype))
        lhs = float((T.conv2d(x, w, None, spec).data * y.data).sum())
        rhs = float((x.data * T.conv2d_transposed(y, w, None, tspec).data).sum())
        worst_adj = max(worst_adj, abs(lhs - rhs) / max(abs(lhs), abs(rhs), 1e-30))
    checks.append(("adjointness", worst_adj, adj_tol))

    x0 = dt(away_from_kinks((1, 2, 8, 8)))
    w0 = dt(rng.standard_normal((3, 2, 4, 4)))
    b0 = dt(rng.standard_normal((1, 3, 1, 1)))
    checks.append(("conv2d", T.grad_check(
        lambda t: T.sum_all(T.mul(c := T.conv2d(t, w0, b0, spec), c)), x0, eps), grad_tol))

    xt = dt(away_from_kinks((1, 3, 4, 4)))
    wt = dt(rng.standard_normal((3, 2, 4, 4)))
    bt = dt(rng.standard_normal((1, 2, 1, 1)))
    checks.append(("conv2d_transposed", T.grad_check(
        lambda t: T.sum_all(T.mul(c := T.conv2d_transposed(t, wt, bt, tspec), c)), xt, eps), grad_tol))

    xr = dt(away_from_kinks((1, 2, 6, 6)))
    checks.append(("relu", T.grad_check(
        lambda t: T.sum_all(T.mul(r := T.relu(t), r)), xr, eps), grad_tol))

    xp = dt(_spread_values(rng, (1, 2, 6, 6)))
    checks.append(("maxpool2", T.grad_check(
        lambda t: T.sum_all(T.mul(p := T.maxpool2(t), p)), xp, eps), grad_tol))

    xa = dt(rng.standard_normal((1, 2, 5, 5)))
    ya = dt(rng.standard_normal((1, 2, 5, 5)))
    checks.append(("add", T.grad_check(
        lambda t: T.sum_all(T.mul(s := T.add(t, ya), s)), xa, eps), grad_tol))

    # end-to-end losses on a 16x16 single-image instance
    cfg = model.ModelConfig(measurement_stride=4, measurement_channels=4, recovery_channels=6)
    params = model.build_model(cfg, seed=7, dtype=np.float64)
    image = dt(rng.uniform(0.1, 0.9, (1, 1, 16, 16)))
    extractor = losses.random_extractor(seed=11, depth=2)
    for entry in extractor.layers:
        if entry[0] == "conv":
            entry[2].data = entry[2].data.astype(np.float64)
            entry[3].data = entry[3].data.astype(np.float64)

    def pixel_from_meas_w(t):
        params.tensors["meas.w"] = t
        recon = model.recover(params, model.measure(params, image))
        return losses.pixel_loss(recon, image)

    def perceptual_from_meas_w(t):
        params.tensors["meas.w"] = t
        recon = model.recover(params, model.measure(params, image))
        return losses.perceptual_loss(extractor, "pool1", recon, image)

    meas_w = params.tensors["meas.w"]
    checks.append(("pixel_loss_end_to_end",
                   T.grad_check(pixel_from_meas_w, meas_w, eps), grad_tol))
    checks.append(("perceptual_loss_end_to_end",
                   T.grad_check(perceptual_from_meas_w, meas_w, eps), grad_tol))
    return checks


def _spread_values(rng, shape):
    # distinct values in every pooling window keep the max-pool gradient
    # away from ties under finite-difference probing
    total = int(np.prod(shape))
    vals = rng.permutation(total).astype(np.float64) * 0.37 + rng.uniform(0, 0.1)
    return vals.reshape(shape)


def cmd_gradcheck(args, stdout):
    checks = _gradcheck_suite(double=args.double)
    worst_name, worst_ratio = None, -1.0
    failed = False
    for name, err, tol in checks:
        status = "ok" if err <= tol else "FAIL"
        if err > tol:
            failed = True
        ratio = err / tol
        if ratio > worst_ratio:
            worst_name, worst_ratio = name, ratio
        print(f"{name}: max_rel_err={err:.3e} tol={tol:.0e} {status}", file=stdout)
    if failed:
        print(f"verification FAILED; worst offender: {worst_name}", file=stdout)
        return EXIT_VERIFY
    print(f"all checks passed; tightest margin: {worst_name}", file=stdout)
    return EXIT_OK


def cmd_features(args, stdout):
    from . import weights as weights_io

    extractor = losses_mod.load_extractor(args.extractor)
    image = netpbm.to_grayscale(netpbm.read_image(args.input))
    features = losses_mod.feature_extract(extractor, image, args.tap)
    weights_io.write_pcsw(args.output, {"features": features.data})
    print(f"wrote {args.tap} features {features.data.shape} to {args.output}", file=stdout)
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="pcs", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a config file and/or preset")
    p.add_argument("config", nargs="?", help="key = value config file")
    p.add_argument("--preset", choices=sorted(PRESETS), help="named hyperparameter preset")
    p.add_argument("--resume", help="checkpoint file to resume from")
    p.add_argument("--learning-rate", type=float, dest="learning_rate")
    p.add_argument("--momentum", type=float)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--iterations", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--loss", choices=["pixel", "perceptual"])
    p.add_argument("--tap")
    p.add_argument("--extractor", help=".pcsw path or random:SEED:DEPTH")
    p.add_argument("--dataset-dir", dest="dataset_dir")
    p.add_argument("--crop-size", type=int, dest="crop_size")
    p.add_argument("--checkpoint-every", type=int, dest="checkpoint_every")
    p.add_argument("--out-dir", dest="out_dir")
    p.add_argument("--stride", type=int)
    p.add_argument("--channels", type=int)
    p.add_argument("--target-mr", type=float, dest="target_mr")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("recover", help="measure and reconstruct one image")
    p.add_argument("model", help=".pcsw weight file")
    p.add_argument("input", help="input PGM/PPM")
    p.add_argument("output", help="output PGM/PPM")
    p.add_argument("--pad-policy", choices=["reflect", "error"], default="reflect",
                   help="how to handle sizes not divisible by the stride")
    p.set_defaults(func=cmd_recover)

    p = sub.add_parser("eval", help="PSNR/SSIM/blockiness report over a directory")
    p.add_argument("model", help=".pcsw weight file")
    p.add_argument("dataset", help="directory of PGM/PPM images")
    p.add_argument("--compare", help="second .pcsw model for a side-by-side mean table")
    p.add_argument("--metrics", help="comma-separated subset of psnr,ssim,blockiness")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="run the analytic-vs-numeric gradient suite")
    p.add_argument("--double", action="store_true",
                   help="run in float64 and tighten tolerances")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("features", help="dump extractor feature maps for one image")
    p.add_argument("input", help="input PGM/PPM")
    p.add_argument("output", help="output .pcsw file (single 'features' record)")
    p.add_argument("--extractor", required=True, help=".pcsw path or random:SEED:DEPTH")
    p.add_argument("--tap", default="pool2")
    p.set_defaults(func=cmd_features)

    return parser


def main(argv=None, stdout=None):
    stdout = stdout if stdout is not None else sys.stdout
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args, stdout)
    except DivergenceError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except (PcsError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
