"""Command-line entry point: ``spectralgan verify|specnorm|train``.

Exit codes: 0 success, 1 a verification assertion failed, 2 usage or
configuration error, 3 training diverged.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys

import numpy as np

from . import gan, theorems
from .data import FormatError, RingSpec, load_mnist_idx, write_csv, write_pgm_grid
from .nn import layer_sigmas, network_to_dict
from .specnorm import IterMode, sigma_report
from .tensor import CapacityError, ShapeError, load_tensor, make_rng

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_DIVERGED = 0, 1, 2, 3

SUITES = {
    "prop1": "gradient-norm bound for strictly normalized nets (identity and sigmoid output)",
    "prop2": "output/input-gradient invariance under layer rescaling with prod(c) = 1",
    "thm2": "optimal per-layer scale allocation c_t = lambda / sigma_t",
    "thm3": "Monte Carlo variance of a_ij / sigma(A) against 1/max(m, n)",
    "thm4": "Monte Carlo variance of w / sigma_bsn against 2/(fan_in + fan_out)",
    "hessian": "per-layer Hessian spectral norm (zero for identity output, <= 0.1||x||^2 for sigmoid)",
    "internal": "layer-wise output and gradient norm chains, plus the equality case",
    "setd": "gradient-norm ratios against inverse spectral-norm ratios",
}


class UsageError(Exception):
    pass


def _parse_geometry(text):
    try:
        dims = tuple(int(p) for p in text.lower().split("x"))
    except ValueError:
        raise UsageError(f"bad geometry {text!r}; use HxW or CxHxW") from None
    if len(dims) not in (2, 3) or min(dims) < 1:
        raise UsageError(f"bad geometry {text!r}; use HxW or CxHxW")
    return dims


def _read_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path} is not valid JSON: {exc}") from None


def _merge(config_path, overrides):
    """Config-file values, overridden by any flag that was given explicitly."""
    cfg = _read_json(config_path) if config_path else {}
    if not isinstance(cfg, dict):
        raise UsageError("config file must hold a JSON object")
    cfg.update({k: v for k, v in overrides.items() if v is not None})
    return cfg


# --------------------------------------------------------------------------
# verify
# --------------------------------------------------------------------------

def _suite_prop1(o):
    reports = []
    for final in ("identity", "sigmoid"):
        net = theorems.random_dense_net(L=o["layers"], width=o["width"], in_dim=o["in_dim"],
                                        final=final, seed=o["seed"])
        rep = theorems.check_gradient_bound(theorems.strict_normalize(net),
                                            num_inputs=o["num_inputs"], rng=o["seed"])
        reports.append(rep)
    rows = [[str(r.details["final"])] + row for r in reports for row in r.rows]
    header = ["final", "sample", "x_norm", "grad_norm", "ratio"] + [
        f"layer{t}_ratio" for t in range(o["layers"])]
    summary = {"pass": all(r.passed for r in reports),
               "value": max(r.value for r in reports),
               "cases": [r.summary() for r in reports]}
    return summary, header, rows


def _suite_prop2(o):
    net = theorems.random_dense_net(L=o["layers"], width=o["width"], in_dim=o["in_dim"],
                                    seed=o["seed"])
    gen = make_rng(o["seed"])
    rows, worst, ok = [], 0.0, True
    for k in range(o["num_c"]):
        c = theorems.random_scale_vector(net.L, gen)
        rep = theorems.check_rescaling_equivalence(net, c, num_inputs=o["num_inputs"], rng=o["seed"])
        ok &= rep.passed
        worst = max(worst, rep.value)
        rows.extend([k] + row for row in rep.rows)
    header = ["c_index", "sample", "d_original", "d_rescaled", "out_dev", "gradx_dev"]
    return {"pass": bool(ok), "value": worst, "num_c": o["num_c"]}, header, rows


def _suite_thm2(o):
    if o.get("sigmas"):
        sigmas = [float(s) for s in str(o["sigmas"]).split(",")]
    else:
        net = theorems.random_dense_net(L=o["layers"], width=o["width"], in_dim=o["in_dim"],
                                        seed=o["seed"])
        sigmas = layer_sigmas(net)
    rep = theorems.check_allocation_optimality(sigmas, Q=o["q"], num_random_c=o["num_random_c"],
                                               rng=o["seed"])
    header = ["draw", "objective"] + [f"c{t}" for t in range(len(sigmas))]
    return {**rep.summary(), "sigmas": list(sigmas)}, header, rep.rows


def _variance_rows(reports):
    header = ["shape", "dist", "trials", "empirical_var", "upper_bound", "tolerance",
              "lower_qualitative", "centered_var", "pass"]
    rows = [["x".join(map(str, r.shape)), r.dist, r.trials, r.empirical_var, r.upper_bound,
             r.slack, r.lower_qualitative, r.centered_var, r.passed] for r in reports]
    summary = {"pass": all(r.passed for r in reports),
               "value": max(r.empirical_var / r.upper_bound for r in reports),
               "cases": [r.to_dict() for r in reports]}
    return summary, header, rows


def _suite_thm3(o):
    dists = ["gaussian", "uniform"] if o["dist"] == "both" else [o["dist"]]
    reps = [theorems.mc_variance_sn(o["m"], o["n"], d, o["trials"], o["seed"], o["workers"])
            for d in dists]
    return _variance_rows(reps)


def _suite_thm4(o):
    shape = tuple(int(s) for s in str(o["shape"]).lower().split("x"))
    if len(shape) != 4:
        raise UsageError("--shape needs c_out x c_in x kh x kw")
    dists = ["gaussian", "uniform"] if o["dist"] == "both" else [o["dist"]]
    try:
        reps = [theorems.mc_variance_bsn(shape, o["trials"], o["seed"], d, o["workers"])
                for d in dists]
    except theorems.PreconditionError as exc:
        raise UsageError(str(exc)) from None
    return _variance_rows(reps)


def _suite_hessian(o):
    reports = []
    for final in ("identity", "sigmoid"):
        net = theorems.random_dense_net(L=o["layers"], width=o["width"], in_dim=o["in_dim"],
                                        final=final, seed=o["seed"])
        net = theorems.strict_normalize(net)
        xs = make_rng(o["seed"]).standard_normal((o["num_inputs"], o["in_dim"]))
        reports.append(theorems.check_hessian_bounds(net, xs, rng=o["seed"]))
    rows = [[r.details["final"]] + row for r in reports for row in r.rows]
    header = ["final", "sample", "layer", "estimate", "bound", "sigmoid_bound", "converged", "pass"]
    summary = {"pass": all(r.passed for r in reports), "value": max(r.value for r in reports),
               "cases": [r.summary() for r in reports]}
    return summary, header, rows


def _suite_internal(o):
    net = theorems.strict_normalize(theorems.random_dense_net(
        L=o["layers"], width=o["width"], in_dim=o["in_dim"], seed=o["seed"]))
    xs = make_rng(o["seed"]).standard_normal((o["num_inputs"], o["in_dim"]))
    sigmas = layer_sigmas(net)
    rows, ok, worst = [], True, 0.0
    for b, x in enumerate(xs):
        rep = theorems.check_internal_bounds(net, x, sigmas)
        ok &= rep.passed
        worst = max(worst, rep.value)
        rows.extend([b] + row for row in rep.rows)
    tight = theorems.internal_bound_tightness(seed=o["seed"])
    tight_ok = abs(tight - 1.0) <= 1e-6
    summary = {"pass": bool(ok and tight_ok), "value": worst, "equality_ratio": tight,
               "equality_pass": bool(tight_ok)}
    return summary, ["sample", "layer", "quantity", "value", "bound", "pass"], rows


def _suite_setd(o):
    header = ["source", "checkpoint", "rescaling", "i", "j", "grad_ratio", "inv_sigma_ratio"]
    member, xs = theorems.setd_member_network(seed=o["seed"])
    scan = theorems.setd_ratio_scan([member], rescalings=o["rescalings"], inputs=xs,
                                    rng=o["seed"], gradient=o["gradient"])
    dev = scan.log_deviation()
    rows = [["member"] + list(r) for r in scan.rows]
    summary = {"pass": dev <= 1e-6, "value": dev, "member_log_deviation": dev}
    ckdir = o.get("checkpoints")
    if ckdir:
        names = sorted((f for f in os.listdir(ckdir) if f.startswith("ckpt_") and f.endswith(".json")),
                       key=lambda f: int(f[5:-5]))
        if not names:
            raise UsageError(f"no ckpt_<iter>.json files in {ckdir}")
        nets = [gan.load_checkpoint(os.path.join(ckdir, f))[1] for f in names]
        conv = any(lay.kind == "conv" for lay in nets[0].layers)
        scan = theorems.setd_ratio_scan(nets, rescalings=o["rescalings"],
                                        target_geo_mean=1.75 if conv else 1.0,
                                        rng=o["seed"], gradient=o["gradient"])
        rows += [["checkpoints"] + list(r) for r in scan.rows]
        summary["checkpoint_log_deviation"] = scan.log_deviation()
        summary["checkpoints"] = names
    return summary, header, rows


_SUITE_FNS = {"prop1": _suite_prop1, "prop2": _suite_prop2, "thm2": _suite_thm2,
              "thm3": _suite_thm3, "thm4": _suite_thm4, "hessian": _suite_hessian,
              "internal": _suite_internal, "setd": _suite_setd}

VERIFY_DEFAULTS = {"seed": 0, "layers": 4, "width": 32, "in_dim": 16, "num_inputs": 100,
                   "num_c": 20, "num_random_c": 1000, "q": 1.0, "sigmas": None, "m": 64,
                   "n": 64, "trials": 10000, "dist": "both", "shape": "3x3x3x3", "workers": 1,
                   "rescalings": 4, "gradient": "normalized", "checkpoints": None, "out": "."}


def cmd_verify(args):
    if args.suite not in _SUITE_FNS:
        raise UsageError(f"unknown suite {args.suite!r}; choose from {', '.join(SUITES)}")
    o = dict(VERIFY_DEFAULTS)
    o.update(_merge(args.config, {k: getattr(args, k) for k in VERIFY_DEFAULTS}))
    unknown = set(o) - set(VERIFY_DEFAULTS)
    if unknown:
        raise UsageError(f"unknown verify options: {sorted(unknown)}")
    summary, header, rows = _SUITE_FNS[args.suite](o)
    summary = {"suite": args.suite, **summary, "options": o}
    os.makedirs(o["out"], exist_ok=True)
    with open(os.path.join(o["out"], f"{args.suite}.json"), "w") as fh:
        json.dump(_jsonable(summary), fh, indent=2)
    write_csv(os.path.join(o["out"], f"{args.suite}.csv"), header, rows)
    print(f"{args.suite}: {'PASS' if summary['pass'] else 'FAIL'} (value={summary['value']:.6g})")
    return EXIT_OK if summary["pass"] else EXIT_FAIL


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.bool_, bool)):
        return bool(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return x if math.isfinite(x) else None
    return x


# --------------------------------------------------------------------------
# specnorm
# --------------------------------------------------------------------------

def cmd_specnorm(args):
    try:
        kernel = load_tensor(args.kernel)
    except OSError as exc:
        raise UsageError(f"cannot read {args.kernel}: {exc.strerror}") from None
    except (ValueError, KeyError, TypeError) as exc:
        raise UsageError(f"{args.kernel}: malformed tensor JSON ({exc})") from None
    if kernel.ndim < 2:
        kernel = kernel.reshape(1, -1)
    if kernel.ndim == 2:
        kernel = kernel[:, :, None, None]
    if kernel.ndim != 4:
        raise UsageError("kernel must be 2-D (dense) or 4-D (c_out, c_in, kh, kw)")
    input_shape = None
    if args.conv:
        if not args.input:
            raise UsageError("--conv needs --input HxW")
        dims = _parse_geometry(args.input)
        input_shape = (kernel.shape[1],) + dims if len(dims) == 2 else dims
    mode = IterMode("converge", tol=args.tol, max_iters=args.max_iters)
    try:
        rep = sigma_report(kernel, input_shape, args.stride, args.pad, mode, rng=args.seed)
    except (ShapeError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    print(json.dumps(rep.to_dict()))
    return EXIT_OK


# --------------------------------------------------------------------------
# train
# --------------------------------------------------------------------------

TRAIN_KEYS = {f for f in gan.TrainConfig.__dataclass_fields__}
RUN_KEYS = {"dataset", "arch", "gen_hidden", "mnist_images", "mnist_limit", "ring"}


def _train_setup(args):
    flags = {"dataset": args.dataset, "iters": args.iters, "seed": args.seed,
             "loss": args.loss, "n_dis": args.n_dis, "batch_size": args.batch_size,
             "log_every": args.log_every, "power_iters_per_step": args.power_iters,
             "alpha_g": args.alpha, "alpha_d": args.alpha, "ckpt_every": args.ckpt_every,
             "mnist_images": args.mnist_images}
    if args.arch:
        flags["arch"] = _read_json(args.arch)
    cfg = _merge(args.config, flags)
    norm = dict(cfg.get("norm_mode") or {})
    if isinstance(cfg.get("norm_mode"), str):
        norm = {"kind": cfg["norm_mode"]}
    if args.norm is not None:
        norm["kind"] = args.norm
    if args.scale is not None:
        norm["scale"] = args.scale
    norm.setdefault("kind", "sn_w")
    norm.setdefault("scale", 1.0)
    cfg["norm_mode"] = norm
    cfg.setdefault("dataset", "ring8")
    unknown = set(cfg) - TRAIN_KEYS - RUN_KEYS
    if unknown:
        raise UsageError(f"unknown training options: {sorted(unknown)}")
    try:
        tcfg = gan.TrainConfig.from_dict({k: v for k, v in cfg.items() if k in TRAIN_KEYS})
    except (ValueError, TypeError) as exc:
        raise UsageError(str(exc)) from None

    if cfg["dataset"] == "ring8":
        ring = cfg.get("ring") or {}
        try:
            dataset = gan.RingDataset(RingSpec(**ring))
        except (TypeError, ValueError) as exc:
            raise UsageError(f"bad ring spec: {exc}") from None
    elif cfg["dataset"] == "mnist":
        path = cfg.get("mnist_images")
        if not path:
            raise UsageError("--dataset mnist needs --mnist-images <idx file>")
        try:
            images, _ = load_mnist_idx(path)
        except OSError as exc:
            raise UsageError(f"cannot read {path}: {exc.strerror}") from None
        except FormatError as exc:
            raise UsageError(str(exc)) from None
        if cfg.get("mnist_limit"):
            images = images[:int(cfg["mnist_limit"])]
        if not len(images):
            raise UsageError(f"{path} holds no images")
        dataset = gan.ImageDataset(images)
    else:
        raise UsageError(f"unknown dataset {cfg['dataset']!r}; choose ring8 or mnist")
    cfg.setdefault("gen_hidden", [64, 64] if cfg["dataset"] == "ring8" else [128, 256])
    arch = cfg.get("arch")
    try:
        gen, disc = gan.make_models(tcfg, dataset, arch, cfg["gen_hidden"])
    except (KeyError, ValueError) as exc:
        raise UsageError(f"bad architecture: {exc}") from None
    # echo the fully resolved config so the run can be replayed from it alone
    cfg["arch"] = _arch_only(disc)
    cfg.update(tcfg.to_dict())
    return cfg, tcfg, dataset, gen, disc


def _arch_only(disc):
    d = network_to_dict(disc, include_weights=False)
    d.pop("norm", None)
    return d


def cmd_train(args):
    cfg, tcfg, dataset, gen, disc = _train_setup(args)
    out = args.out or cfg.get("out") or "run"
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "config.json"), "w") as fh:
        json.dump(cfg, fh, indent=2, sort_keys=True)
    try:
        result = gan.train(gen, disc, dataset, tcfg, out_dir=out)
    except gan.DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    if tcfg.iters > 0:
        samples = result.generator.sample(1000 if cfg["dataset"] == "ring8" else 64,
                                          np.random.SeedSequence([tcfg.seed, 3]))
        if cfg["dataset"] == "ring8":
            write_csv(os.path.join(out, "samples.csv"), ["x", "y"], samples.tolist())
        else:
            shape = dataset.disc_input_shape
            write_pgm_grid(samples.reshape((-1,) + tuple(shape)), 8,
                           os.path.join(out, "samples.pgm"))
    last = [m for m in result.metrics if m.iter == tcfg.iters]
    if last:
        cov = last[0].mode_coverage
        print(f"done: {tcfg.iters} iters, loss_d={last[0].loss_d:.4f}, loss_g={last[0].loss_g:.4f}"
              + (f", mode_coverage={cov:.3f}" if cov is not None else ""))
    return EXIT_OK


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def build_parser():
    suites = "\n".join(f"  {k:<9} {v}" for k, v in SUITES.items())
    p = argparse.ArgumentParser(
        prog="spectralgan",
        description="Spectral-normalization bounds, inspection and small GAN training runs.",
        epilog="exit codes: 0 pass, 1 assertion failure, 2 usage/config error, 3 divergence")
    sub = p.add_subparsers(dest="command", required=True)

    v = sub.add_parser("verify", help="run a verification suite",
                       formatter_class=argparse.RawDescriptionHelpFormatter,
                       epilog="suites:\n" + suites + "\n\nflags override --config values")
    v.add_argument("--suite", required=True, help="one of: " + ", ".join(SUITES))
    v.add_argument("--config", help="JSON file of suite options")
    v.add_argument("--out", help="report directory (default: .)")
    v.add_argument("--seed", type=int)
    v.add_argument("--layers", type=int, help="network depth L")
    v.add_argument("--width", type=int)
    v.add_argument("--in-dim", dest="in_dim", type=int)
    v.add_argument("--num-inputs", dest="num_inputs", type=int)
    v.add_argument("--num-c", dest="num_c", type=int, help="random rescalings (prop2)")
    v.add_argument("--num-random-c", dest="num_random_c", type=int, help="random allocations (thm2)")
    v.add_argument("--q", type=float, help="gradient constant Q (thm2)")
    v.add_argument("--sigmas", help="comma-separated spectral norms (thm2)")
    v.add_argument("--m", type=int)
    v.add_argument("--n", type=int)
    v.add_argument("--trials", type=int)
    v.add_argument("--dist", choices=["gaussian", "uniform", "both"])
    v.add_argument("--shape", help="kernel shape c_out x c_in x kh x kw (thm4)")
    v.add_argument("--workers", type=int)
    v.add_argument("--rescalings", type=int)
    v.add_argument("--gradient", choices=["normalized", "raw"])
    v.add_argument("--checkpoints", help="directory of ckpt_<iter>.json files (setd)")
    v.set_defaults(func=cmd_verify)

    s = sub.add_parser("specnorm", help="print spectral norms of a kernel in tensor JSON")
    s.add_argument("kernel")
    s.add_argument("--conv", action="store_true", help="also compute the convolution operator norm")
    s.add_argument("--input", help="input geometry HxW (or CxHxW) for --conv")
    s.add_argument("--stride", type=int, default=1)
    s.add_argument("--pad", type=int, default=0)
    s.add_argument("--tol", type=float, default=1e-12)
    s.add_argument("--max-iters", dest="max_iters", type=int, default=20000)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_specnorm)

    t = sub.add_parser("train", help="train a GAN and log per-layer metrics",
                       epilog="flags override --config values")
    t.add_argument("--dataset", choices=["ring8", "mnist"])
    t.add_argument("--norm", choices=["none", "sn_w", "sn_conv", "bsn"])
    t.add_argument("--scale", type=float, help="fixed multiplier after normalization")
    t.add_argument("--iters", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--out")
    t.add_argument("--config", help="JSON run config (e.g. a previous run's config.json)")
    t.add_argument("--arch", help="discriminator architecture JSON")
    t.add_argument("--loss", choices=list(gan.LOSS_KINDS))
    t.add_argument("--n-dis", dest="n_dis", type=int)
    t.add_argument("--batch-size", dest="batch_size", type=int)
    t.add_argument("--alpha", type=float, help="learning rate for both networks")
    t.add_argument("--log-every", dest="log_every", type=int)
    t.add_argument("--ckpt-every", dest="ckpt_every", type=int)
    t.add_argument("--power-iters", dest="power_iters", type=int)
    t.add_argument("--mnist-images", dest="mnist_images", help="IDX image file")
    t.set_defaults(func=cmd_train)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    try:
        return args.func(args)
    except (UsageError, CapacityError) as exc:
        parser.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
