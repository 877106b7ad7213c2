"""Command-line interface: train, reconstruct, eval, verify, rerun.

Exit codes: 0 success, 1 a verification check failed, 2 usage / config /
missing dataset, 3 budget refusal, 4 malformed input file.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import seeding, theory
from .checkpoint import load_checkpoint, save_checkpoint
from .data import (ImageDataset, find_fashion_mnist, load_idx, load_raw_images, make_planted,
                   synthetic_images, write_image_grid)
from .errors import BudgetError, ConfigError, DimensionError, FormatError
from .metrics import batch_record, per_image_metrics
from .models import build_generator, build_linear_sensor, build_network_sensor, sense
from .pml import l0, recover, train

log = logging.getLogger("sdlss")

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_BUDGET, EXIT_FORMAT = 0, 1, 2, 3, 4

TRAIN_COLUMNS = ["epoch", "L_G", "L_A", "val_psnr", "val_ssim", "val_re", "l0", "val_residual", "aborted"]
EVAL_COLUMNS = ["experiment", "epoch", "m", "k", "s", "psnr_db", "psnr_se", "ssim", "ssim_se",
                "re_db", "re_se", "n_images"]
RECON_COLUMNS = ["index", "psnr_db", "ssim", "re_db", "l0", "objective"]
SPARSITY_COLUMNS = ["s", "re_db", "re_se", "psnr_db", "psnr_se", "ssim", "ssim_se"]
REGION_COLUMNS = ["index", "k", "h", "s", "count", "closed_form", "vertex_count", "pass"]
SREC_COLUMNS = ["m", "alpha", "trials", "violations", "rate", "bound_note"]
SWEEP_COLUMNS = ["m", "median_rel_err", "q25", "q75"]

# command-specific options echoed to the manifest for reruns
OPTION_KEYS = {
    "train": (),
    "eval": ("checkpoint", "sparsity_sweep"),
    "reconstruct": ("checkpoint", "images", "measurements", "count"),
    "verify regions": ("k", "h", "s", "arrangements"),
    "verify srec": ("k", "s", "h", "n", "m_sweep", "alpha", "trials"),
    "verify sweep": ("k", "s", "n", "hidden", "m_sweep", "instances", "restarts", "T", "beta",
                     "beta_decay"),
}


class DatasetMissing(Exception):
    pass


# -- helpers -------------------------------------------------------------------

def fmt(x):
    """Stable text for CSV cells: shortest round-trip repr, '' for None."""
    if x is None:
        return ""
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    if isinstance(x, (np.integer,)):
        return str(int(x))
    return str(x)


def write_csv(path, columns, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([fmt(row.get(c)) for c in columns])
    return path


def parse_m_list(text):
    """'2:64' -> doubling 2, 4, ..., 64;  '1,5,10' -> explicit list."""
    text = str(text).strip()
    if ":" in text:
        lo, hi = (int(t) for t in text.split(":"))
        if lo < 1 or hi < lo:
            raise ConfigError(f"bad m range {text!r}")
        out = []
        m = lo
        while m <= hi:
            out.append(m)
            m *= 2
        return out
    try:
        out = [int(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad m list {text!r}") from exc
    if not out or min(out) < 1:
        raise ConfigError(f"bad m list {text!r}")
    return out


def image_shape(n):
    side = int(round(np.sqrt(n)))
    return (side, side) if side * side == n else (1, n)


def _split(ds, sizes, split):
    out, start = [], 0
    for size in sizes:
        out.append(ImageDataset(ds.images[start:start + size], ds.rows, ds.cols, split, ds.channels))
        start += size
    return out


def load_data(cfg: cfgmod.ExperimentConfig):
    """(train, val, test) datasets according to ``cfg.dataset``."""
    sizes = (cfg.train_size, cfg.val_size)
    if cfg.dataset == "synthetic":
        ds = synthetic_images(cfg.train_size + cfg.val_size + cfg.test_size,
                              seed=seeding.stream(cfg.seed, "data", 1))
        return _split(ds, (*sizes, cfg.test_size), "synthetic")
    if cfg.dataset == "fashion-mnist":
        path = find_fashion_mnist(cfg.data_dir or None, "train")
        if path is None:
            raise DatasetMissing(
                "Fashion-MNIST not found: pass --data-dir or set SDLSS_DATA_DIR to a directory "
                "holding train-images-idx3-ubyte(.gz) and t10k-images-idx3-ubyte(.gz)"
            )
        tr = load_idx(path, split="train")
        train_ds, val_ds = _split(tr, sizes, "train")
        test_path = find_fashion_mnist(cfg.data_dir or None, "test")
        te = load_idx(test_path, split="test") if test_path else tr.subset(len(tr))
        return train_ds, val_ds, te.subset(cfg.test_size)
    path = Path(cfg.dataset)
    if not path.is_file():
        raise DatasetMissing(
            f"dataset {cfg.dataset!r} is not 'fashion-mnist', 'synthetic', an IDX file or a .npy file")
    ds = load_raw_images(path) if path.suffix == ".npy" else load_idx(path)
    return _split(ds, (*sizes, cfg.test_size), path.name)


def build_models(cfg: cfgmod.ExperimentConfig, n):
    G = build_generator([cfg.k, *cfg.hidden_dims(), n], seeding.stream(cfg.seed, "init"),
                        output=cfg.output)
    if cfg.sensing == "linear":
        M = build_linear_sensor(cfg.m, n, seeding.stream(cfg.seed, "sensor"))
    else:
        M = build_network_sensor(n, cfg.m, cfg.sensor_dims(), seeding.stream(cfg.seed, "sensor"))
    return G, M


def _checkpoint_config(cfg):
    return {k: v for k, v in asdict(cfg).items() if k not in cfgmod.VOLATILE_KEYS}


def resolve_config(args, extra_layer=None, own=()):
    """defaults < checkpoint echo < --config file < flags.

    ``own`` names command options that shadow config fields of the same name.
    """
    file_values = dict(extra_layer or {})
    if getattr(args, "config", None):
        file_values.update(cfgmod.read_kv(args.config))
    overrides = {k: getattr(args, k, None) for k in cfgmod.FIELD_TYPES if k not in own}
    return cfgmod.resolve(file_values, overrides).validate()


def _options(args, key):
    return {f"opt.{name}": fmt(getattr(args, name)) for name in OPTION_KEYS[key]
            if getattr(args, name, None) is not None}


def finish(out, cfg, key, args, artifacts):
    """Write the manifest last so it can record artifact digests."""
    manifest = out / "manifest.txt"
    h = cfgmod.write_manifest(manifest, cfg, key, _options(args, key), artifacts)
    print(f"manifest {manifest} (config hash {h[:12]})")
    return manifest


def _outdir(cfg):
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- commands ------------------------------------------------------------------

def train_one(cfg, train_ds, val_ds, on_epoch=None):
    G, M = build_models(cfg, train_ds.n)
    return train(train_ds.images, cfg.pml(), G, M, seed=cfg.seed, X_val=val_ds.images,
                 image_shape=train_ds.shape, experiment=f"s{cfg.s}", on_epoch=on_epoch)


def _epoch_dict(row):
    return {"epoch": row.epoch, "L_G": row.loss_g, "L_A": row.loss_a, "val_psnr": row.val_psnr,
            "val_ssim": row.val_ssim, "val_re": row.val_re, "l0": row.l0,
            "val_residual": row.val_residual, "aborted": row.aborted}


def cmd_train(args):
    cfg = resolve_config(args)
    train_ds, val_ds, _ = load_data(cfg)
    out = _outdir(cfg)
    state = train_one(cfg, train_ds, val_ds,
                      on_epoch=lambda st, row: print(
                          f"epoch {row.epoch:3d}  L_G {row.loss_g:.5g}  L_A {row.loss_a:.4g}  "
                          f"val PSNR {row.val_psnr:.2f} dB  SSIM {row.val_ssim:.3f}", flush=True))
    metrics = write_csv(out / "train_metrics.csv", TRAIN_COLUMNS, [_epoch_dict(r) for r in state.history])
    ckpt = out / "checkpoint.sdls"
    save_checkpoint(ckpt, state.generator, state.sensor, _checkpoint_config(cfg))
    from . import plotting
    fig = plotting.training_curve(state.history, out / "training_curve.png", f"s={cfg.s}, m={cfg.m}")
    finish(out, cfg, "train", args, [metrics, ckpt, fig])
    print(f"status {state.status} after {state.epoch} epoch(s)")
    return EXIT_OK


def _load_ckpt(path):
    ck = load_checkpoint(path)
    if ck.generator is None or ck.sensor is None:
        raise FormatError(f"{path}: checkpoint lacks a generator or sensor section")
    if ck.generator.n != ck.sensor.n:
        raise FormatError(f"{path}: generator output {ck.generator.n} != sensor input {ck.sensor.n}")
    return ck


def evaluate(G, M, X, cfg, shape, experiment="eval", stream_index=0):
    Y = sense(M, X).value
    rec = recover(Y, G, M, cfg.pml(), rng=seeding.stream(cfg.seed, "latent", 1, stream_index))
    return batch_record(X, rec.x, shape, experiment, 0, M.m, G.k, cfg.s)


def _table_line(r):
    return (f"PSNR {r.psnr_db:.2f} ± {r.psnr_se:.2f} dB | SSIM {r.ssim:.3f} ± {r.ssim_se:.3f} | "
            f"RE {r.re_db:.2f} ± {r.re_se:.2f} dB  (n={r.n_images})")


def cmd_eval(args):
    ck = _load_ckpt(args.checkpoint) if args.checkpoint else None
    cfg = resolve_config(args, ck.config if ck else None)
    _, _, test = load_data(cfg)
    out = _outdir(cfg)
    artifacts = []
    if ck is not None:
        if test.n != ck.generator.n:
            raise FormatError(f"test images have {test.n} pixels, model expects {ck.generator.n}")
        # the first batch and the whole test subset; identical when test_size <= batch_size
        batch = evaluate(ck.generator, ck.sensor, test.images[:cfg.batch_size], cfg, test.shape, "batch0")
        full = evaluate(ck.generator, ck.sensor, test.images, cfg, test.shape, "all")
        print("first batch: " + _table_line(batch))
        print("test subset: " + _table_line(full))
        artifacts.append(write_csv(out / "eval.csv", EVAL_COLUMNS, [batch.as_dict(), full.as_dict()]))
    if args.sparsity_sweep:
        s_values = [int(t) for t in args.sparsity_sweep.split(",")]
        rows = []
        for i, s in enumerate(s_values):
            sc = cfgmod.resolve({**asdict(cfg), "s": s}).validate()
            if ck is not None:
                # fixed model, test-time sparsity only
                r = evaluate(ck.generator, ck.sensor, test.images, sc, test.shape, f"s{s}", i)
            else:
                train_ds, val_ds, _ = load_data(sc)
                st = train_one(sc, train_ds, val_ds)
                r = evaluate(st.generator, st.sensor, test.images, sc, test.shape, f"s{s}", i)
            print(f"s={s:4d}  " + _table_line(r), flush=True)
            rows.append({"s": s, "re_db": r.re_db, "re_se": r.re_se, "psnr_db": r.psnr_db,
                         "psnr_se": r.psnr_se, "ssim": r.ssim, "ssim_se": r.ssim_se})
        artifacts.append(write_csv(out / "re_vs_s.csv", SPARSITY_COLUMNS, rows))
        from . import plotting
        artifacts.append(plotting.re_vs_sparsity([r["s"] for r in rows], [r["re_db"] for r in rows],
                                                 [r["re_se"] for r in rows], out / "re_vs_s.png"))
    if not artifacts:
        raise ConfigError("eval needs --checkpoint and/or --sparsity-sweep")
    finish(out, cfg, "eval", args, artifacts)
    return EXIT_OK


def _read_measurements(path, m):
    try:
        Y = np.loadtxt(path, delimiter=",", ndmin=2)
    except ValueError as exc:
        raise FormatError(f"{path}: measurements must be numeric CSV rows") from exc
    if Y.shape[1] != m:
        raise FormatError(f"{path}: rows have {Y.shape[1]} values, sensor produces m={m}")
    return Y


def cmd_reconstruct(args):
    ck = _load_ckpt(args.checkpoint)
    cfg = resolve_config(args, ck.config)
    G, M = ck.generator, ck.sensor
    X = None
    rows, cols = image_shape(G.n)
    channels = 1
    if args.measurements:
        Y = _read_measurements(args.measurements, M.m)[: args.count]
    else:
        cfg_img = cfgmod.resolve({**asdict(cfg), "dataset": args.images or cfg.dataset,
                                  "train_size": 0, "val_size": 0, "test_size": args.count})
        _, _, test = load_data(cfg_img)
        X = test.images
        rows, cols, channels = test.rows, test.cols, test.channels
        if X.shape[1] != G.n:
            raise FormatError(f"images have {X.shape[1]} pixels, checkpoint generator outputs {G.n}")
        Y = sense(M, X).value
    out = _outdir(cfg)
    rec = recover(Y, G, M, cfg.pml(), rng=seeding.stream(cfg.seed, "latent", 2))
    X_hat = np.clip(rec.x, 0.0, 1.0)
    shape = (rows, cols) if channels == 1 else (rows, cols, channels)
    grid_cols = int(np.ceil(np.sqrt(len(X_hat))))
    arts = [out / ("reconstruction.pgm" if channels == 1 else "reconstruction.ppm")]
    H, W = write_image_grid(X_hat, arts[0], rows, cols, channels, grid_cols=grid_cols)
    print(f"wrote {len(X_hat)} reconstructions as a {H}x{W} grid")
    table = []
    if X is not None:
        arts.append(out / ("ground_truth.pgm" if channels == 1 else "ground_truth.ppm"))
        write_image_grid(X, arts[-1], rows, cols, channels, grid_cols=grid_cols)
        psnr, ss, re = per_image_metrics(X, X_hat, shape)
    for i in range(len(X_hat)):
        row = {"index": i, "l0": l0(rec.z[i]), "objective": rec.f[i]}
        if X is not None:
            row.update(psnr_db=psnr[i], ssim=ss[i], re_db=re[i])
        table.append(row)
    arts.append(write_csv(out / "reconstruct.csv", RECON_COLUMNS, table))
    if X is not None:
        print(_table_line(batch_record(X, X_hat, shape)))
    finish(out, cfg, "reconstruct", args, arts)
    return EXIT_OK


def cmd_verify_regions(args):
    cfg = resolve_config(args, own=OPTION_KEYS["verify regions"])
    out = _outdir(cfg)
    rows, ok = [], True
    for i in range(args.arrangements):
        rng = seeding.stream(cfg.seed, "verify", i)
        if args.s is None:
            spec = theory.random_arrangement(args.k, args.h, seed=rng)
            count = theory.count_regions_exact(spec)
            closed = theory.general_position_count(args.h, args.k)
            vertex = theory.count_regions_vertices(spec) if args.h >= args.k and args.k <= 3 else None
        else:
            spec = theory.random_arrangement(args.k, args.h, args.s, seed=rng, restricted=True)
            count = theory.count_regions_restricted(spec)
            closed = theory.restricted_bound(args.k, args.s, args.h)
            vertex = None
        passed = count == closed and (vertex is None or vertex == count)
        ok &= passed
        rows.append({"index": i, "k": args.k, "h": args.h, "s": args.s, "count": count,
                     "closed_form": closed, "vertex_count": vertex, "pass": int(passed)})
        extra = f", vertex count {vertex}" if vertex is not None else ""
        print(f"{count}  (closed form {closed}{extra})  {'PASS' if passed else 'FAIL'}")
    arts = [write_csv(out / "regions.csv", REGION_COLUMNS, rows)]
    from . import plotting
    arts.append(plotting.region_counts(rows, out / "regions.png"))
    finish(out, cfg, "verify regions", args, arts)
    return EXIT_OK if ok else EXIT_FAIL


def cmd_verify_srec(args):
    cfg = resolve_config(args, own=OPTION_KEYS["verify srec"])
    out = _outdir(cfg)
    ms = parse_m_list(args.m_sweep)
    G = build_generator([args.k, args.h, args.n], seeding.stream(cfg.seed, "init"))
    reps = theory.srec_sweep(G, args.s, ms, args.alpha, args.trials, cfg.seed, cfg.threads)
    rows = []
    print(f"{'m':>5} {'violations':>10} {'rate':>8} {'2se':>8} {'analytic':>9}")
    for r in reps:
        print(f"{r.m:5d} {r.violations:10d} {r.empirical_rate:8.4f} {2 * r.std_err:8.4f} {r.bound_rate:9.4f}")
        rows.append({"m": r.m, "alpha": r.alpha, "trials": r.trials, "violations": r.violations,
                     "rate": r.empirical_rate,
                     "bound_note": f"se={r.std_err:.3g}; single-pair chi2 rate={r.bound_rate:.4g}"})
    mono = theory.nonincreasing_within([r.empirical_rate for r in reps], [r.std_err for r in reps])
    print(f"non-increasing in m within 2 SE: {'PASS' if mono else 'FAIL'}")
    arts = [write_csv(out / "srec.csv", SREC_COLUMNS, rows)]
    from . import plotting
    arts.append(plotting.srec_rates(reps, out / "srec.png"))
    finish(out, cfg, "verify srec", args, arts)
    return EXIT_OK if mono else EXIT_FAIL


def cmd_verify_sweep(args):
    cfg = resolve_config(args, own=OPTION_KEYS["verify sweep"])
    out = _outdir(cfg)
    ms = parse_m_list(args.m_sweep)
    hidden = cfgmod.parse_dims(args.hidden)
    planted = make_planted(args.k, args.s, args.n, args.instances, seeding.stream(cfg.seed, "init"),
                           hidden=hidden)
    rcfg = theory.recovery_config(args.s, T=args.T, beta=args.beta, beta_decay=args.beta_decay)
    rows = theory.sample_complexity_sweep(planted, ms, rcfg, args.instances, args.restarts,
                                          cfg.seed, cfg.threads)
    print(f"{'m':>5} {'median':>9} {'q25':>9} {'q75':>9}")
    for r in rows:
        print(f"{r.m:5d} {r.median_rel_err:9.4f} {r.q25:9.4f} {r.q75:9.4f}")
    mono = theory.nonincreasing_within([r.median_rel_err for r in rows], [r.std_err for r in rows])
    print(f"median error non-increasing in m within 2 SE: {'PASS' if mono else 'FAIL'}")
    arts = [write_csv(out / "sweep.csv", SWEEP_COLUMNS, [asdict(r) for r in rows])]
    from . import plotting
    arts.append(plotting.phase_curve(rows, out / "phase_curve.png"))
    finish(out, cfg, "verify sweep", args, arts)
    return EXIT_OK if mono else EXIT_FAIL


def cmd_rerun(args):
    """Replay a run from its manifest."""
    items = cfgmod.read_kv(args.manifest)
    if "command" not in items:
        raise FormatError(f"{args.manifest}: not a manifest (no 'command' key)")
    argv = items["command"].split() + ["--config", str(args.manifest)]
    for key, value in items.items():
        if key.startswith("opt."):
            argv += [f"--{key[4:].replace('_', '-')}", value]
    if args.out:
        argv += ["--out", args.out]
    return main(argv)


# -- parser --------------------------------------------------------------------

def _add_config_flags(p, skip=()):
    g = p.add_argument_group("experiment settings (override --config)")
    for name, typ in cfgmod.FIELD_TYPES.items():
        if name in skip:
            continue
        g.add_argument(f"--{name.replace('_', '-')}", dest=name, type=typ, default=None)
    p.add_argument("--config", help="key = value file (a manifest works too)")


def build_parser():
    p = argparse.ArgumentParser(prog="sdlss", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train generator (and sensor) with proximal meta-learning")
    _add_config_flags(t)
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("reconstruct", help="recover images from a checkpoint")
    r.add_argument("--checkpoint", required=True)
    src = r.add_mutually_exclusive_group()
    src.add_argument("--images", help="'synthetic', 'fashion-mnist' or an IDX file (default: config dataset)")
    src.add_argument("--measurements", help="CSV with one m-vector per row")
    r.add_argument("--count", type=int, default=64)
    _add_config_flags(r)
    r.set_defaults(func=cmd_reconstruct)

    e = sub.add_parser("eval", help="test-batch metrics, optionally as a function of sparsity")
    e.add_argument("--checkpoint")
    e.add_argument("--sparsity-sweep", help="comma list of s values")
    _add_config_flags(e)
    e.set_defaults(func=cmd_eval)

    v = sub.add_parser("verify", help="empirical checks of the counting and S-REC results")
    vs = v.add_subparsers(dest="kind", required=True)
    reg = vs.add_parser("regions", help="count hyperplane-arrangement regions")
    reg.add_argument("--k", type=int, default=2)
    reg.add_argument("--h", type=int, default=4)
    reg.add_argument("--s", type=int, default=None, help="count over coordinate s-subspaces")
    reg.add_argument("--arrangements", type=int, default=1)
    _add_config_flags(reg, skip=("k", "s"))
    reg.set_defaults(func=cmd_verify_regions)

    sr = vs.add_parser("srec", help="S-REC violation rate vs m")
    sr.add_argument("--k", type=int, default=16)
    sr.add_argument("--s", type=int, default=4)
    sr.add_argument("--h", type=int, default=32)
    sr.add_argument("--n", type=int, default=64)
    sr.add_argument("--m-sweep", default="2:64")
    sr.add_argument("--alpha", type=float, default=0.5)
    sr.add_argument("--trials", type=int, default=10000)
    _add_config_flags(sr, skip=("k", "s", "alpha"))
    sr.set_defaults(func=cmd_verify_srec)

    sw = vs.add_parser("sweep", help="recovery error vs m on a planted model")
    sw.add_argument("--k", type=int, default=20)
    sw.add_argument("--s", type=int, default=3)
    sw.add_argument("--n", type=int, default=100)
    sw.add_argument("--hidden", default="32")
    sw.add_argument("--m-sweep", default="1,2,5,10,20,40,100")
    sw.add_argument("--instances", type=int, default=30)
    sw.add_argument("--restarts", type=int, default=3)
    sw.add_argument("--T", type=int, default=500)
    sw.add_argument("--beta", type=float, default=0.1)
    sw.add_argument("--beta-decay", type=float, default=0.995)
    _add_config_flags(sw, skip=("k", "s", "hidden", "restarts", "T", "beta", "beta_decay"))
    sw.set_defaults(func=cmd_verify_sweep)

    rr = sub.add_parser("rerun", help="replay a run from its manifest")
    rr.add_argument("manifest")
    rr.add_argument("--out", help="write outputs here instead of the recorded directory")
    rr.set_defaults(func=cmd_rerun)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "verify":
        args_key = f"verify {args.kind}"
    else:
        args_key = args.command
    try:
        return args.func(args)
    except DatasetMissing as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except BudgetError as exc:
        print(f"refused: {exc}", file=sys.stderr)
        return EXIT_BUDGET
    except FormatError as exc:
        print(f"error: FormatError: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except (ConfigError, DimensionError) as exc:
        print(f"error: {args_key}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
