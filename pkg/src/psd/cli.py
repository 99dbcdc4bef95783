"""``psd`` command line: training, encoding, evaluation and preprocessing.

Experiment parameters come from a config file (see ``psd.config``); flags
select paths and methods only.  Exit status is 0 on success, 1 on
validation or I/O failure and 2 on a numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import data, formats
from . import eval as ev
from .config import load_config
from .errors import InputError, NumericalError, PSDError, ShapeError
from .solvers import infer_approx, infer_optimal_batch, solve_bpdn_cd_batch
from .training import train

ENCODE_METHODS = ("approx", "optimal", "exact-cd")


def _fmt(v):
    if isinstance(v, float):
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return repr(v)
    return str(v)


def write_csv(path, header, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    formats.atomic_write(path, buf.getvalue().encode())


def write_json(path, obj) -> None:
    def clean(v):
        if isinstance(v, float) and math.isinf(v):
            return "inf" if v > 0 else "-inf"
        if isinstance(v, dict):
            return {k: clean(x) for k, x in v.items()}
        if isinstance(v, (list, tuple)):
            return [clean(x) for x in v]
        return v

    formats.atomic_write(path, (json.dumps(clean(obj), indent=2) + "\n").encode())


def _json_path(path):
    return Path(path).with_suffix(".json")


def _load_images(paths):
    return [data.load_pgm(Path(p).read_bytes()) for p in paths]


def _load_patches(path, n=None):
    arr = formats.load_tensor(path)
    if arr.ndim != 2 or arr.shape[0] == 0:
        raise InputError(f"{path}: expected a non-empty (N, n) patch tensor, got shape {arr.shape}")
    if n is not None and arr.shape[1] != n:
        raise ShapeError(f"{path}: patch length {arr.shape[1]} does not match model input size {n}")
    return arr


def _training_patches(inputs, cfg):
    inputs = [Path(p) for p in inputs]
    tensors = [p for p in inputs if p.suffix.lower() == ".tnsr"]
    images = [p for p in inputs if p.suffix.lower() != ".tnsr"]
    chunks = [_load_patches(p) for p in tensors]
    if images:
        ps = data.patches_from_images(_load_images(images), cfg["patch_side"], cfg["patch_count"], cfg["seed"])
        chunks.append(ps.patches)
    if not chunks:
        raise InputError("no training inputs given")
    widths = {c.shape[1] for c in chunks}
    if len(widths) != 1:
        raise ShapeError(f"training inputs have different patch lengths {sorted(widths)}")
    patches = np.concatenate(chunks)
    if cfg.get("n") is not None and patches.shape[1] != cfg["n"]:
        raise ShapeError(f"config n = {cfg['n']} but patches have length {patches.shape[1]}")
    return patches


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    patches = _training_patches(args.inputs, cfg)
    rows = []
    state = train(
        patches,
        cfg.train_config,
        log_every=args.log_every,
        on_log=lambda *row: rows.append(row),
    )
    if not (np.all(np.isfinite(state.basis)) and np.all(np.isfinite(state.predictor.filters))):
        raise NumericalError("training produced non-finite parameters")
    log_path = Path(args.log) if args.log else Path(args.out).with_name("train_log.csv")
    write_csv(log_path, ["samples", "avg_loss", "avg_l1", "eta"], rows)
    formats.save_model(args.out, state.basis, state.predictor)
    print(f"trained on {len(patches)} patches, {state.samples_seen} steps, "
          f"{state.rejected_steps} rejected -> {args.out}")
    return 0


def encode(method, patches, basis, pred, cfg):
    h = cfg.hyper
    if method == "approx":
        return infer_approx(patches, pred)
    if method == "optimal":
        return infer_optimal_batch(patches, basis, pred, h, cfg.solve_options).code
    if method == "exact-cd":
        return solve_bpdn_cd_batch(patches, basis, ev.exact_lambda(h), cfg.solve_options).code
    raise InputError(f"unknown method {method!r}")


def cmd_encode(args) -> int:
    cfg = load_config(args.config)
    basis, pred = formats.load_model(args.model)
    patches = _load_patches(args.patches, basis.shape[0])
    codes = encode(args.method, patches, basis, pred, cfg)
    if not np.all(np.isfinite(codes)):
        raise NumericalError("encoding produced non-finite codes")
    formats.save_tensor(args.out, codes)
    return 0


def cmd_eval_snr(args) -> int:
    ref = formats.load_tensor(args.reference)
    approx = formats.load_tensor(args.approximation)
    rep = ev.snr_report(ref, approx)
    header = ["snr_db", "pooled_snr_db", "n_pairs", "n_zero_noise", "n_zero_signal"]
    row = [rep.mean_db, rep.pooled_db, rep.n_pairs, rep.n_zero_noise, rep.n_zero_signal]
    write_csv(args.out, header, [row])
    write_json(_json_path(args.out), dict(zip(header, row)))
    return 0


def cmd_eval_sparsity(args) -> int:
    codes = formats.load_tensor(args.codes)
    header = ["avg_l1", "zero_fraction", "n_codes", "m"]
    c = np.atleast_2d(codes)
    row = [ev.avg_l1(c), ev.zero_fraction(c), c.shape[0], c.shape[1]]
    write_csv(args.out, header, [row])
    write_json(_json_path(args.out), dict(zip(header, row)))
    return 0


def cmd_eval_stability(args) -> int:
    files = sorted(Path(args.frames).glob("*.tnsr"))
    if len(files) < 2:
        raise InputError(f"{args.frames}: need at least 2 frame tensors, found {len(files)}")
    frames = [formats.load_tensor(f) for f in files]
    if args.kind == "exact" or args.target_zero_fraction is None:
        threshold = ev.EXACT_ZERO
    else:
        threshold = ev.calibrate_threshold(np.concatenate(frames), args.target_zero_fraction)
    if args.random_pairs:
        if args.config is None:
            raise InputError("--random-pairs needs --config for the seed")
        stats = ev.random_pair_transition_matrix(frames, threshold, load_config(args.config)["seed"])
    else:
        stats = ev.sign_transition_matrix(frames, threshold)
    table = stats.table()
    write_csv(args.out, table[0], table[1:])
    write_json(
        _json_path(args.out),
        {
            "states": list(ev.STATES),
            "threshold": threshold,
            "counts": stats.counts.tolist(),
            "probs": stats.probs.tolist(),
            "change_probability": stats.change_probability,
        },
    )
    return 0


def cmd_eval_bench(args) -> int:
    cfg = load_config(args.config)
    basis, pred = formats.load_model(args.model)
    patches = _load_patches(args.patches, basis.shape[0])
    rep = ev.bench_inference(
        patches, (basis, pred), cfg.hyper, cfg.solve_options,
        repetitions=args.repetitions, include_optimal=args.include_optimal,
    )
    header, rows = rep.raw_rows()
    header = [*header, "speedup", "batch_size", "m", "n"]
    rows = [[*r, rep.speedup, rep.batch_size, rep.m, rep.n] for r in rows]
    write_csv(args.out, header, rows)
    summary = {k: {"median_s": rep.median(k), "mean_s": rep.mean(k), "std_s": rep.std(k),
                   "raw_s": rep.timings[k]} for k in rep.timings}
    write_json(_json_path(args.out), {"speedup": rep.speedup, "batch_size": rep.batch_size,
                                      "m": rep.m, "n": rep.n, "algorithms": summary})
    print(f"speedup (median exact_cd / median approx): {rep.speedup:.1f}x")
    return 0


def cmd_eval_features(args) -> int:
    cfg = load_config(args.config)
    basis, pred = formats.load_model(args.model)
    if args.method == "approx":
        encoder = ev.ApproxEncoder(pred)
    else:
        encoder = ev.ExactEncoder(basis, ev.exact_lambda(cfg.hyper), cfg.solve_options)
    k = int(round(math.sqrt(basis.shape[0])))
    if k * k != basis.shape[0]:
        raise ShapeError(f"model input size {basis.shape[0]} is not a square patch")
    feats = []
    for img in _load_images(args.images):
        if not args.no_preprocess:
            img = data.preprocess_recognition(img)
        feats.append(ev.extract_features(img, encoder, k, args.grid))
    feats = np.stack(feats)
    formats.save_tensor(args.out, feats)
    if args.labels:
        labels = np.array(Path(args.labels).read_text().split())
        if len(labels) != len(feats):
            raise InputError(f"{len(labels)} labels for {len(feats)} images")
        rng = np.random.default_rng(cfg["seed"])
        order = rng.permutation(len(feats))
        n_test = int(round(args.test_fraction * len(feats)))
        test, tr = order[:n_test], order[n_test:]
        clf = ev.train_linear_classifier(feats[tr], labels[tr], args.l2_weight, cfg["epochs"], cfg["seed"])
        header = ["train_accuracy", "test_accuracy", "n_train", "n_test"]
        row = [clf.accuracy(feats[tr], labels[tr]),
               clf.accuracy(feats[test], labels[test]) if n_test else float("nan"), len(tr), n_test]
        report = args.report or str(Path(args.out).with_suffix(".csv"))
        write_csv(report, header, [row])
        write_json(_json_path(report), dict(zip(header, row)))
    return 0


def cmd_patches(args) -> int:
    cfg = load_config(args.config)
    ps = data.patches_from_images(
        _load_images(args.images), cfg["patch_side"], cfg["patch_count"], cfg["seed"],
        normalize=not args.no_normalize,
    )
    formats.save_tensor(args.out, ps.patches)
    return 0


def cmd_preprocess(args) -> int:
    img = data.load_pgm(Path(args.image).read_bytes())
    out = data.preprocess_recognition(img, args.long_side, args.pad_to)
    formats.save_tensor(args.out, out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="psd", description=__doc__.splitlines()[0], formatter_class=fmt)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="learn a dictionary and predictor", formatter_class=fmt)
    p.add_argument("--config", required=True, help="experiment config file")
    p.add_argument("--out", required=True, help="output PSD1 model path")
    p.add_argument("--log", default=None, help="training log CSV (default: train_log.csv next to --out)")
    p.add_argument("--log-every", type=int, default=1000, help="samples per log line")
    p.add_argument("inputs", nargs="+", help="PGM images and/or TNSR patch tensors")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("encode", help="encode a patch tensor", formatter_class=fmt)
    p.add_argument("--model", required=True, help="PSD1 model path")
    p.add_argument("--config", required=True, help="experiment config file")
    p.add_argument("--method", choices=ENCODE_METHODS, default="approx", help="inference method")
    p.add_argument("patches", help="input TNSR patch tensor (N, n)")
    p.add_argument("out", help="output TNSR code tensor (N, m)")
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("patches", help="sample normalized patches from PGM images", formatter_class=fmt)
    p.add_argument("--config", required=True, help="experiment config file")
    p.add_argument("--out", required=True, help="output TNSR patch tensor")
    p.add_argument("--no-normalize", action="store_true", help="skip per-patch standardization")
    p.add_argument("images", nargs="+", help="PGM images")
    p.set_defaults(func=cmd_patches)

    p = sub.add_parser("preprocess", help="recognition preprocessing of one PGM image", formatter_class=fmt)
    p.add_argument("--long-side", type=int, default=151, help="resize target for the longest side")
    p.add_argument("--pad-to", type=int, default=143, help="output canvas side")
    p.add_argument("image", help="input PGM image")
    p.add_argument("out", help="output TNSR image tensor")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("eval", help="measurements", formatter_class=fmt)
    esub = p.add_subparsers(dest="measure", required=True)

    q = esub.add_parser("snr", help="average SNR of approximation codes against reference codes", formatter_class=fmt)
    q.add_argument("--reference", required=True, help="reference TNSR codes")
    q.add_argument("--approximation", required=True, help="approximation TNSR codes")
    q.add_argument("--out", required=True, help="report CSV (JSON mirror written alongside)")
    q.set_defaults(func=cmd_eval_snr)

    q = esub.add_parser("sparsity", help="average l1 norm and zero fraction", formatter_class=fmt)
    q.add_argument("codes", help="TNSR codes")
    q.add_argument("--out", required=True, help="report CSV (JSON mirror written alongside)")
    q.set_defaults(func=cmd_eval_sparsity)

    q = esub.add_parser("stability", help="sign-transition statistics across frames", formatter_class=fmt)
    q.add_argument("--frames", required=True, help="directory of per-frame TNSR code tensors, sorted by name")
    q.add_argument("--kind", choices=("predictor", "exact"), default="predictor", help="origin of the codes")
    q.add_argument("--target-zero-fraction", type=float, default=None,
                   help="calibrate the predictor threshold to this zero fraction")
    q.add_argument("--random-pairs", action="store_true", help="pair frames in a seeded random order")
    q.add_argument("--config", default=None, help="config supplying the seed for --random-pairs")
    q.add_argument("--out", required=True, help="report CSV (JSON mirror written alongside)")
    q.set_defaults(func=cmd_eval_stability)

    q = esub.add_parser("bench", help="time approximate against exact inference", formatter_class=fmt)
    q.add_argument("--model", required=True, help="PSD1 model path")
    q.add_argument("--config", required=True, help="experiment config file")
    q.add_argument("--patches", required=True, help="TNSR patch tensor")
    q.add_argument("--repetitions", type=int, default=5, help="timed repetitions per algorithm")
    q.add_argument("--include-optimal", action="store_true", help="also time compound-loss inference")
    q.add_argument("--out", required=True, help="report CSV (JSON mirror written alongside)")
    q.set_defaults(func=cmd_eval_bench)

    q = esub.add_parser("features", help="convolutional features, rectified and pooled", formatter_class=fmt)
    q.add_argument("--model", required=True, help="PSD1 model path")
    q.add_argument("--config", required=True, help="experiment config file")
    q.add_argument("--method", choices=("approx", "exact-cd"), default="approx", help="encoder")
    q.add_argument("--grid", type=int, default=30, help="pooled spatial resolution")
    q.add_argument("--no-preprocess", action="store_true", help="images are already preprocessed")
    q.add_argument("--labels", default=None, help="whitespace-separated labels, one per image")
    q.add_argument("--test-fraction", type=float, default=0.5, help="held-out share for the classifier")
    q.add_argument("--l2-weight", type=float, default=1e-4, help="classifier L2 penalty")
    q.add_argument("--report", default=None, help="classifier report CSV")
    q.add_argument("--out", required=True, help="output TNSR feature matrix")
    q.add_argument("images", nargs="+", help="PGM images")
    q.set_defaults(func=cmd_eval_features)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"psd: numerical failure: {exc}", file=sys.stderr)
        return 2
    except (PSDError, OSError, ValueError) as exc:
        print(f"psd: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
