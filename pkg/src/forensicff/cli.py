"""Command line interface: one subcommand per pipeline, JSON/CSV/PNG outputs.

Exit codes: 0 success, 1 computation error, 2 usage/config error. All numeric
outputs are JSON with fixed field order and 9-significant-digit floats, so a
rerun with identical configuration is byte-identical.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from pathlib import Path

from . import __version__
from .colorstats import color_conditional_fraction, run_color_test
from .errors import ForensicError, UsageError
from .evaluation import evaluate, score_images
from .explain import dump_explanation_raw, extract_patch, lrp_max_explain, write_heatmap_png
from .fixture import FixtureSpec, emit_fixture
from .imageio import load_png, save_png, scan_dataset
from .jsonutil import dump_json, load_json
from .lrp import DEFAULT_EPS, dump_relevance, lrp_backward
from .model import DropoutMask, forward, fuse_batchnorm, load_model_dir
from .pipeline import prepare
from .relevance import (
    FeatureMapId,
    compute_ff_rs,
    default_k,
    read_fmaps,
    read_omega,
    select,
    write_fmaps,
    write_omega,
)

_DEFAULT_THREADS = max(1, os.cpu_count() or 1)


def _echo_config(args) -> dict:
    skip = {"func", "config"}
    out = {}
    for key, value in sorted(vars(args).items()):
        if key in skip:
            continue
        out[key] = str(value) if isinstance(value, Path) else value
    return out


def _load_fused(model_dir):
    graph = load_model_dir(model_dir)
    return fuse_batchnorm(graph)


def _require_dir(path, what: str) -> Path:
    path = Path(path)
    if not path.is_dir():
        raise UsageError(f"config error: {what} directory does not exist: {path}")
    return path


def _dataset_paths(args, need_real: bool = True):
    data_root = getattr(args, "data", None)
    fake = args.fake or (Path(data_root) / "fake" if data_root else None)
    fake_dir = _require_dir(fake, "fake")
    real_dir = None
    if need_real:
        real = getattr(args, "real", None) or (Path(data_root) / "real" if data_root else None)
        real_dir = _require_dir(real, "real")
    entries = scan_dataset(real_dir=real_dir, fake_dir=fake_dir, limit=args.limit)
    real_paths = [p for p, label in entries if label == 0]
    fake_paths = [p for p, label in entries if label == 1]
    return real_paths, fake_paths


def _seed_value(args) -> float | None:
    return None if args.seed_mode == "logit" else 1.0


# ---------------------------------------------------------------------------
# subcommand handlers


def cmd_fixture(args) -> int:
    spec = FixtureSpec(
        image_size=args.image_size,
        n_real=args.n_real,
        n_fake=args.n_fake,
        patch_size=args.patch_size,
        texture_channel=not args.no_texture_channel,
        rng_seed=args.seed,
    )
    emit_fixture(spec, args.out)
    print(f"fixture written to {args.out}: model + {spec.n_real} real / {spec.n_fake} fake images")
    return 0


def cmd_rank(args) -> int:
    graph = _load_fused(args.model)
    _, fake_paths = _dataset_paths(args, need_real=False)
    table = compute_ff_rs(
        graph, fake_paths, eps=args.eps, seed=_seed_value(args), threads=args.threads
    )
    write_omega(table, args.out, config=_echo_config(args))
    print(f"omega over {table.n_images} counterfeits ({len(table.entries)} feature maps)")
    for fmap, omega in table.ranked()[:20]:
        print(f"  {fmap.key():>16s}  {omega:.9g}")
    return 0


def cmd_select(args) -> int:
    table = read_omega(args.omega)
    k = args.k if args.k is not None else default_k(len(table.entries))
    exclude = read_fmaps(args.exclude).ids if args.exclude else None
    fset = select(table, mode=args.mode, k=k, seed=args.seed, exclude=exclude)
    write_fmaps(fset, args.out, config=_echo_config(args))
    print(f"selected {fset.k} feature maps ({fset.mode}): "
          + ", ".join(f.key() for f in fset.ids[:10]))
    return 0


def cmd_ablate(args) -> int:
    graph = _load_fused(args.model)
    real_paths, fake_paths = _dataset_paths(args)
    fset = read_fmaps(args.fmaps)
    mask = DropoutMask((f.layer, f.channel) for f in fset.ids)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    config = _echo_config(args)

    baseline = evaluate(graph, real_paths, fake_paths, threads=args.threads)
    baseline.config = config
    dump_json(baseline.to_dict(), out_dir / "baseline.json")

    threshold = None if args.recalibrate else baseline.threshold
    masked = evaluate(
        graph, real_paths, fake_paths, mask=mask, threshold=threshold, threads=args.threads
    )
    masked.config = config
    dump_json(masked.to_dict(), out_dir / "masked.json")

    delta = {
        "delta_ap": masked.ap - baseline.ap,
        "delta_acc_fake": masked.acc_fake - baseline.acc_fake,
        "delta_acc_real": masked.acc_real - baseline.acc_real,
        "config": config,
    }
    dump_json(delta, out_dir / "delta.json")
    print(
        f"dropout of {len(mask)} feature maps: "
        f"dAP={delta['delta_ap']:+.2f} dacc_fake={delta['delta_acc_fake']:+.2f} "
        f"dacc_real={delta['delta_acc_real']:+.2f}"
    )
    return 0


def cmd_explain(args) -> int:
    graph = _load_fused(args.model)
    image_path = Path(args.image)
    if not image_path.is_file():
        raise UsageError(f"config error: image does not exist: {image_path}")
    pixels = load_png(image_path)
    fmap = FeatureMapId.parse(args.fmap)
    explanation = lrp_max_explain(graph, pixels, fmap, eps=args.eps)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_heatmap_png(explanation.values, out_dir / "heatmap.png")
    patch, corner = extract_patch(pixels, explanation, args.side)
    save_png(patch, out_dir / "patch.png")
    if args.raw:
        dump_explanation_raw(explanation, out_dir / "explanation.f32")
    if args.dump_relevance:
        record = lrp_backward(graph, forward(graph, prepare(graph, pixels)), eps=args.eps)
        dump_relevance(record, args.dump_relevance)
    meta = {
        "fmap": {"layer": fmap.layer, "channel": fmap.channel},
        "feature_argmax": list(explanation.feature_argmax),
        "argmax_input": list(explanation.argmax_input),
        "seed_relevance": explanation.seed_relevance,
        "degenerate": explanation.degenerate,
        "patch_corner": list(corner),
        "patch_side": args.side,
        "config": _echo_config(args),
    }
    dump_json(meta, out_dir / "meta.json")
    print(
        f"explained {fmap.key()}: feature argmax {explanation.feature_argmax}, "
        f"input argmax {explanation.argmax_input}"
        + (" (degenerate)" if explanation.degenerate else "")
    )
    return 0


def cmd_colortest(args) -> int:
    graph = _load_fused(args.model)
    _, fake_paths = _dataset_paths(args, need_real=False)
    fset = read_fmaps(args.fmaps)
    results = run_color_test(
        graph,
        fake_paths,
        fset.ids,
        alpha=args.alpha,
        correction=not args.no_correction,
        threads=args.threads,
    )
    percent = color_conditional_fraction(results, args.alpha)
    payload = {
        "feature_maps": [
            {
                "layer": r.fmap.layer,
                "channel": r.fmap.channel,
                "median_baseline": r.median_baseline,
                "median_grayscale": r.median_grayscale,
                "chi2": r.chi2,
                "p": r.p_value,
                "color_conditional": r.color_conditional,
                "degenerate": r.degenerate,
            }
            for r in results
        ],
        "summary": {"alpha": args.alpha, "percent_color_conditional": percent},
        "config": _echo_config(args),
    }
    dump_json(payload, args.out)
    print(f"{percent:.1f}% of {len(results)} feature maps are color-conditional (alpha={args.alpha})")
    return 0


def cmd_eval(args) -> int:
    graph = _load_fused(args.model)
    real_paths, fake_paths = _dataset_paths(args)
    mask = None
    if args.mask:
        fset = read_fmaps(args.mask)
        mask = DropoutMask((f.layer, f.channel) for f in fset.ids)
    threshold = None
    if args.fixed_threshold:
        threshold = float(load_json(args.fixed_threshold)["threshold"])
    transform = "grayscale" if args.grayscale else None
    crop_hw = tuple(graph.input_shape[1:]) if args.center_crop else None
    report = evaluate(
        graph,
        real_paths,
        fake_paths,
        mask=mask,
        transform=transform,
        threshold=threshold,
        threads=args.threads,
        crop_hw=crop_hw,
    )
    report.config = _echo_config(args)
    dump_json(report.to_dict(), args.out)
    if args.csv:
        _write_scores_csv(
            args.csv, graph, real_paths, fake_paths, mask, transform, args.threads, crop_hw
        )
    print(
        f"AP={report.ap:.2f} acc_real={report.acc_real:.2f} acc_fake={report.acc_fake:.2f} "
        f"threshold={report.threshold:.9g} median_prob_fake={report.median_prob_fake:.9g}"
    )
    return 0


def _write_scores_csv(path, graph, real_paths, fake_paths, mask, transform, threads, crop_hw):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["path", "label", "transform", "probability"])
        for paths, label in ((real_paths, "real"), (fake_paths, "fake")):
            for p in paths:
                scores, _ = score_images(graph, [p], mask, transform, threads=1, crop_hw=crop_hw)
                if scores:
                    writer.writerow([str(p), label, transform or "none", f"{scores[0]:.9g}"])


# ---------------------------------------------------------------------------
# parser


# flag groups that must be satisfied (any member) after merging the --config
# file; kept out of argparse's required= so a config file alone can satisfy them
_REQUIRED = {
    "fixture": (("out",),),
    "rank": (("model",), ("fake", "data"), ("out",)),
    "select": (("omega",), ("out",)),
    "ablate": (("model",), ("fake", "data"), ("real", "data"), ("fmaps",), ("out",)),
    "explain": (("model",), ("image",), ("fmap",), ("out",)),
    "colortest": (("model",), ("fake", "data"), ("fmaps",), ("out",)),
    "eval": (("model",), ("fake", "data"), ("real", "data"), ("out",)),
}


def _add_common(sub, model=True, data="both"):
    sub.add_argument("--config", type=Path, default=None,
                     help="JSON file supplying any flag as a default")
    sub.add_argument("--threads", type=int, default=_DEFAULT_THREADS,
                     help="image-level parallelism (1 = reference serial path)")
    if model:
        sub.add_argument("--model", type=Path,
                         help="directory containing model.json and weights.bin")
    if data in ("both", "fake"):
        sub.add_argument("--data", type=Path,
                         help="dataset root holding real/ and fake/ subdirectories")
        sub.add_argument("--fake", type=Path, help="fake/counterfeit image dir")
    if data == "both":
        sub.add_argument("--real", type=Path, help="real image dir")
    if data in ("both", "fake"):
        sub.add_argument("--limit", type=int, default=None, help="per-class image cap")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="forensicff",
        description="Discover and characterize forensic feature maps in counterfeit detectors.",
    )
    parser.add_argument("--version", action="version", version=f"forensicff {__version__}")
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("fixture", help="emit the planted-feature model and corpus")
    p.add_argument("--out", type=Path)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--image-size", type=int, default=64)
    p.add_argument("--n-real", type=int, default=64)
    p.add_argument("--n-fake", type=int, default=64)
    p.add_argument("--patch-size", type=int, default=12)
    p.add_argument("--no-texture-channel", action="store_true")
    p.add_argument("--config", type=Path, default=None)
    p.set_defaults(func=cmd_fixture)

    p = subs.add_parser("rank", help="compute the per-feature-map relevance statistic")
    _add_common(p, data="fake")
    p.add_argument("--eps", type=float, default=DEFAULT_EPS)
    p.add_argument("--seed-mode", choices=["logit", "unit"], default="logit",
                   help="relevance seed: the logit or a unit constant")
    p.add_argument("-o", "--out", type=Path, help="omega.json output")
    p.set_defaults(func=cmd_rank)

    p = subs.add_parser("select", help="pick top/low/random feature-map sets")
    p.add_argument("--config", type=Path, default=None)
    p.add_argument("--omega", type=Path)
    p.add_argument("--mode", choices=["top", "low", "random"], default="top")
    p.add_argument("-k", type=int, default=None, help="set size (default ~0.5%% of maps)")
    p.add_argument("--seed", type=int, default=None, help="RNG seed for random mode")
    p.add_argument("--exclude", type=Path, default=None,
                   help="fmaps.json whose members are excluded from the pool")
    p.add_argument("-o", "--out", type=Path, help="fmaps.json output")
    p.set_defaults(func=cmd_select)

    p = subs.add_parser("ablate", help="baseline vs feature-map-dropout evaluation")
    _add_common(p)
    p.add_argument("--fmaps", type=Path)
    p.add_argument("--recalibrate", action="store_true",
                   help="recalibrate the oracle threshold on the masked run")
    p.add_argument("-o", "--out", type=Path, help="output directory")
    p.set_defaults(func=cmd_ablate)

    p = subs.add_parser("explain", help="peak-relevance pixel explanation of one feature map")
    _add_common(p, data=None)
    p.add_argument("--image", type=Path)
    p.add_argument("--fmap", type=str, help="layer:channel")
    p.add_argument("--side", type=int, default=64, help="patch crop side in pixels")
    p.add_argument("--eps", type=float, default=DEFAULT_EPS)
    p.add_argument("--raw", action="store_true",
                   help="also dump the explanation as raw float32 + JSON sidecar")
    p.add_argument("--dump-relevance", type=Path, default=None,
                   help="directory for a raw per-layer relevance dump")
    p.add_argument("-o", "--out", type=Path, help="output directory")
    p.set_defaults(func=cmd_explain)

    p = subs.add_parser("colortest", help="median tests of activations under color ablation")
    _add_common(p, data="fake")
    p.add_argument("--fmaps", type=Path)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--no-correction", action="store_true",
                   help="disable the Yates continuity correction")
    p.add_argument("-o", "--out", type=Path, help="colortest.json output")
    p.set_defaults(func=cmd_colortest)

    p = subs.add_parser("eval", help="dataset evaluation with optional mask/grayscale")
    _add_common(p)
    p.add_argument("--mask", type=Path, default=None, help="fmaps.json to drop during forward")
    p.add_argument("--grayscale", action="store_true", help="apply color ablation")
    p.add_argument("--fixed-threshold", type=Path, default=None,
                   help="reuse the threshold from a prior report.json")
    p.add_argument("--center-crop", action="store_true",
                   help="center-crop images to the model's declared input size")
    p.add_argument("--csv", type=Path, default=None, help="also write per-image scores.csv")
    p.add_argument("-o", "--out", type=Path, help="report.json output")
    p.set_defaults(func=cmd_eval)

    return parser


def _apply_config_file(parser: argparse.ArgumentParser, argv: list[str]) -> argparse.Namespace:
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        try:
            overrides = load_json(args.config)
        except Exception as exc:
            raise UsageError(f"config error: cannot read {args.config}: {exc}") from exc
        if not isinstance(overrides, dict):
            raise UsageError(f"config error: {args.config} must hold a JSON object")
        fresh = build_parser()
        for action in fresh._subparsers._group_actions:  # type: ignore[union-attr]
            sub = action.choices.get(args.command)
            if sub is not None:
                known = {a.dest for a in sub._actions}
                unknown = set(overrides) - known
                if unknown:
                    raise UsageError(f"config error: unknown keys in config: {sorted(unknown)}")
                sub.set_defaults(**overrides)
        args = fresh.parse_args(argv)  # explicit flags still win over config values
    missing = [
        group[0]
        for group in _REQUIRED.get(args.command, ())
        if all(getattr(args, dest, None) is None for dest in group)
    ]
    if missing:
        raise UsageError(
            "config error: missing required options: " + ", ".join(f"--{d}" for d in missing)
        )
    return args


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = _apply_config_file(parser, argv)
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ForensicError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
