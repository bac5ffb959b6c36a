"""``treeadapt`` command line: synth, train, eval, predict, ablate.

Exit codes: 0 ok, 1 bad input or config, 2 usage, 3 missing file, 4 numeric failure.
Run directories default to ``$TREEADAPT_OUT/<command>`` (``TREEADAPT_OUT`` defaults to ``runs``).
"""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from dataclasses import fields
from pathlib import Path

from . import __version__
from . import data as D
from .serialization import FormatError, read_kv, save_density_png, write_density, write_kv

EXIT_OK, EXIT_INPUT, EXIT_USAGE, EXIT_MISSING, EXIT_NUMERIC = 0, 1, 2, 3, 4
OUT_ENV = "TREEADAPT_OUT"

ABLATIONS = {
    "none": {},
    "no-hcdfa": {"use_hcdfa": False},
    "no-adv": {"use_adv": False},
    "single-scale-dab": {"dab_scales": (4,), "hcdfa_scales": (4,)},
    "bi-da": {"bidirectional": True},
    "l2-loss": {"loss": "l2"},
    "k=1": {"k_shot": 1},
    "k=5": {"k_shot": 5},
    "k=10": {"k_shot": 10},
}
for _b1 in (0.1, 0.3, 0.5, 0.7, 0.9):
    ABLATIONS[f"beta={_b1:.1f}"] = {"beta1": _b1, "beta2": round(1.0 - _b1, 1)}


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def artifact_version() -> str:
    """Package version plus a short content hash of the installed sources."""
    h = hashlib.sha1()
    for p in sorted(Path(__file__).parent.glob("*.py")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return f"{__version__}+{h.hexdigest()[:10]}"


def run_dir(args) -> Path:
    out = Path(args.out) if args.out else Path(os.environ.get(OUT_ENV, "runs")) / args.command
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_manifest(out: Path, args, resolved: dict, seed=None) -> Path:
    manifest = {
        "command": args.command,
        "argv": getattr(args, "argv", None),
        "config_path": getattr(args, "config", None),
        "config": resolved,
        "seed": seed,
        "version": artifact_version(),
        "output_dir": str(out.resolve()),
    }
    path = out / "manifest.json"
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, default=str)
    return path


def _need(path, what="file") -> Path:
    p = Path(path)
    if not p.exists():
        raise CliError(EXIT_MISSING, f"missing {what}: {p}")
    return p


def _parse_sets(pairs) -> dict:
    from .serialization import _parse_value

    out = {}
    for item in pairs or ():
        if "=" not in item:
            raise CliError(EXIT_USAGE, f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = _parse_value(v)
    return out


def resolve_train_config(args, extra: dict | None = None):
    """File values, then explicit flags, then ``extra`` overrides."""
    from .trainer import TrainConfig

    values = {}
    if args.config:
        values.update(read_kv(_need(args.config, "config file")))
    for key in ("profile", "k_shot", "seed", "epochs", "mode"):
        v = getattr(args, key, None)
        if v is not None:
            values[key] = v
    values.update(_parse_sets(args.set))
    values.update(extra or {})
    known = {f.name for f in fields(TrainConfig)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise CliError(EXIT_INPUT, f"unknown config keys: {unknown}")
    try:
        return TrainConfig.from_dict(values)
    except (TypeError, ValueError) as exc:
        raise CliError(EXIT_INPUT, f"bad config: {exc}") from None


# --- subcommands -------------------------------------------------------------

def cmd_synth(args) -> int:
    out = run_dir(args)
    src = D.load_profile(_need(args.source_profile)) if args.source_profile else D.SOURCE_PROFILE
    tgt = D.load_profile(_need(args.target_profile)) if args.target_profile else D.TARGET_PROFILE
    resolved = {"source_profile": src.to_dict(), "target_profile": tgt.to_dict(), "size": args.size,
                "n_source": args.n_source, "n_target": args.n_target, "n_test": args.n_test}
    write_manifest(out, args, resolved, args.seed)
    for k, (prof, n_train) in enumerate(((src, args.n_source), (tgt, args.n_target))):
        root = out / prof.name
        samples = D.generate_synthetic(prof, n_train + args.n_test, args.size, seed=args.seed * 2 + k)
        D.save_dataset(samples[:n_train], root, "train", prof)
        D.save_dataset(samples[n_train:], root, "test", prof)
        print(f"{prof.name}: {n_train} train / {args.n_test} test -> {root}")
    return EXIT_OK


def _train_into(out: Path, cfg, args):
    from .trainer import TrainingDiverged, train

    src, tgt = _need(args.source, "source dataset"), _need(args.target, "target dataset")
    write_kv(out / "config.txt", cfg.to_dict())
    try:
        return train(cfg, src, tgt, out, resume=args.resume)
    except TrainingDiverged as exc:
        diag = out / "diverged.json"
        with open(diag, "w") as fh:
            json.dump(exc.record, fh, indent=2)
        raise CliError(EXIT_NUMERIC, f"training diverged; diagnostics in {diag}") from None


def cmd_train(args) -> int:
    out = run_dir(args)
    cfg = resolve_train_config(args)
    write_manifest(out, args, cfg.to_dict(), cfg.seed)
    ckpt = _train_into(out, cfg, args)
    print(f"checkpoint: {ckpt}")
    return EXIT_OK


def _eval_config(args):
    from .evaluation import EvalConfig

    try:
        return EvalConfig(match_radius=args.match_radius, peak_threshold=args.peak_threshold,
                          peak_min_distance=args.peak_min_distance, r2_variant=args.r2_variant)
    except ValueError as exc:
        raise CliError(EXIT_INPUT, str(exc)) from None


def _report_line(r) -> str:
    return (f"mae={r.mae:.4f} rmse={r.rmse:.4f} r2={r.r2:.4f} "
            f"precision={r.precision:.4f} recall={r.recall:.4f} f1={r.f1:.4f}")


def cmd_eval(args) -> int:
    from dataclasses import asdict

    from .evaluation import evaluate

    out = run_dir(args)
    ecfg = _eval_config(args)
    write_manifest(out, args, asdict(ecfg))
    ckpt = _need(args.checkpoint, "checkpoint")
    dataset = D.load_dataset(_need(args.data, "dataset"), args.split, domain="target")
    if not dataset:
        raise CliError(EXIT_MISSING, f"no images under {Path(args.data) / args.split}")
    report = evaluate(ckpt, dataset, ecfg, out / "metrics.json")
    print(_report_line(report))
    return EXIT_OK


def cmd_predict(args) -> int:
    from .evaluation import predict_density
    from .trainer import load_model

    out = run_dir(args)
    write_manifest(out, args, {"checkpoint": args.checkpoint, "image": args.image})
    model = load_model(_need(args.checkpoint, "checkpoint"))
    image = D.load_image(_need(args.image, "image"))
    dens = predict_density(model, image).astype("float32")
    stem = Path(args.image).stem
    path = write_density(out / f"{stem}.density", dens)
    if not args.no_png:
        save_density_png(out / f"{stem}_density.png", dens)
    count = float(dens.sum(dtype="float64"))
    print(f"{count:.6f}")
    print(f"density: {path}", file=sys.stderr)
    return EXIT_OK


def cmd_ablate(args) -> int:
    from dataclasses import asdict

    from .evaluation import evaluate

    if args.preset not in ABLATIONS:
        raise CliError(EXIT_USAGE, f"unknown preset {args.preset!r}; choose from {', '.join(ABLATIONS)}")
    out = run_dir(args)
    cfg = resolve_train_config(args, ABLATIONS[args.preset])
    write_manifest(out, args, {"preset": args.preset, "train": cfg.to_dict()}, cfg.seed)
    if args.dry_run:
        print(json.dumps(cfg.to_dict(), default=list))
        return EXIT_OK
    ckpt = _train_into(out, cfg, args)
    ecfg = _eval_config(args)
    test = D.load_dataset(args.target, "test", domain="target")
    report = evaluate(ckpt, test, ecfg, out / "metrics.json")
    with open(out / "ablation.json", "w") as fh:
        json.dump({"preset": args.preset, "overrides": ABLATIONS[args.preset],
                   "metrics": report.to_dict(), "eval": asdict(ecfg)}, fh, indent=2, default=list)
    print(f"{args.preset}: {_report_line(report)}")
    return EXIT_OK


# --- parser ------------------------------------------------------------------

def _train_flags(p):
    p.add_argument("--source", required=True, help="source dataset root (with train/)")
    p.add_argument("--target", required=True, help="target dataset root (with train/ and test/)")
    p.add_argument("--config", help="key = value file; flags override it")
    p.add_argument("--profile", choices=("toy", "paper"))
    p.add_argument("--k-shot", dest="k_shot", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--mode", choices=("adapt", "source_only"))
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")
    p.add_argument("--resume", help="checkpoint to continue from")


def _eval_flags(p):
    p.add_argument("--match-radius", type=float, default=15.0)
    p.add_argument("--peak-threshold", type=float, default=0.25)
    p.add_argument("--peak-min-distance", type=int, default=8)
    p.add_argument("--r2-variant", choices=("standard", "paper"), default="standard")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="treeadapt", description="Few-shot cross-domain tree counting.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic source/target dataset pair")
    p.add_argument("--source-profile", help="profile.json for the source domain")
    p.add_argument("--target-profile", help="profile.json for the target domain")
    p.add_argument("--n-source", type=int, default=200)
    p.add_argument("--n-target", type=int, default=50)
    p.add_argument("--n-test", type=int, default=50)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a counting model")
    _train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a labelled dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="dataset root")
    p.add_argument("--split", choices=("train", "test"), default="test")
    _eval_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="density map and count for one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--no-png", action="store_true", help="skip the colour preview")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("ablate", help="train and evaluate one ablation preset")
    p.add_argument("preset", help="one of: " + ", ".join(ABLATIONS))
    _train_flags(p)
    _eval_flags(p)
    p.add_argument("--dry-run", action="store_true", help="print the resolved config and stop")
    p.set_defaults(func=cmd_ablate)

    for p in sub.choices.values():
        p.add_argument("--out", help=f"run directory (default ${OUT_ENV}/<command>)")
    return ap


def run_cli(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse: 0 for --help, 2 for usage errors
        return int(exc.code or 0)
    args.argv = argv
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except FileNotFoundError as exc:
        print(f"missing file: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (D.DataError, D.AnnotationParseError, FormatError, ValueError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except FloatingPointError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
