"""Command-line entry point.

Subcommands::

    mefusion gen-synthetic --out DIR [--spec FILE] [--seed N] [--force]
    mefusion train    --data DIR --out DIR [--config FILE] [switches]
    mefusion eval     --data DIR --checkpoint FILE [--folds s00,s01] [--out FILE]
    mefusion loso     --data DIR [--config FILE] [--folds ...] [--out DIR] [switches]
    mefusion viz-displacement --checkpoint FILE --onset IMG --apex IMG --out PNG
    mefusion viz-displacement --field FILE --out PNG
    mefusion profile-fusion [--config FILE] [--runs N]

Switches mirror the ablation table: --ablation M0..M9, --fusion, --regions,
--no-self-supervised, --no-fullface, --no-local, --no-global. A config file
is applied first, then --ablation, then the individual switches and --seed.

Exit codes: 0 success, 2 usage, 3 I/O, 4 numerical failure, 5 checkpoint
or version mismatch.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np
import yaml
from PIL import Image

from . import __version__, flowio
from .core import CheckpointError, NumericalError, Tensor, UsageError, checkpoint, default_dtype, no_grad
from .fusion import flop_count, make_fusion_layer
from .pipeline.config import from_dict, load_config, ablation_overrides, merge
from .pipeline.data import load_dataset, save_dataset
from .pipeline.metrics import compute_metrics
from .pipeline.model import FRLModel
from .pipeline.synthetic import SyntheticSpec, dataset_digest, generate_synthetic_dataset
from .pipeline.train import fit, run_loso
from .regions import GeometryError, ParseError

log = logging.getLogger("mefusion")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC, EXIT_CHECKPOINT = 0, 2, 3, 4, 5
CHECKPOINT_KIND = "mefusion-model"


# ------------------------------------------------------------------ helpers
def _switch_overrides(args) -> dict:
    """Config overrides from --ablation and the individual switches, in that order."""
    out = {}
    if getattr(args, "ablation", None):
        out = merge(out, ablation_overrides(args.ablation))
    model, train = {}, {}
    if getattr(args, "fusion", None):
        model["fusion"] = {"fusion_variant": args.fusion}
    if getattr(args, "regions", None):
        model["regions"] = args.regions
    for flag, key in (("no_fullface", "use_fullface"), ("no_local", "use_local"), ("no_global", "use_global")):
        if getattr(args, flag, False):
            model[key] = False
    if getattr(args, "no_self_supervised", False):
        train["self_supervised"] = False
    out = merge(out, {"model": model, "train": train})
    if getattr(args, "seed", None) is not None:
        out["seed"] = args.seed
    return out


def _run_config(args):
    if args.config is not None and not Path(args.config).is_file():
        raise FileNotFoundError(f"config file not found: {args.config}")
    return load_config(args.config, _switch_overrides(args))


def _prepare_out_dir(path, force: bool) -> Path:
    out = Path(path)
    if out.exists() and not out.is_dir():
        raise FileExistsError(f"{out} exists and is not a directory")
    if out.is_dir() and any(out.iterdir()) and not force:
        raise FileExistsError(f"{out} is not empty; pass --force to write into it")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _dump(data, path=None) -> None:
    text = yaml.safe_dump(data, sort_keys=False)
    if path is not None:
        Path(path).write_text(text)
    print(text, end="")


def _folds(text):
    return [s for s in text.split(",") if s] if text else None


def _dtype(config):
    return np.float64 if config.train.precision == 64 else np.float32


def save_model(path, model: FRLModel, config, classes) -> None:
    meta = {"kind": CHECKPOINT_KIND, "version": __version__, "config": config.to_dict(), "classes": list(classes)}
    checkpoint.save(path, model.state_dict(), meta)


def load_model(path):
    """Rebuild the model a checkpoint was trained with; returns (model, config, meta)."""
    meta, arrays = checkpoint.load(path)
    if meta.get("kind") != CHECKPOINT_KIND or "config" not in meta:
        raise CheckpointError(f"{path}: not a model checkpoint")
    if str(meta.get("version", "")).split(".")[0] != __version__.split(".")[0]:
        raise CheckpointError(f"{path}: written by version {meta.get('version')}, this is {__version__}")
    try:
        config = from_dict(meta["config"])
    except (UsageError, TypeError) as exc:
        raise CheckpointError(f"{path}: stored config is not valid here ({exc})") from exc
    config.model.fusion.num_classes = len(meta.get("classes", ())) or 3
    with default_dtype(_dtype(config)):
        model = FRLModel(config.model, np.random.default_rng(0))
    try:
        model.load_state_dict(arrays)
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"{path}: does not fit the stored model config ({exc})") from exc
    return model, config, meta


def _load_frame(path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("L"), dtype=np.float64) / 255.0


# ------------------------------------------------------------------ commands
def cmd_gen_synthetic(args) -> int:
    if args.spec is not None:
        if not Path(args.spec).is_file():
            raise FileNotFoundError(f"spec file not found: {args.spec}")
        spec = SyntheticSpec.load(args.spec)
    else:
        spec = SyntheticSpec()
    out = _prepare_out_dir(args.out, args.force)
    dataset = generate_synthetic_dataset(spec, seed=args.seed or 0)
    manifest = save_dataset(dataset, out)
    print(f"wrote {len(dataset)} samples from {len(dataset.subjects)} subjects to {manifest}")
    print(f"digest {dataset_digest(dataset)}")
    return EXIT_OK


def cmd_train(args) -> int:
    config = _run_config(args)
    dataset = load_dataset(args.data)
    out = _prepare_out_dir(args.out, args.force)
    config.model.fusion.num_classes = len(dataset.classes)
    rng = np.random.default_rng(config.seed)
    with default_dtype(_dtype(config)):
        model = FRLModel(config.model, rng)
        history = fit(model, dataset.samples, config.train, rng,
                      callback=lambda e, s: log.info("epoch %d: %s", e, {k: round(v, 4) for k, v in s.items()}))
    save_model(out / "model.ckpt", model, config, dataset.classes)
    (out / "config.yaml").write_text(yaml.safe_dump(config.to_dict(), sort_keys=False))
    (out / "history.yaml").write_text(yaml.safe_dump([{k: float(v) for k, v in h.items()} for h in history]))
    print(f"trained {len(history)} steps on {len(dataset)} samples; checkpoint {out / 'model.ckpt'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model, config, meta = load_model(args.checkpoint)
    dataset = load_dataset(args.data)
    if list(dataset.classes) != list(meta.get("classes", dataset.classes)):
        raise CheckpointError(f"checkpoint classes {meta.get('classes')} differ from dataset classes {list(dataset.classes)}")
    wanted = _folds(args.folds)
    samples = [s for s in dataset.samples if wanted is None or s.subject in wanted]
    if not samples:
        raise UsageError(f"no samples for subjects {wanted}")
    with default_dtype(model.dtype), no_grad():
        result = model.predict(samples, config.train.batch_size)
    report = compute_metrics(result.labels, [s.label for s in samples], len(dataset.classes))
    _dump({"samples": len(samples), **report.to_dict()}, args.out)
    return EXIT_OK


def cmd_loso(args) -> int:
    config = _run_config(args)
    dataset = load_dataset(args.data)
    out = _prepare_out_dir(args.out, args.force) if args.out else None

    def progress(fold):
        print(f"fold {fold.subject}: UF1 {fold.report.uf1:.4f} UAR {fold.report.uar:.4f}", flush=True)

    report = run_loso(dataset, config, _folds(args.folds), progress=progress)
    agg = report.aggregate
    print(f"aggregate over {len(report.folds)} folds: UF1 {agg.uf1:.4f} UAR {agg.uar:.4f} accuracy {agg.accuracy:.4f}")
    if out is not None:
        (out / "report.yaml").write_text(yaml.safe_dump(report.to_dict(), sort_keys=False))
    return EXIT_OK


def cmd_viz_displacement(args) -> int:
    if args.field is not None:
        field = flowio.read_field(args.field)
        if field.shape[-1] != 2:
            raise UsageError(f"{args.field}: expected a 2-channel displacement field, found {field.shape[-1]}")
    else:
        if args.checkpoint is None or args.onset is None or args.apex is None:
            raise UsageError("give --field, or --checkpoint with --onset and --apex")
        model, _, _ = load_model(args.checkpoint)
        if model.dgm is None:
            raise CheckpointError(f"{args.checkpoint}: model has no displacement generator")
        onset, apex = _load_frame(args.onset), _load_frame(args.apex)
        if onset.shape != apex.shape:
            raise UsageError(f"onset {onset.shape} and apex {apex.shape} differ in size")
        model.eval()
        dtype = model.dtype
        with default_dtype(dtype), no_grad():
            result = model.dgm(Tensor(onset[None, None].astype(dtype)), Tensor(apex[None, None].astype(dtype)))
        field = result.as_hw2(0)
    out = Path(args.out)
    flowio.save_flow_png(out, field, args.max_radius)
    raw = out.with_suffix(".fld")
    flowio.write_field(raw, field)
    mag = np.hypot(field[..., 0], field[..., 1])
    print(f"wrote {out} and {raw}; {field.shape[1]}x{field.shape[0]}, max shift {mag.max():.3f} px")
    return EXIT_OK


def cmd_profile_fusion(args) -> int:
    config = _run_config(args)
    fu = config.model.fusion
    tokens = fu.num_patches
    rng = np.random.default_rng(config.seed)
    x = Tensor(rng.standard_normal((1, tokens, fu.embed_dim)).astype(np.float32))
    rows = {}
    for variant in ("after", "before"):
        layer = make_fusion_layer(variant, fu.embed_dim, fu.heads, tokens, rng).eval()
        times = []
        with no_grad():
            for _ in range(args.warmup):
                layer(x)
            for _ in range(args.runs):
                start = time.perf_counter()
                layer(x)
                times.append(time.perf_counter() - start)
        rows[variant] = {"macs": flop_count(fu.embed_dim, fu.heads, tokens, variant)["total"],
                         "median_ms": float(np.median(times) * 1e3)}
    print(f"fusion layer, C={fu.embed_dim} h={fu.heads} n={tokens}, {args.runs} runs")
    print(f"{'variant':<8} {'MACs':>12} {'median ms':>10}")
    for variant, row in rows.items():
        print(f"{variant:<8} {row['macs']:>12,d} {row['median_ms']:>10.4f}")
    ratio = {"macs": rows["before"]["macs"] / rows["after"]["macs"],
             "median_ms": rows["before"]["median_ms"] / rows["after"]["median_ms"]}
    print(f"{'ratio':<8} {ratio['macs']:>12.4f} {ratio['median_ms']:>10.4f}   (before / after)")
    if args.out:
        Path(args.out).write_text(yaml.safe_dump({**rows, "ratio": ratio}, sort_keys=False))
    return EXIT_OK


# ------------------------------------------------------------------ parser
def _add_run_options(p, ablations: bool = True) -> None:
    p.add_argument("--config", help="YAML run config")
    p.add_argument("--seed", type=int, help="overrides the config seed")
    if not ablations:
        return
    p.add_argument("--ablation", help="ablation row, M0..M9")
    p.add_argument("--fusion", choices=("before", "after"))
    p.add_argument("--regions", choices=("au", "grid3x3"))
    p.add_argument("--no-self-supervised", action="store_true")
    p.add_argument("--no-fullface", action="store_true")
    p.add_argument("--no-local", action="store_true")
    p.add_argument("--no-global", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mefusion", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synthetic", help="write a synthetic dataset")
    p.add_argument("--spec", help="YAML synthetic spec; defaults to 10 subjects x 3 classes x 6 samples")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true", help="write into a non-empty directory")
    p.set_defaults(func=cmd_gen_synthetic)

    p = sub.add_parser("train", help="train on every sample of a dataset")
    p.add_argument("--data", required=True, help="dataset directory or manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    _add_run_options(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--folds", help="comma-separated subjects to evaluate (default all)")
    p.add_argument("--out", help="also write the report here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("loso", help="leave-one-subject-out evaluation")
    p.add_argument("--data", required=True)
    p.add_argument("--folds", help="comma-separated held-out subjects (default all)")
    p.add_argument("--out", help="directory for report.yaml")
    p.add_argument("--force", action="store_true")
    _add_run_options(p)
    p.set_defaults(func=cmd_loso)

    p = sub.add_parser("viz-displacement", help="colour-wheel image of a displacement field")
    p.add_argument("--checkpoint")
    p.add_argument("--onset")
    p.add_argument("--apex")
    p.add_argument("--field", help="raw field file to render instead of running a model")
    p.add_argument("--max-radius", type=float, help="shift drawn at full saturation (default: field maximum)")
    p.add_argument("--out", required=True, help="PNG path; the raw field goes next to it as .fld")
    p.set_defaults(func=cmd_viz_displacement)

    p = sub.add_parser("profile-fusion", help="MACs and wall-clock of both fusion variants")
    _add_run_options(p, ablations=False)
    p.add_argument("--runs", type=int, default=100)
    p.add_argument("--warmup", type=int, default=5)
    p.add_argument("--out", help="also write the table as YAML")
    p.set_defaults(func=cmd_profile_fusion)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "runs", 1) < 1:
        print("error: --runs must be at least 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except CheckpointError as exc:
        code, exc_text = EXIT_CHECKPOINT, str(exc)
    except (NumericalError, FloatingPointError) as exc:
        code, exc_text = EXIT_NUMERIC, str(exc)
    except (OSError, ParseError, flowio.FieldFormatError) as exc:
        code, exc_text = EXIT_IO, str(exc)
    except (UsageError, GeometryError, ValueError) as exc:
        code, exc_text = EXIT_USAGE, str(exc)
    print(f"error: {exc_text}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
