"""Command line front end.

Subcommands cover the whole workflow: synthesize paired data, train the
small-scale model, enhance images, score outputs, and run the gradient
verification tools. Every command is seeded and prints sorted JSON, so
reruns with the same arguments produce byte-identical output.

Exit codes: 0 success, 2 image I/O failure, 3 checkpoint failure,
4 training divergence, 5 gradient check failure, 6 bad arguments or config.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .engine import EngineError, Tensor
from .gradcheck import MODULES, run_gradcheck
from .image_io import (Image, ImageIOError, load_image, save_gray_png,
                       save_image, synth_lowlight)
from .network import (CheckpointError, DivergenceError, Model, ModelConfig,
                      TrainerConfig, build_model, forward, load_checkpoint,
                      save_checkpoint, toy_config, train_toy)
from .objective import LossWeights, psnr, ssim_metric
from .uad import UadParams, entropy_gradient_diagnostic

EXIT_OK = 0
EXIT_IMAGE = 2
EXIT_CHECKPOINT = 3
EXIT_DIVERGED = 4
EXIT_GRADCHECK = 5
EXIT_USAGE = 6

IMAGE_SUFFIXES = (".png", ".ppm")


class ConfigError(ValueError):
    """Malformed run config or manifest."""


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on bad arguments; remap to the usage code."""

    def error(self, message):
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# run config


_MODEL_KEYS = frozenset(ModelConfig.__dataclass_fields__)
_TRAINER_KEYS = frozenset(TrainerConfig.__dataclass_fields__)
_LOSS_KEYS = frozenset(LossWeights().as_dict())


def _reject_unknown(d, allowed, where):
    unknown = sorted(set(d) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown {where} key(s): {', '.join(unknown)}")


def _model_from_dict(d) -> ModelConfig:
    if not isinstance(d, dict):
        raise ConfigError("'model' section must be a JSON object")
    _reject_unknown(d, _MODEL_KEYS, "model config")
    try:
        return ModelConfig.from_dict(d)
    except (TypeError, EngineError) as exc:
        raise ConfigError(f"bad model config: {exc}") from exc


def _trainer_from_dict(d) -> TrainerConfig:
    if not isinstance(d, dict):
        raise ConfigError("'trainer' section must be a JSON object")
    _reject_unknown(d, _TRAINER_KEYS, "trainer config")
    d = dict(d)
    weights = LossWeights()
    if "loss_weights" in d:
        lw = d.pop("loss_weights")
        if not isinstance(lw, dict):
            raise ConfigError("'loss_weights' must be a JSON object")
        _reject_unknown(lw, _LOSS_KEYS, "loss weight")
        weights = LossWeights.from_dict(lw)
    if "milestones" in d:
        d["milestones"] = tuple(d["milestones"])
    try:
        return TrainerConfig(loss_weights=weights, **d)
    except TypeError as exc:
        raise ConfigError(f"bad trainer config: {exc}") from exc


def _trainer_as_dict(tcfg: TrainerConfig) -> dict:
    return {
        "steps": tcfg.steps, "lr": tcfg.lr, "beta1": tcfg.beta1,
        "beta2": tcfg.beta2, "eps": tcfg.eps,
        "milestones": list(tcfg.milestones), "lr_factor": tcfg.lr_factor,
        "crop": tcfg.crop, "seed": tcfg.seed,
        "loss_weights": tcfg.loss_weights.as_dict(),
        "bins": tcfg.bins, "extractor_seed": tcfg.extractor_seed,
    }


def _load_run_config(path):
    try:
        raw = json.loads(Path(path).read_text("utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("run config must be a JSON object")
    _reject_unknown(raw, ("model", "trainer"), "run config")
    return (_model_from_dict(raw.get("model", {})),
            _trainer_from_dict(raw.get("trainer", {})))


def _resolve_configs(args):
    """(ModelConfig, TrainerConfig) from --config / --toy plus overrides."""
    config_path = getattr(args, "config", None)
    if config_path:
        model_cfg, trainer_cfg = _load_run_config(config_path)
        if getattr(args, "toy", False):
            raise ConfigError("--toy and --config are mutually exclusive")
    elif getattr(args, "toy", False):
        model_cfg, trainer_cfg = toy_config(), TrainerConfig()
    else:
        model_cfg, trainer_cfg = ModelConfig(), TrainerConfig()
    for field in ("steps", "lr", "crop"):
        value = getattr(args, field, None)
        if value is not None:
            trainer_cfg = replace(trainer_cfg, **{field: value})
    if getattr(args, "seed", None) is not None:
        model_cfg = replace(model_cfg, seed=args.seed)
        trainer_cfg = replace(trainer_cfg, seed=args.seed)
    return model_cfg, trainer_cfg


def _emit(obj, path=None):
    text = json.dumps(obj, sort_keys=True, indent=2)
    if path is not None:
        Path(path).write_text(text + "\n", encoding="utf-8")
    print(text)


# ---------------------------------------------------------------------------
# padded inference


def _pad_to_multiple(arr: np.ndarray, factor: int):
    h, w = arr.shape[-2:]
    ph, pw = (-h) % factor, (-w) % factor
    if not ph and not pw:
        return arr, h, w
    # reflect needs at least extent-1 source rows; fall back for tiny inputs
    mode = "reflect" if ph < h and pw < w else "edge"
    return np.pad(arr, ((0, 0), (0, ph), (0, pw)), mode=mode), h, w


def _enhance_array(model: Model, arr: np.ndarray, want_aux: bool = False):
    """Forward pass on a [3,H,W] array of any extent; crops back after padding."""
    factor = 2 ** model.config.depth
    padded, h, w = _pad_to_multiple(arr, factor)
    if want_aux:
        out, aux = forward(model, Tensor(padded[None]), want_aux=True)
        return out.data[0, :, :h, :w], aux, (h, w)
    out = forward(model, Tensor(padded[None]))
    return out.data[0, :, :h, :w]


def _pair_metrics(out: np.ndarray, high: np.ndarray) -> dict:
    h, w = out.shape[-2:]
    row = {"psnr": psnr(out, high)}
    row["ssim"] = ssim_metric(out[None], high[None]) if min(h, w) >= 11 else None
    return row


# ---------------------------------------------------------------------------
# manifests


def _load_manifest(path):
    base = Path(path).parent
    try:
        entries = json.loads(Path(path).read_text("utf-8"))
    except OSError as exc:
        raise ImageIOError(f"cannot read manifest {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"manifest {path} is not valid JSON: {exc}") from exc
    if not isinstance(entries, list) or not entries:
        raise ConfigError(f"manifest {path} must be a non-empty JSON array")
    pairs = []
    for i, entry in enumerate(entries):
        if not isinstance(entry, dict) or set(entry) != {"low", "high"}:
            raise ConfigError(f"manifest entry {i} must be an object "
                              "with exactly 'low' and 'high' paths")
        pairs.append((load_image(base / entry["low"]).to_float(),
                      load_image(base / entry["high"]).to_float()))
    return pairs


def _split_holdout(pairs):
    """Last quarter of the manifest is kept for evaluation."""
    if len(pairs) < 2:
        return pairs, pairs
    n_eval = max(1, len(pairs) // 4)
    return pairs[:-n_eval], pairs[-n_eval:]


# ---------------------------------------------------------------------------
# commands


def cmd_enhance(args) -> int:
    if args.checkpoint:
        wanted = None
        if args.config or args.toy:
            wanted, _ = _resolve_configs(args)
        model = load_checkpoint(args.checkpoint, config=wanted)
    else:
        model_cfg, _ = _resolve_configs(args)
        model = build_model(model_cfg)
    arr = load_image(args.input).to_float()
    out, aux, (h, w) = _enhance_array(model, arr, want_aux=True)
    save_image(Image.from_float(out), args.output)
    summary = {"input": str(args.input), "output": str(args.output),
               "height": h, "width": w, "params": model.param_count()}
    if args.entropy_map:
        if aux["entropy"] is None:
            raise ConfigError("--entropy-map needs a model with the "
                              "uncertainty block enabled")
        factor = 2 ** model.config.depth
        eh, ew = -(-h // factor), -(-w // factor)
        ent = aux["entropy"].data[0, 0, :eh, :ew]
        save_gray_png(np.clip(ent, 0.0, 1.0), args.entropy_map)
        summary["entropy_map"] = str(args.entropy_map)
    if args.prior_map:
        if aux["prior"] is None:
            raise ConfigError("--prior-map needs a model with the "
                              "luminance estimator enabled")
        save_gray_png(np.clip(aux["prior"].map.data[0, 0, :h, :w], 0.0, 1.0),
                      args.prior_map)
        summary["prior_map"] = str(args.prior_map)
    _emit(summary)
    return EXIT_OK


def cmd_synth(args) -> int:
    src = Path(args.input_dir)
    if not src.is_dir():
        raise ImageIOError(f"{src} is not a directory")
    files = sorted(p for p in src.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise ImageIOError(f"no {'/'.join(IMAGE_SUFFIXES)} files in {src}")
    out_dir = Path(args.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = []
    for idx, path in enumerate(files):
        high = load_image(path)
        low = synth_lowlight(high, gamma=args.gamma, scale=args.scale,
                             noise_sigma=args.noise_sigma, seed=args.seed + idx)
        names = {"high": f"{path.stem}_high.png", "low": f"{path.stem}_low.png"}
        save_image(high, out_dir / names["high"])
        save_image(low, out_dir / names["low"])
        manifest.append(names)
    manifest_path = out_dir / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n",
                             encoding="utf-8")
    _emit({"pairs": len(manifest), "manifest": str(manifest_path)})
    return EXIT_OK


def _final_loss(history) -> float:
    tail = history[-max(1, len(history) // 10):]
    return float(np.mean([r.total for r in tail]))


def _eval_pairs(model: Model, pairs) -> dict:
    rows = []
    for low, high in pairs:
        out = _enhance_array(model, low)
        row = _pair_metrics(out, high)
        row["psnr_in"] = psnr(low, high)
        rows.append(row)
    ssims = [r["ssim"] for r in rows if r["ssim"] is not None]
    return {
        "count": len(rows),
        "psnr_out": float(np.mean([r["psnr"] for r in rows])),
        "psnr_in": float(np.mean([r["psnr_in"] for r in rows])),
        "psnr_gain": float(np.mean([r["psnr"] - r["psnr_in"] for r in rows])),
        "ssim_out": float(np.mean(ssims)) if ssims else None,
    }


def cmd_train(args) -> int:
    model_cfg, trainer_cfg = _resolve_configs(args)
    pairs = _load_manifest(args.manifest)
    train_pairs, eval_pairs = _split_holdout(pairs)
    model = build_model(model_cfg)
    history = train_toy(model, train_pairs, trainer_cfg)
    save_checkpoint(model, args.output)
    if args.history:
        _history = [r.as_dict() for r in history]
        Path(args.history).write_text(
            json.dumps(_history, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    summary = {
        "checkpoint": str(args.output),
        "steps": trainer_cfg.steps,
        "train_pairs": len(train_pairs),
        "params": model.param_count(),
        "first_loss": history[0].total,
        "final_loss": _final_loss(history),
        "eval": _eval_pairs(model, eval_pairs),
    }
    _emit(summary)
    return EXIT_OK


ABLATION_ROWS = (
    ("baseline", dict(enable_len=False, enable_neco=False, enable_uad=False, enable_asc=False)),
    ("len", dict(enable_len=True, enable_neco=False, enable_uad=False, enable_asc=False)),
    ("neco", dict(enable_len=False, enable_neco=True, enable_uad=False, enable_asc=False)),
    ("uad", dict(enable_len=False, enable_neco=False, enable_uad=True, enable_asc=False)),
    ("asc", dict(enable_len=False, enable_neco=False, enable_uad=False, enable_asc=True)),
    ("full", dict(enable_len=True, enable_neco=True, enable_uad=True, enable_asc=True)),
)


def run_ablation(model_cfg: ModelConfig, trainer_cfg: TrainerConfig, pairs) -> list:
    """Train each single-block variant plus both endpoints; returns row dicts."""
    train_pairs, eval_pairs = _split_holdout(pairs)
    rows = []
    for name, flags in ABLATION_ROWS:
        cfg = replace(model_cfg, **flags)
        model = build_model(cfg)
        history = train_toy(model, train_pairs, trainer_cfg)
        rows.append({
            "variant": name,
            "params": model.param_count(),
            "final_loss": _final_loss(history),
            "psnr_gain": _eval_pairs(model, eval_pairs)["psnr_gain"],
        })
    return rows


def cmd_ablate(args) -> int:
    model_cfg, trainer_cfg = _resolve_configs(args)
    pairs = _load_manifest(args.manifest)
    rows = run_ablation(model_cfg, trainer_cfg, pairs)
    width = max(len(r["variant"]) for r in rows)
    print(f"{'variant':<{width}}  {'params':>8}  {'final_loss':>10}  {'psnr_gain':>9}")
    for r in rows:
        print(f"{r['variant']:<{width}}  {r['params']:>8d}  "
              f"{r['final_loss']:>10.4f}  {r['psnr_gain']:>9.2f}")
    if args.output:
        Path(args.output).write_text(
            json.dumps(rows, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_metrics(args) -> int:
    pred = load_image(args.pred).to_float()
    ref = load_image(args.ref).to_float()
    if pred.shape != ref.shape:
        raise ConfigError(f"image extents disagree: {pred.shape[1:]} vs {ref.shape[1:]}")
    _emit(_pair_metrics(pred, ref))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    report = run_gradcheck(module=args.module, seed=args.seed, tol=args.tol)
    if args.json:
        printable = {
            name: {k: v for k, v in entry.items() if k != "params"}
            for name, entry in report["modules"].items()
        }
        _emit({**report, "modules": printable})
    else:
        for name, entry in report["modules"].items():
            line = (f"{name}: max_rel_err={entry['max']:.3e} "
                    f"worst={entry['worst_param']} "
                    f"{'ok' if entry['pass'] else 'FAIL'}")
            if "entropy_diagnostic" in entry:
                diag = entry["entropy_diagnostic"]
                ratios = ", ".join(f"{k}->{v:.4f}" for k, v in diag["ratios"].items())
                line += (f" | zero_exact={diag['scale_zero_exact']} "
                         f"ratios[{ratios}] linear={diag['linear_within_5pct']}")
            print(line)
        print(f"overall: {'ok' if report['pass'] else 'FAIL'} "
              f"(tol {report['tol']:g}, seed {report['seed']})")
    return EXIT_OK if report["pass"] else EXIT_GRADCHECK


def cmd_diagnose(args) -> int:
    if args.checkpoint:
        model = load_checkpoint(args.checkpoint)
        model_cfg, arrays = model.config, model.arrays
    else:
        model_cfg, _ = _resolve_configs(args)
        arrays = build_model(model_cfg).arrays
    if not model_cfg.enable_uad:
        raise ConfigError("the uncertainty block is disabled in this config")
    channels = model_cfg.level_channels()[-1]
    uad_cfg = UadParams(channels=channels, d_head=model_cfg.d_head,
                        dropout=model_cfg.dropout, prefix="uad")
    rng = np.random.Generator(np.random.PCG64(args.seed or 0))
    # strong features spread the entropy map across pixels; a flat map would
    # collapse every attention value onto one operating point and the probe
    # would read downstream activation curvature instead of the V path
    x = rng.standard_normal((1, channels, args.extent, args.extent)) * args.amplitude
    scales = [float(s) for s in args.scales.split(",")]
    rows = [entropy_gradient_diagnostic(arrays, uad_cfg, x, s) for s in scales]
    nonzero = [r for r in rows if r["scale"] != 0.0]
    linear = all(abs(r["ratio"] / r["scale"] - 1.0) <= 0.05 for r in nonzero)
    zero_rows = [r for r in rows if r["scale"] == 0.0]
    summary = {
        "scales": [{k: r[k] for k in ("scale", "base_norm", "scaled_norm",
                                      "ratio", "exact_zero")} for r in rows],
        "zero_exact": all(r["exact_zero"] for r in zero_rows) if zero_rows else None,
        "linear_within_5pct": linear if nonzero else None,
    }
    _emit(summary)
    if args.check:
        ok = (summary["zero_exact"] is not False
              and summary["linear_within_5pct"] is not False)
        return EXIT_OK if ok else EXIT_GRADCHECK
    return EXIT_OK


def cmd_print_config(args) -> int:
    model_cfg = ModelConfig() if args.full else toy_config()
    _emit({"model": model_cfg.as_dict(),
           "trainer": _trainer_as_dict(TrainerConfig())})
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _add_config_flags(sp, trainer: bool = False):
    sp.add_argument("--config", help="run config JSON ({'model': ..., 'trainer': ...})")
    sp.add_argument("--toy", action="store_true",
                    help="use the small desk-scale model configuration")
    sp.add_argument("--seed", type=int, help="override model and trainer seeds")
    if trainer:
        sp.add_argument("--steps", type=int, help="override training step count")
        sp.add_argument("--lr", type=float, help="override base learning rate")
        sp.add_argument("--crop", type=int, help="override training crop size")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="u2cllie",
                     description="Low-light image enhancement toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("enhance", help="enhance one low-light image")
    sp.add_argument("--input", required=True, help="low-light PNG/PPM")
    sp.add_argument("--output", required=True, help="enhanced image path")
    sp.add_argument("--checkpoint", help="trained weights (fresh seeded model otherwise)")
    sp.add_argument("--entropy-map", help="write the bottleneck entropy heatmap here")
    sp.add_argument("--prior-map", help="write the luminance prior heatmap here")
    _add_config_flags(sp)
    sp.set_defaults(func=cmd_enhance)

    sp = sub.add_parser("synth", help="build synthetic low/high pairs from bright images")
    sp.add_argument("--input-dir", required=True, help="directory of well-lit PNG/PPM files")
    sp.add_argument("--output-dir", required=True, help="where pairs and manifest.json go")
    sp.add_argument("--gamma", type=float, default=2.2, help="darkening exponent (>= 1)")
    sp.add_argument("--scale", type=float, default=0.25, help="linear dimming factor in (0, 1]")
    sp.add_argument("--noise-sigma", type=float, default=0.01, help="additive gaussian sigma")
    sp.add_argument("--seed", type=int, default=0, help="base noise seed (plus file index)")
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("train", help="train on a manifest of low/high pairs")
    sp.add_argument("--manifest", required=True, help="manifest.json from the synth command")
    sp.add_argument("--output", required=True, help="checkpoint path to write")
    sp.add_argument("--history", help="write per-step loss history JSON here")
    _add_config_flags(sp, trainer=True)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("ablate", help="train block-toggled variants and compare")
    sp.add_argument("--manifest", required=True, help="manifest.json from the synth command")
    sp.add_argument("--output", help="write row JSON here as well")
    _add_config_flags(sp, trainer=True)
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("metrics", help="PSNR/SSIM between two images")
    sp.add_argument("--pred", required=True, help="enhanced image")
    sp.add_argument("--ref", required=True, help="reference image")
    sp.set_defaults(func=cmd_metrics)

    sp = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    sp.add_argument("--module", default="all", choices=("all",) + MODULES)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--tol", type=float, default=1e-3)
    sp.add_argument("--json", action="store_true", help="print the full JSON report")
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("diagnose", help="entropy-scaling response of the attention V path")
    sp.add_argument("--checkpoint", help="diagnose trained weights instead of a fresh model")
    sp.add_argument("--scales", default="0,0.5,1,2", help="comma-separated entropy scales")
    sp.add_argument("--extent", type=int, default=6, help="feature grid size for the probe")
    sp.add_argument("--amplitude", type=float, default=4.0,
                    help="probe feature magnitude (keeps the entropy map varied)")
    sp.add_argument("--check", action="store_true",
                    help="exit nonzero when zero-silence or linearity fails")
    _add_config_flags(sp)
    sp.set_defaults(func=cmd_diagnose)

    sp = sub.add_parser("print-config", help="emit a complete default run config")
    sp.add_argument("--full", action="store_true",
                    help="full-size model defaults instead of the toy preset")
    sp.set_defaults(func=cmd_print_config)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ImageIOError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IMAGE
    except CheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except EngineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
