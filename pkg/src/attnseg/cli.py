"""``attnseg`` command line: train, eval, infer, explain, gradcheck, params, synth.

Run configuration is one JSON file with ``model``, ``train`` and ``data``
sections; ``--set section.key=value`` overrides single entries (values are
parsed as JSON when possible, otherwise kept as strings). Every error path
prints a single line starting with ``ERROR:`` to stderr; configuration and
data problems exit with status 2, failed gradient checks with status 1.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .data import DatasetManifest, load_image, manifest_path, mask_gray_values, synth_blobs, write_netpbm
from .errors import ConfigError, DimensionError, FormatError, UndefinedMetricError
from .layers import bilinear_resize
from .metrics import report
from .model import ModelConfig, build, export_attention_maps, predict_mask
from .tensor import Tensor, no_grad, save_tensor
from .training import TrainConfig, load_model, train

logger = logging.getLogger("attnseg")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
SECTIONS = ("model", "train", "data")
DATA_DEFAULTS = {"manifest": None, "train_split": "train", "val_split": "val", "test_split": "test"}


class CheckFailed(Exception):
    """A verification command ran to completion and found a failure."""


# ---------------------------------------------------------------- config


def parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(config: dict, overrides: Sequence[str]) -> dict:
    """Apply ``section.key=value`` assignments to a nested config dict."""
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        parts = key.strip().split(".")
        if len(parts) != 2 or parts[0] not in SECTIONS:
            raise ConfigError(f"override key {key!r} must be <{'|'.join(SECTIONS)}>.<name>")
        config.setdefault(parts[0], {})[parts[1]] = parse_value(value)
    return config


def load_config(path: str | None, overrides: Sequence[str] = ()) -> dict:
    config: dict = {s: {} for s in SECTIONS}
    if path:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config not found: {p}")
        try:
            raw = json.loads(p.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{p}: invalid JSON ({e.msg} at line {e.lineno})") from None
        unknown = set(raw) - set(SECTIONS)
        if unknown:
            raise ConfigError(f"{p}: unknown config sections {sorted(unknown)}")
        for s in SECTIONS:
            config[s].update(raw.get(s, {}))
    apply_overrides(config, overrides)
    unknown = set(config["data"]) - set(DATA_DEFAULTS)
    if unknown:
        raise ConfigError(f"unknown data config keys: {sorted(unknown)}")
    config["data"] = {**DATA_DEFAULTS, **config["data"]}
    return config


def _model_config(config: dict, manifest: DatasetManifest | None = None) -> ModelConfig:
    model = dict(config["model"])
    if manifest is not None:
        for key, value in (("in_channels", manifest.channels), ("num_classes", manifest.classes)):
            if key in model and model[key] != value:
                raise ConfigError(f"model.{key}={model[key]} but the manifest declares {value}")
            model[key] = value
    return ModelConfig.from_dict(model)


def _manifest(config: dict) -> DatasetManifest:
    path = config["data"]["manifest"]
    if not path:
        raise ConfigError("data.manifest is not set")
    return DatasetManifest.load(manifest_path(path))


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2) + "\n")


def _emit(title: str, body: str) -> None:
    print(f"=== {title} ===")
    print(body)
    print(f"=== end {title} ===")


def _check_compatible(model, manifest: DatasetManifest) -> None:
    cfg = model.config
    if cfg.num_classes != manifest.classes:
        raise ConfigError(f"checkpoint predicts {cfg.num_classes} classes, manifest declares {manifest.classes}")
    if cfg.in_channels != manifest.channels:
        raise ConfigError(f"checkpoint expects {cfg.in_channels} channels, manifest declares {manifest.channels}")


def _checkpoint(args) -> Path:
    path = Path(args.checkpoint) if args.checkpoint else Path(args.out) / "best.ckpt"
    if not path.is_file():
        raise ConfigError(f"checkpoint not found: {path}")
    return path


# -------------------------------------------------------------- commands


def cmd_train(args) -> int:
    config = load_config(args.config, args.set)
    config["train"]["seed"] = args.seed
    manifest = _manifest(config)
    model_cfg = _model_config(config, manifest)
    train_cfg = TrainConfig.from_dict(config["train"])
    data = config["data"]
    trainset = manifest.load_split(data["train_split"])
    valset = manifest.load_split(data["val_split"])
    if len(trainset) == 0:
        raise ConfigError(f"split {data['train_split']!r} is empty")
    if len(valset) == 0:
        raise ConfigError(f"split {data['val_split']!r} is empty")

    out = _out_dir(args)
    snapshot = {"model": model_cfg.to_dict(), "train": train_cfg.to_dict(), "data": data}
    _write_json(out / "config.snapshot.json", snapshot)
    model = build(model_cfg, seed=args.seed)
    result = train(model, trainset, valset, train_cfg, out_dir=out)
    rep = _evaluate(model, valset)
    _write_reports(out, rep)
    from .plotting import training_curves

    training_curves([r.__dict__ for r in result.log], out / "training_curves.png")
    _emit("validation", rep.table() + f"\nbest epoch {result.best_epoch} val dice {result.best_val_dice:.4f}")
    return EXIT_OK


def _evaluate(model, dataset):
    preds, seconds = [], []
    model.eval()
    for i in range(len(dataset)):
        t0 = time.perf_counter()
        with no_grad():
            logits, _ = model(dataset.images[i : i + 1])
        preds.append(predict_mask(logits)[0])
        seconds.append(time.perf_counter() - t0)
    classes = range(1, model.config.num_classes)
    return report(preds, list(dataset.masks), classes, dataset.ids, seconds)


def _write_reports(out: Path, rep) -> None:
    (out / "metrics.json").write_text(rep.to_json() + "\n")
    (out / "metrics.csv").write_text(rep.to_csv())


def cmd_eval(args) -> int:
    config = load_config(args.config, args.set)
    manifest = _manifest(config)
    model = load_model(_checkpoint(args))
    _check_compatible(model, manifest)
    split = args.split or config["data"]["test_split"]
    dataset = manifest.load_split(split)
    if len(dataset) == 0:
        raise ConfigError(f"split {split!r} is empty")
    out = _out_dir(args)
    rep = _evaluate(model, dataset)
    _write_reports(out, rep)
    from .plotting import metrics_figure

    metrics_figure(rep.summary(), {str(k): v for k, v in rep.dice.items()},
                   {str(k): v for k, v in rep.assd.items()}, out / "metrics.png")
    mean_t = float(np.mean(rep.seconds)) if rep.seconds else 0.0
    _emit(f"eval {split}", rep.table() + f"\nimages {len(dataset)}  mean inference {1000 * mean_t:.1f} ms/image")
    return EXIT_OK


def _load_single(args, config: dict, model) -> tuple[np.ndarray, str]:
    mean = std = None
    if config["data"].get("manifest"):
        manifest = _manifest(config)
        _check_compatible(model, manifest)
        mean, std = manifest.mean, manifest.std
    img = load_image(args.image, mean, std)
    if img.shape[0] != model.config.in_channels:
        raise ConfigError(f"{args.image}: {img.shape[0]} channels, model expects {model.config.in_channels}")
    return img, Path(args.image).stem


def _write_mask(path: Path, mask: np.ndarray, classes: int) -> None:
    grays = np.asarray(mask_gray_values(max(classes, 2)), dtype=np.uint8)
    write_netpbm(path, grays[mask])


def cmd_infer(args) -> int:
    config = load_config(args.config, args.set)
    model = load_model(_checkpoint(args))
    out = _out_dir(args)
    (out / "pred").mkdir(exist_ok=True)
    k = model.config.num_classes
    timings = {}
    if args.image:
        img, ident = _load_single(args, config, model)
        items = [(ident, img)]
    else:
        manifest = _manifest(config)
        _check_compatible(model, manifest)
        split = args.split or config["data"]["test_split"]
        ds = manifest.load_split(split)
        if len(ds) == 0:
            raise ConfigError(f"split {split!r} is empty")
        items = list(zip(ds.ids, ds.images))
    for ident, img in items:
        t0 = time.perf_counter()
        with no_grad():
            logits, _ = model(img[None])
        mask = predict_mask(logits)[0]
        timings[ident] = time.perf_counter() - t0
        _write_mask(out / "pred" / f"{ident}.pgm", mask, k)
    _write_json(out / "inference_times.json", timings)
    body = "\n".join(f"{i}\t{1000 * s:.1f} ms" for i, s in timings.items())
    _emit("infer", body)
    return EXIT_OK


def to_gray(values: np.ndarray) -> np.ndarray:
    """Map values in [0,1] linearly onto 8-bit gray levels."""
    return np.round(np.clip(values, 0.0, 1.0) * 255.0).astype(np.uint8)


def _resize_map(m: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    if m.shape == size:
        return m
    return bilinear_resize(Tensor(m[None, None]), *size).data[0, 0]


def explain_maps(model, image: np.ndarray) -> dict:
    """Run one forward pass and collect every attention map for export.

    Returns ``spatial`` (name → H×W in [0,1] at image resolution), ``raw``
    (name → native coefficient array), ``channel`` (name → β vector),
    ``scale`` (K×H×W γ·γ* maps or None), ``gamma`` (K values or None) and
    ``mask`` (predicted labels).
    """
    model.eval()
    with no_grad():
        logits, att = model(image[None])
    maps = export_attention_maps(att)
    size = image.shape[1:]
    spatial, channel, raw = {}, {}, {}
    for name in sorted(maps.maps):
        arr = maps[name]
        raw[name] = arr
        if name == "SA1" and arr.ndim == 3:
            # attention each bottleneck pixel receives, averaged over queries
            h5 = size[0] // model.config.divisor
            w5 = size[1] // model.config.divisor
            received = arr[0].mean(axis=0).reshape(h5, w5)
            spatial[name] = _resize_map(received / received.max(), size)
        elif name.startswith("SA"):
            spatial[name] = _resize_map(arr[0].mean(axis=0), size)
        elif name.startswith("CA"):
            channel[name] = arr[0, :, 0, 0]
    scale = maps["LA"][0] if "LA" in maps else None
    if scale is not None:
        raw["LA"] = maps["LA"]
    gamma = maps.gamma[0] if maps.gamma is not None else None
    return {"spatial": spatial, "channel": channel, "scale": scale, "gamma": gamma, "raw": raw,
            "mask": predict_mask(logits)[0]}


def cmd_explain(args) -> int:
    if not args.image:
        raise ConfigError("explain needs --image")
    config = load_config(args.config, args.set)
    model = load_model(_checkpoint(args))
    img, ident = _load_single(args, config, model)
    out = _out_dir(args)
    maps_dir = out / "maps"
    maps_dir.mkdir(exist_ok=True)
    res = explain_maps(model, img)
    _write_mask(maps_dir / "mask.pgm", res["mask"], model.config.num_classes)
    written = ["mask.pgm"]
    for name, m in res["spatial"].items():
        write_netpbm(maps_dir / f"{name}.pgm", to_gray(m))
        written.append(f"{name}.pgm")
    for name, beta in res["channel"].items():
        write_netpbm(maps_dir / f"{name}.pgm", to_gray(beta[None, :]))
        written.append(f"{name}.pgm")
    if res["scale"] is not None:
        for k, m in enumerate(res["scale"], start=1):
            write_netpbm(maps_dir / f"LA{k}.pgm", to_gray(m))
            written.append(f"LA{k}.pgm")
    for name, arr in res["raw"].items():
        save_tensor(maps_dir / f"{name}.atns", arr)
    gamma_info = None
    if res["gamma"] is not None:
        g = [float(v) for v in res["gamma"]]
        gamma_info = {"image": ident, "gamma": g, "sum": float(np.sum(g)), "argmax_scale": int(np.argmax(g)) + 1}
        _write_json(out / "gamma.json", gamma_info)
    from .plotting import explain_panel

    explain_panel(img, res["mask"], res["spatial"], res["channel"], res["scale"], res["gamma"],
                  out / "explain.png")
    body = "\n".join(written)
    if gamma_info:
        body += "\ngamma " + " ".join(f"{v:.4f}" for v in gamma_info["gamma"]) + f"  sum {gamma_info['sum']:.4f}"
    _emit("explain", body)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite

    t0 = time.perf_counter()
    results = run_suite(
        args.seed,
        report=lambda r: print(f"{r.name:<28} max_rel_err {r.max_rel_error:.3e}  tol {r.tolerance:.0e}  "
                               f"probes {r.probes:<4d} {'PASS' if r.passed else 'FAIL'}", flush=True),
    )
    print(f"total {time.perf_counter() - t0:.1f} s")
    failed = [r.name for r in results if not r.passed]
    if failed:
        raise CheckFailed(f"gradient check failed for {', '.join(failed)}")
    return EXIT_OK


def cmd_params(args) -> int:
    config = load_config(args.config, args.set)
    model = build(_model_config(config), seed=args.seed)
    counts = model.module_parameter_counts()
    total = sum(p.data.size for p in model.parameters())
    lines = [f"{name:<16} {n:>10,d}" for name, n in counts.items()]
    lines.append(f"{'total':<16} {total:>10,d}")
    _emit("params", "\n".join(lines))
    if args.out:
        _write_json(_out_dir(args) / "params.json", {"modules": counts, "total": total})
    return EXIT_OK


def cmd_synth(args) -> int:
    splits = {}
    for item in args.splits.split(","):
        name, _, count = item.partition("=")
        try:
            splits[name.strip()] = int(count)
        except ValueError:
            raise ConfigError(f"bad split entry {item!r}; expected name=count") from None
    n = sum(splits.values())
    synth_blobs(n, args.size, (args.scale_min, args.scale_max), seed=args.seed, classes=args.classes,
                out_dir=args.out, splits=splits)
    _emit("synth", f"{n} samples of {args.size}×{args.size} written to {args.out}/manifest.json")
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "infer": cmd_infer,
    "explain": cmd_explain,
    "gradcheck": cmd_gradcheck,
    "params": cmd_params,
    "synth": cmd_synth,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="attnseg", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON file with model/train/data sections")
        p.add_argument("--out", default="runs/latest", help="output directory")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--set", "--override", action="append", default=[], metavar="KEY=VALUE",
                       help="override one config entry, e.g. train.lr0=1e-3")
        p.add_argument("-v", "--verbose", action="store_true")
        if name in ("eval", "infer", "explain"):
            p.add_argument("--checkpoint", help="checkpoint path (default: <out>/best.ckpt)")
        if name in ("eval", "infer"):
            p.add_argument("--split", help="manifest split to use (default: data.test_split)")
        if name in ("infer", "explain"):
            p.add_argument("--image", help="single PGM/PPM image")
        if name == "synth":
            p.add_argument("--size", type=int, default=64)
            p.add_argument("--splits", default="train=16,val=4,test=4", help="comma-separated name=count")
            p.add_argument("--scale-min", type=float, default=0.05)
            p.add_argument("--scale-max", type=float, default=0.4)
            p.add_argument("--classes", type=int, default=2)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except CheckFailed as e:
        print(f"ERROR: {e}", file=sys.stderr)
        return EXIT_FAIL
    except (ConfigError, FormatError, DimensionError, UndefinedMetricError, FileNotFoundError) as e:
        msg = str(e).splitlines()[0] if str(e) else type(e).__name__
        print(f"ERROR: {msg}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as e:  # noqa: BLE001 - every failure must surface as one diagnostic line
        msg = str(e).splitlines()[0] if str(e) else ""
        print(f"ERROR: {type(e).__name__}: {msg}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
