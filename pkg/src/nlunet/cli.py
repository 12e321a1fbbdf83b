"""Command-line entry point.

Settings are layered: built-in defaults, then a flat ``key=value`` config
file (``--config``), then explicit flags.  Unknown config keys are rejected.
Artifacts for one invocation go to a single run directory, which also
receives the effective configuration as ``config.txt``.

Exit status: 0 ok, 2 configuration error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import datetime as _dt
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import data as dp
from .errors import ConfigError, DataError, NLUNetError, NumericError
from .metrics import evaluate
from .network import ABLATION_IDS, NetworkConfig, build_network, count_parameters, load_checkpoint, make_ablation
from .trainer import TrainConfig, infer, sweep, train, write_sweep

# Defaults per subcommand; config-file keys must appear here.
DEFAULTS = {
    "gen-data": dict(seed=0, dims="64,64,64", noise=0.05, name="phantom"),
    "train": dict(
        seed=0, image=None, labels=None, val_image=None, val_labels=None, model="full", base_width=8,
        patch_size=16, batch_size=5, steps=2000, lr=0.001, weight_decay=2e-6, log_every=1,
        checkpoint_every=0, val_every=0, overlap_step=8,
    ),
    "infer": dict(seed=0, checkpoint=None, image=None, patch_size=16, overlap_step=8, batch_size=5, workers=1),
    "eval": dict(seed=0, pred=None, truth=None, classes="1,2,3"),
    "gradcheck": dict(seed=0, repeats=1, threshold=1e-4),
    "ablate": dict(
        seed=0, image=None, labels=None, eval_image=None, eval_labels=None, models="1,2,3,4,5,full",
        base_width=8, patch_size=16, batch_size=5, steps=300, overlap_step=8,
    ),
    "sweep": dict(
        seed=0, axis="overlap", values="4,8,16", image=None, labels=None, eval_image=None, eval_labels=None,
        checkpoint=None, model="full", base_width=8, patch_size=16, batch_size=5, steps=300, overlap_step=8,
    ),
    "params": dict(seed=0, model="full", base_width=32),
}

HELP = {
    "seed": "random seed",
    "dims": "phantom extents D,H,W",
    "noise": "phantom noise standard deviation",
    "name": "output file stem",
    "image": "intensity volume header",
    "labels": "label volume header",
    "val_image": "validation intensity volume",
    "val_labels": "validation label volume",
    "eval_image": "evaluation intensity volume (default: phantom from seed+1)",
    "eval_labels": "evaluation label volume",
    "model": f"ablation model id, one of {', '.join(ABLATION_IDS)}",
    "models": "comma-separated ablation model ids",
    "base_width": "channels after the input block",
    "patch_size": "cubic patch extent (multiple of 4)",
    "batch_size": "patches per step / per inference batch",
    "steps": "training steps",
    "lr": "Adam learning rate",
    "weight_decay": "L2 weight decay",
    "log_every": "loss log cadence in steps",
    "checkpoint_every": "checkpoint cadence in steps (0: end only)",
    "val_every": "validation cadence in steps (0: never)",
    "overlap_step": "sliding-window step",
    "checkpoint": "checkpoint stem (without .json/.bin)",
    "workers": "parallel inference workers",
    "pred": "predicted label volume",
    "truth": "ground-truth label volume",
    "classes": "comma-separated class ids to report",
    "repeats": "number of seeds per check",
    "threshold": "maximum allowed relative error",
    "axis": "sweep axis: overlap or patch_size",
    "values": "comma-separated sweep values",
}


def _parse_config_file(path: str) -> dict:
    out = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected key=value")
        key, val = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = val
    return out


def _coerce(key: str, value, default):
    if value is None or default is None or not isinstance(value, str):
        return value
    try:
        if isinstance(default, bool):
            return value.lower() in ("1", "true", "yes")
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {value!r}") from exc
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nlunet", description="Non-local U-Net volumetric segmentation.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, defaults in DEFAULTS.items():
        sp = sub.add_parser(name, argument_default=argparse.SUPPRESS, help=f"{name} subcommand")
        sp.add_argument("--config", help="flat key=value config file")
        sp.add_argument("--out", help="root directory for run directories (default: runs)")
        sp.add_argument("--run-dir", help="explicit run directory (overrides --out naming)")
        for key, default in defaults.items():
            kind = type(default) if default is not None and not isinstance(default, bool) else str
            shown = "" if default is None else f" (default: {default})"
            sp.add_argument("--" + key.replace("_", "-"), dest=key, type=kind, help=HELP.get(key, key) + shown)
    return parser


def resolve(args: argparse.Namespace) -> dict:
    """Merge defaults, config file and explicit flags into one flat dict."""
    defaults = DEFAULTS[args.command]
    cfg = dict(defaults)
    given = vars(args)
    if given.get("config"):
        file_cfg = _parse_config_file(given["config"])
        unknown = sorted(set(file_cfg) - set(defaults))
        if unknown:
            raise ConfigError(f"unknown config keys for {args.command}: {', '.join(unknown)}")
        for k, v in file_cfg.items():
            cfg[k] = _coerce(k, v, defaults[k])
    for k in defaults:
        if k in given:
            cfg[k] = given[k]
    return cfg


def _run_dir(args, cfg) -> Path:
    given = vars(args)
    if given.get("run_dir"):
        path = Path(given["run_dir"])
    else:
        stamp = _dt.datetime.now().strftime("%Y%m%d-%H%M%S")
        path = Path(given.get("out") or "runs") / f"{stamp}_seed{cfg['seed']}"
    path.mkdir(parents=True, exist_ok=True)
    lines = [f"command={args.command}"] + [f"{k}={'' if v is None else v}" for k, v in cfg.items()]
    (path / "config.txt").write_text("\n".join(lines) + "\n")
    return path


def _ints(text: str) -> list:
    try:
        return [int(v) for v in str(text).split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"expected comma-separated integers, got {text!r}") from exc


def _require(cfg: dict, *keys) -> None:
    missing = [k for k in keys if not cfg.get(k)]
    if missing:
        raise ConfigError("missing required settings: " + ", ".join("--" + k.replace("_", "-") for k in missing))


def _load_pair(image, labels, seed: int) -> tuple:
    if image:
        vol = dp.read_volume(image)
        lab = dp.read_volume(labels) if labels else None
        if not isinstance(vol, dp.Volume) or (lab is not None and not isinstance(lab, dp.LabelVolume)):
            raise DataError("expected an intensity volume and a label volume")
        if lab is not None and lab.dims != vol.dims:
            raise DataError(f"image dims {vol.dims} and label dims {lab.dims} differ")
        return vol.normalized(), lab
    vol, lab = dp.generate_phantom(seed)
    return vol.normalized(), lab


def _train_config(cfg: dict, **over) -> TrainConfig:
    names = {f.name for f in dataclasses.fields(TrainConfig)}
    kw = {k: v for k, v in cfg.items() if k in names}
    kw.update(over)
    return TrainConfig(**kw).validate()


# --- subcommands -------------------------------------------------------------------


def cmd_gen_data(cfg, run_dir):
    dims = _ints(cfg["dims"])
    vol, lab = dp.generate_phantom(cfg["seed"], dims, noise_level=cfg["noise"])
    img = dp.write_volume(run_dir / f"{cfg['name']}_image.hdr", vol)
    lbl = dp.write_volume(run_dir / f"{cfg['name']}_labels.hdr", lab)
    print(img)
    print(lbl)


def cmd_train(cfg, run_dir):
    _require(cfg, "image", "labels")
    vol, lab = _load_pair(cfg["image"], cfg["labels"], cfg["seed"])
    val = None
    if cfg.get("val_image"):
        val = _load_pair(cfg["val_image"], cfg["val_labels"], cfg["seed"])
    tc = _train_config(cfg)
    res = train(tc, [(vol, lab)], val=val, log_path=run_dir / "loss.log", checkpoint_path=run_dir / "model")
    print(f"final_loss\t{res.log[-1][1]!r}" if res.log else "final_loss\tnan")
    print(run_dir / "model.json")


def cmd_infer(cfg, run_dir):
    _require(cfg, "checkpoint", "image")
    net = load_checkpoint(cfg["checkpoint"])
    vol = dp.read_volume(cfg["image"])
    if not isinstance(vol, dp.Volume):
        raise DataError(f"{cfg['image']} is not an intensity volume")
    probs, labels = infer(net, vol.normalized(), cfg["patch_size"], cfg["overlap_step"], cfg["batch_size"], cfg["workers"])
    dp.write_volume(run_dir / "probabilities.hdr", dp.Volume(probs))
    dp.write_volume(run_dir / "labels.hdr", dp.LabelVolume(labels, net.config.num_classes))
    print(run_dir / "labels.hdr")


def cmd_eval(cfg, run_dir):
    _require(cfg, "pred", "truth")
    pred, truth = dp.read_volume(cfg["pred"]), dp.read_volume(cfg["truth"])
    if not isinstance(pred, dp.LabelVolume) or not isinstance(truth, dp.LabelVolume):
        raise DataError("eval expects two label volumes")
    report = evaluate(pred.labels, truth.labels, _ints(cfg["classes"]))
    text = report.to_text()
    (run_dir / "report.txt").write_text(text)
    sys.stdout.write(text)


def cmd_gradcheck(cfg, run_dir):
    from .gradcheck import run_gradchecks

    skipped = {}
    results = run_gradchecks(cfg["seed"], cfg["repeats"], skipped=skipped)
    failed = [k for k, v in results.items() if not v < cfg["threshold"]]
    for k, v in results.items():
        print(f"{k}\t{v:.3e}\t{'FAIL' if k in failed else 'ok'}\tkink_skips={skipped[k]}")
    if failed:
        raise NumericError(f"gradient check above {cfg['threshold']} for: {', '.join(failed)}")


def _eval_pair(cfg):
    if cfg.get("eval_image"):
        return _load_pair(cfg["eval_image"], cfg["eval_labels"], cfg["seed"])
    vol, lab = dp.generate_phantom(cfg["seed"] + 1)
    return vol.normalized(), lab


def cmd_ablate(cfg, run_dir):
    train_pair = _load_pair(cfg["image"], cfg["labels"], cfg["seed"])
    ev, el = _eval_pair(cfg)
    models = [m.strip() for m in cfg["models"].split(",") if m.strip()]
    header = "model\tparams\tdice_CSF\tdice_GM\tdice_WM\tdice_avg\tmhd_CSF\tmhd_GM\tmhd_WM\tmhd_avg"
    lines = [header]
    for m in models:
        tc = _train_config(cfg, model=m)
        res = train(tc, [train_pair])
        _, pred = infer(res.net, ev, tc.patch_size, tc.overlap_step, tc.batch_size)
        rep = evaluate(pred, el.labels)
        dice = [c.dice for c in rep.classes]
        mhd = [c.mhd3d for c in rep.classes]
        cells = [f"Model{m}" if m != "full" else "full", str(count_parameters(res.net))]
        cells += [_f(v) for v in dice + [rep.avg_dice] + mhd + [rep.avg_mhd3d]]
        lines.append("\t".join(cells))
        print(lines[-1], flush=True)
    (run_dir / "ablation.tsv").write_text("\n".join(lines) + "\n")


def _f(v) -> str:
    return "nan" if v is None else f"{v:.4f}"


def cmd_sweep(cfg, run_dir):
    train_pair = _load_pair(cfg["image"], cfg["labels"], cfg["seed"])
    ev, el = _eval_pair(cfg)
    tc = _train_config(cfg)
    net = load_checkpoint(cfg["checkpoint"]) if cfg.get("checkpoint") else None
    rows = sweep(cfg["axis"], _ints(cfg["values"]), tc, [train_pair], ev, el, net=net)
    write_sweep(rows, run_dir / "sweep.tsv", run_dir / "sweep.dat")
    sys.stdout.write((run_dir / "sweep.tsv").read_text())


def cmd_params(cfg, run_dir):
    net = build_network(make_ablation(cfg["model"], NetworkConfig(base_width=cfg["base_width"])), cfg["seed"])
    print(count_parameters(net))


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "ablate": cmd_ablate,
    "sweep": cmd_sweep,
    "params": cmd_params,
}
_NO_RUN_DIR = {"params", "gradcheck"}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 2
    try:
        cfg = resolve(args)
        run_dir = None if args.command in _NO_RUN_DIR and not vars(args).get("run_dir") else _run_dir(args, cfg)
        COMMANDS[args.command](cfg, run_dir)
    except NLUNetError as exc:
        detail = " ".join(str(exc).split())
        print(f"error: code={exc.code} exit={exc.exit_status} detail={detail}", file=sys.stderr)
        return exc.exit_status
    return 0


def cli_main() -> None:
    sys.exit(main())


if __name__ == "__main__":
    cli_main()
