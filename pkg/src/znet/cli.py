"""Command-line entry point: phantom | train | predict | evaluate | simulate.

Settings come from a flat ``key = value`` config file (``--config``) and are
overridden by flags. Every command writes its fully resolved configuration to
``<out-dir>/config.txt``.

Exit codes: 0 success, 1 internal or numeric failure, 2 user/config error.
"""
from __future__ import annotations

import argparse
import logging
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np
from scipy import ndimage

from .metrics import evaluate, format_simulation, simulate_uniform, simulation_csv
from .mhd import MetaImageError, load_mhd, parse_header, save_mhd
from .model import ZNet, ZNetConfig, load_checkpoint
from .preprocess import (METHODS, VALIDATION_GEOMETRIES, AugmentSpec, PhantomParams, augment,
                         make_phantom, preprocess_volume, reconstruct, unify)
from .train import AdamState, DiceConfig, NonFiniteLoss, TrainConfig, binarize, predict, train
from .volume import GeometryError, Volume

log = logging.getLogger("znet")

MASK_SUFFIX = "_segmentation"

DEFAULTS = {
    # shared
    "seed": 0,
    "out_dir": "out",
    "method": "resize2d",
    "threads": 0,
    "data_dir": "",
    # phantom
    "count": 5,
    "geometry": "validation",  # validation | custom
    "dims": (42, 512, 512),
    "spacing": (2.2, 0.27, 0.27),
    "shape": "ellipsoid",
    "radius_mm": 20.0,
    "radii_mm": (18.0, 16.0, 20.0),
    "noise": 15.0,
    # model
    "depth": 5,
    "base_channels": 32,
    "input_size": (256, 256),
    "skip_align": "pool",
    "precision": 32,
    "bn_momentum": 0.99,
    # training
    "val_cases": (5, 15, 25, 35, 45),
    "batch_size": 8,
    "epochs": 1,
    "max_steps": 0,
    "lr": 0.001,
    "dice_s": 1.0,
    "min_foreground": 0.0,  # keep slices whose mask covers at least this fraction (0 keeps all)
    "augment_copies": 0,
    "rotation": 15.0,
    "flip": True,
    "zoom": (0.9, 1.1),
    "clahe_clip": 2.0,
    "clahe_tiles": (8, 8),
    "checkpoint_every": 0,
    "resume": "",
    # prediction / evaluation
    "checkpoint": "",
    "gt_dir": "",
    "pred_dir": "",
    "overlay": False,
    "hd_percentile": 0.0,
    "methods": METHODS,
}


class ConfigError(ValueError):
    pass


def _convert(key, raw: str):
    default = DEFAULTS.get(key)
    if key not in DEFAULTS:
        raise ConfigError(f"unknown config key {key!r}")
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1", "yes")
        if isinstance(default, tuple):
            items = [s for s in raw.replace(",", " ").split() if s]
            cast = type(default[0]) if default else str
            return tuple(cast(s) for s in items)
        return type(default)(raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc


def load_config(path, overrides: dict) -> dict:
    cfg = dict(DEFAULTS)
    if path:
        try:
            fields = parse_header(Path(path).read_text())
        except (OSError, MetaImageError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        for k, v in fields.items():
            cfg[k] = _convert(k, v)
    for k, v in overrides.items():
        cfg[k] = _convert(k, v) if isinstance(v, str) else v
    return cfg


def _fmt(v):
    if isinstance(v, tuple):
        return " ".join(str(x) for x in v)
    return str(v)


def write_resolved(cfg: dict, command: str, out_dir: Path) -> None:
    lines = [f"# resolved config for '{command}'"] + [f"{k} = {_fmt(v)}" for k, v in cfg.items()]
    (out_dir / "config.txt").write_text("\n".join(lines) + "\n")


def model_config(cfg) -> ZNetConfig:
    return ZNetConfig(depth=cfg["depth"], base_channels=cfg["base_channels"],
                      input_size=cfg["input_size"], skip_align=cfg["skip_align"],
                      precision=cfg["precision"], bn_momentum=cfg["bn_momentum"])


# --------------------------------------------------------------------------
# dataset discovery


def list_cases(data_dir) -> list[tuple[str, Path, Path | None]]:
    """``(case_id, image_path, mask_path_or_None)`` for every image header in ``data_dir``."""
    d = Path(data_dir)
    if not d.is_dir():
        raise ConfigError(f"data directory {d} does not exist")
    images = sorted(p for p in d.glob("*.mhd") if not p.stem.endswith(MASK_SUFFIX))
    out = []
    for img in images:
        m = img.with_name(img.stem + MASK_SUFFIX + ".mhd")
        out.append((img.stem, img, m if m.exists() else None))
    return out


def case_index(case_id: str) -> int | None:
    digits = "".join(ch for ch in case_id if ch.isdigit())
    return int(digits) if digits else None


# --------------------------------------------------------------------------
# commands


def cmd_phantom(cfg, out_dir: Path) -> int:
    geoms = list(VALIDATION_GEOMETRIES.items())
    params = PhantomParams(radius_mm=cfg["radius_mm"], radii_mm=cfg["radii_mm"], noise=cfg["noise"])
    for i in range(cfg["count"]):
        if cfg["geometry"] == "validation":
            idx, (dims, spacing) = geoms[i % len(geoms)]
            if i >= len(geoms):
                idx = idx + 50 * (i // len(geoms))
        elif cfg["geometry"] == "custom":
            idx, dims, spacing = i, cfg["dims"], cfg["spacing"]
        else:
            raise ConfigError(f"unknown geometry {cfg['geometry']!r}")
        img, mask = make_phantom(dims, spacing, cfg["shape"], params, seed=cfg["seed"] + i)
        save_mhd(out_dir / f"Case{idx:02d}.mhd", img)
        save_mhd(out_dir / f"Case{idx:02d}{MASK_SUFFIX}.mhd", mask)
        log.info("phantom Case%02d %s @ %s", idx, dims, spacing)
    return 0


def build_training_set(cfg, cases):
    size = cfg["input_size"]
    xs, ys = [], []
    for cid, img_path, mask_path in cases:
        img = load_mhd(img_path, kind="intensity")
        mask = load_mhd(mask_path, kind="mask")
        if img.shape != mask.shape:
            raise ConfigError(f"{cid}: image {img.shape} and mask {mask.shape} differ")
        slices, _ = preprocess_volume(img, cfg["method"], size, cfg["clahe_clip"], cfg["clahe_tiles"])
        m, _ = unify(mask, cfg["method"], size)
        keep = np.arange(len(slices))
        if cfg["min_foreground"] > 0:
            frac = m.data.reshape(len(slices), -1).mean(axis=1)
            keep = np.nonzero(frac >= cfg["min_foreground"])[0]
        xs.append(slices[keep])
        ys.append(m.data[keep].astype(np.float32))
    x, y = np.concatenate(xs), np.concatenate(ys)
    if cfg["augment_copies"]:
        spec = AugmentSpec(cfg["rotation"], cfg["flip"], cfg["zoom"], cfg["seed"])
        rng = np.random.default_rng(spec.seed)
        ax, ay = [x], [y]
        for _ in range(cfg["augment_copies"]):
            pairs = [augment(xi, yi, spec, rng) for xi, yi in zip(x, y)]
            ax.append(np.stack([p[0] for p in pairs]))
            ay.append(np.stack([p[1] for p in pairs]))
        x, y = np.concatenate(ax), np.concatenate(ay)
    return x[:, None], y[:, None]


def cmd_train(cfg, out_dir: Path) -> int:
    cases = list_cases(cfg["data_dir"])
    if not cases:
        raise ConfigError(f"no volumes found in {cfg['data_dir']}")
    for cid, _, mask in cases:
        if mask is None:
            raise ConfigError(f"missing mask file {cid}{MASK_SUFFIX}.mhd for {cid}")
    val = set(cfg["val_cases"])
    train_cases = [c for c in cases if case_index(c[0]) not in val]
    if not train_cases:
        raise ConfigError("every case is in the validation split")
    log.info("training on %d cases, holding out %s", len(train_cases),
             [c[0] for c in cases if case_index(c[0]) in val])
    x, y = build_training_set(cfg, train_cases)

    mcfg = model_config(cfg)
    ckpt = out_dir / "model.ckpt"
    adam = AdamState(lr=cfg["lr"])
    start = 0
    if cfg["resume"]:
        store, _, adam.t, start = load_checkpoint(cfg["resume"], mcfg)
        model = ZNet(mcfg, store)
    else:
        model = ZNet(mcfg, seed=cfg["seed"])
    tcfg = TrainConfig(batch_size=cfg["batch_size"], epochs=cfg["epochs"], seed=cfg["seed"],
                       lr=cfg["lr"], max_steps=cfg["max_steps"] or None,
                       checkpoint_every=cfg["checkpoint_every"], checkpoint_path=str(ckpt),
                       log_path=str(out_dir / "train_log.csv"))
    result = train(model, x, y, tcfg, DiceConfig(cfg["dice_s"]), adam, start_step=start)
    print(f"steps {len(result.steps)} final_loss {result.final_loss:.6f}")
    return 0


def _boundary2d(m):
    m = m.astype(bool)
    return m & ~ndimage.binary_erosion(m, border_value=0)


def write_overlay(path, img2d, pred2d, gt2d=None) -> None:
    """Grey image with prediction boundary in green and reference boundary in red (binary PPM)."""
    lo, hi = float(img2d.min()), float(img2d.max())
    g = np.zeros(img2d.shape, np.uint8) if hi <= lo else ((img2d - lo) / (hi - lo) * 255).astype(np.uint8)
    rgb = np.repeat(g[..., None], 3, axis=2)
    if gt2d is not None:
        rgb[_boundary2d(gt2d)] = (255, 0, 0)
    rgb[_boundary2d(pred2d)] = (0, 255, 0)
    h, w = g.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(rgb.tobytes())


def cmd_predict(cfg, out_dir: Path) -> int:
    if not cfg["checkpoint"]:
        raise ConfigError("predict needs checkpoint = <path>")
    store, mcfg, _, _ = load_checkpoint(cfg["checkpoint"])
    model = ZNet(mcfg, store)
    cases = list_cases(cfg["data_dir"])
    if not cases:
        raise ConfigError(f"no volumes found in {cfg['data_dir']}")
    if cfg["overlay"]:
        (out_dir / "overlays").mkdir(exist_ok=True)
    for cid, img_path, _ in cases:
        img = load_mhd(img_path, kind="intensity")
        slices, rec = preprocess_volume(img, cfg["method"], mcfg.input_size,
                                        cfg["clahe_clip"], cfg["clahe_tiles"])
        prob = predict(model, slices, batch_size=cfg["batch_size"])
        unified = Volume(binarize(prob), (1.0, 1.0, 1.0), "mask")
        mask = reconstruct(unified, rec)
        save_mhd(out_dir / f"{cid}{MASK_SUFFIX}.mhd", mask)
        if cfg["overlay"]:
            gt = None
            if cfg["gt_dir"]:
                gp = Path(cfg["gt_dir"]) / f"{cid}{MASK_SUFFIX}.mhd"
                gt = load_mhd(gp, kind="mask").data if gp.exists() else None
            for z in range(mask.shape[0]):
                write_overlay(out_dir / "overlays" / f"{cid}_z{z:03d}.ppm", img.data[z], mask.data[z],
                              None if gt is None else gt[z])
        log.info("%s: %d foreground voxels", cid, int(mask.data.sum()))
    return 0


def _mask_files(d) -> dict:
    d = Path(d)
    if not d.is_dir():
        raise ConfigError(f"directory {d} does not exist")
    return {p.name: p for p in sorted(d.glob(f"*{MASK_SUFFIX}.mhd"))}


def cmd_evaluate(cfg, out_dir: Path) -> int:
    preds, gts = _mask_files(cfg["pred_dir"]), _mask_files(cfg["gt_dir"])
    if not preds or not gts:
        raise ConfigError("evaluate needs non-empty pred_dir and gt_dir")
    if set(preds) != set(gts):
        raise ConfigError(f"unpaired masks: {sorted(set(preds) ^ set(gts))}")
    names = sorted(preds)
    pv = [load_mhd(preds[n], kind="mask") for n in names]
    gv = [load_mhd(gts[n], kind="mask") for n in names]
    for n, p, g in zip(names, pv, gv):
        if p.shape != g.shape:
            raise ConfigError(f"{n}: prediction {p.shape} and reference {g.shape} differ")
    report = evaluate(pv, gv, [g.spacing for g in gv],
                      [n[: -len(MASK_SUFFIX) - 4] for n in names],
                      cfg["hd_percentile"] or None)
    (out_dir / "report.csv").write_text(report.to_csv())
    (out_dir / "report.txt").write_text(report.to_text())
    print(report.to_text(), end="")
    return 0


def cmd_simulate(cfg, out_dir: Path) -> int:
    files = _mask_files(cfg["data_dir"])
    if not files:
        raise ConfigError(f"no masks found in {cfg['data_dir']}")
    cases = [(n[: -len(MASK_SUFFIX) - 4], load_mhd(p, kind="mask")) for n, p in files.items()]
    for m in cfg["methods"]:
        if m not in METHODS:
            raise ConfigError(f"unknown method {m!r}")
    table = simulate_uniform(cases, cfg["methods"], cfg["input_size"])
    (out_dir / "simulation.csv").write_text(simulation_csv(table))
    text = format_simulation(table)
    (out_dir / "simulation.txt").write_text(text)
    print(text, end="")
    return 0


COMMANDS = {"phantom": cmd_phantom, "train": cmd_train, "predict": cmd_predict,
            "evaluate": cmd_evaluate, "simulate": cmd_simulate}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="znet", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("--config", help="key = value config file")
    ap.add_argument("--seed", type=int)
    ap.add_argument("--out-dir")
    ap.add_argument("--method", choices=METHODS)
    ap.add_argument("--threads", type=int, help="BLAS threads (0 = library default)")
    ap.add_argument("--data-dir")
    ap.add_argument("--checkpoint")
    ap.add_argument("--gt-dir")
    ap.add_argument("--pred-dir")
    ap.add_argument("--overlay", action="store_true", default=None)
    ap.add_argument("-s", "--set", action="append", default=[], metavar="KEY=VALUE",
                    help="override any config key")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            print(f"error: --set expects KEY=VALUE, got {item!r}", file=sys.stderr)
            return 2
        overrides[key.strip()] = value
    for key in ("seed", "out_dir", "method", "threads", "data_dir", "checkpoint",
                "gt_dir", "pred_dir", "overlay"):
        val = getattr(args, key)
        if val is not None:
            overrides[key] = val
    try:
        cfg = load_config(args.config, overrides)
        out_dir = Path(cfg["out_dir"])
        try:
            out_dir.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise ConfigError(f"cannot create output directory {out_dir}: {exc}") from exc
        write_resolved(cfg, args.command, out_dir)
        limit = nullcontext()
        if cfg["threads"]:
            from threadpoolctl import threadpool_limits
            limit = threadpool_limits(cfg["threads"])
        with limit:
            return COMMANDS[args.command](cfg, out_dir)
    except (ConfigError, MetaImageError, GeometryError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NonFiniteLoss as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
