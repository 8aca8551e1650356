"""Command-line entry points: gen-data, train, reconstruct, eval, maskgen.

Exit codes: 0 ok, 2 configuration error, 3 runtime error, 4 I/O error.
"""
from __future__ import annotations

import argparse
import csv
import logging
import math
import os
import shutil
import sys
from contextlib import contextmanager

import numpy as np

from . import data, physics
from .config import AcsSpec, EvalGrid, RunConfig, set_deterministic
from .errors import ConfigError, FormatError, UmriError
from .metrics import MetricReport, evaluate
from .nn.weights import load_weights
from .train import LOG_COLUMNS, predict, stack_samples, train

log = logging.getLogger("umri")

SCHEMA_VERSION = 1
EVAL_COLUMNS = ("schema_version", "kind", "variant", "family", "R", "acs", "sample_id", "n",
                "ssim", "psnr", "nmse", "ssim_std", "psnr_std", "nmse_std",
                "delta_ssim", "delta_psnr", "delta_nmse")
INCOMPLETE = ".incomplete"


@contextmanager
def output_dir(path: str):
    """Create ``path`` with an ``.incomplete`` marker removed only on success."""
    os.makedirs(path, exist_ok=True)
    marker = os.path.join(path, INCOMPLETE)
    with open(marker, "w"):
        pass
    yield path
    os.remove(marker)


def _fmt(v) -> str:
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


def _volume_path(root: str, sample_id: str) -> str:
    return os.path.join(root, "volumes", f"{sample_id}.umrik")


def load_samples(root: str, split: str, family: str | None = None, limit: int | None = None):
    manifest = data.DatasetManifest.read_csv(os.path.join(root, "manifest.csv"))
    entries = [e for e in manifest.split(split) if family is None or e.family == family]
    if limit is not None:
        entries = entries[:limit]
    out = []
    for e in entries:
        k, meta = data.read_volume(_volume_path(root, e.sample_id))
        out.append(data.sample_from_kspace(k, meta, e.sample_id))
    return out


def load_checkpoint(path: str):
    """Model and its run config from a checkpoint plus its ``.ini`` sidecar."""
    sidecar = f"{path}.ini"
    if not os.path.exists(path):
        raise FileNotFoundError(f"checkpoint not found: {path}")
    if not os.path.exists(sidecar):
        raise FileNotFoundError(f"checkpoint sidecar config not found: {sidecar}")
    cfg = RunConfig.load(sidecar, env={})
    model = cfg.build_model()
    load_weights(path).assign_to(model)
    model.eval()
    return model, cfg


def cmd_gen_data(args) -> int:
    cfg = RunConfig.load(args.config)
    manifest = data.build_manifest({cfg.family: cfg.count}, cfg.fractions, cfg.data_seed)
    entries = list(manifest.entries)
    ood = [f for f in cfg.ood_families if f != cfg.family]
    if ood and cfg.ood_count:
        extra = data.build_manifest({f: cfg.ood_count for f in ood}, (0.0, 0.0, 1.0), cfg.data_seed)
        entries += extra.entries
    with output_dir(args.out) as out:
        os.makedirs(os.path.join(out, "volumes"), exist_ok=True)
        for e in entries:
            s = data.make_sample(e.family, e.seed, cfg.size, cfg.coils, cfg.noise_std, e.sample_id)
            data.write_volume(_volume_path(out, e.sample_id), s.kspace, s.metadata)
        data.DatasetManifest(entries, manifest.fractions).write_csv(os.path.join(out, "manifest.csv"))
        cfg.write(os.path.join(out, "run.ini"))
    counts = {s: sum(e.split == s for e in entries) for s in data.SPLITS}
    print(f"wrote {len(entries)} volumes to {args.out} "
          f"(train={counts['train']} val={counts['val']} test={counts['test']})")
    return 0


def _write_log(path: str, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("schema_version",) + LOG_COLUMNS)
        for r in rows:
            w.writerow([SCHEMA_VERSION] + [_fmt(r[c]) for c in LOG_COLUMNS])


def cmd_train(args) -> int:
    cfg = RunConfig.load(args.config)
    set_deterministic(cfg.deterministic)
    train_set = load_samples(args.data, "train", cfg.family)
    val_set = load_samples(args.data, "val", cfg.family)
    if not train_set or not val_set:
        raise ConfigError(f"dataset {args.data} has no train/val samples of family {cfg.family}")
    model = cfg.build_model()
    with output_dir(args.out) as out:
        cfg.write(os.path.join(out, "run.ini"))
        log_path = os.path.join(out, "train_log.csv")
        best, state = train(model, train_set, val_set, cfg.mask(), cfg.schedule(),
                            checkpoint_dir=out, resume=args.resume, max_epochs=args.max_epochs,
                            on_epoch=lambda _row: None)
        _write_log(log_path, state.rows)
        shutil.copyfile(os.path.join(out, "run.ini"), os.path.join(out, "best.umriw.ini"))
    print(f"trained {state.epoch} epochs; best val SSIM {state.best_val:.6f} at epoch "
          f"{state.best_epoch}; checkpoint {os.path.join(args.out, 'best.umriw')}")
    return 0


def write_pgm(path: str, image: np.ndarray) -> None:
    img = np.asarray(image, dtype=np.float64)
    peak = img.max()
    scaled = np.zeros_like(img) if peak <= 0 else np.clip(img / peak, 0, 1)
    pixels = np.round(scaled * 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())


def read_pgm(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P5":
        raise FormatError(f"{path} is not a binary graymap")
    w, h = int(parts[1]), int(parts[2])
    return np.frombuffer(parts[4][:w * h], dtype=np.uint8).reshape(h, w)


def _mask_from_args(args, width: int) -> physics.SamplingMask:
    return AcsSpec.parse(args.acs).mask(width, args.acceleration)


def cmd_reconstruct(args) -> int:
    model, cfg = load_checkpoint(args.checkpoint)
    set_deterministic(cfg.deterministic)
    kspace, meta = data.read_volume(args.volume)
    mask = _mask_from_args(args, kspace.shape[-1])
    sample = data.sample_from_kspace(kspace, meta, os.path.basename(args.volume))
    k, target = stack_samples([sample], mask)
    recon = predict(model, k, mask)[0].numpy()
    prefix = args.out
    os.makedirs(os.path.dirname(os.path.abspath(prefix)), exist_ok=True)
    write_pgm(f"{prefix}.pgm", recon)
    recon.astype("<f4").tofile(f"{prefix}.raw")
    if meta.get("fully_sampled", True):
        m = evaluate(recon, target[0].numpy())
        print(f"ssim={m['ssim']:.6f} psnr={m['psnr']:.4f} nmse={m['nmse']:.6e}")
    else:
        print("reconstructed; no fully sampled target available")
    return 0


def evaluate_grid(model, variant: str, grid: EvalGrid, root: str, limit=None) -> list[dict]:
    """Sample, aggregate and zero-filled baseline rows for every grid cell, in cell order."""
    rows = []
    cache = {}
    for cell in grid.cells:
        if cell.family not in cache:
            cache[cell.family] = load_samples(root, "test", cell.family, limit)
        samples = cache[cell.family]
        if not samples:
            raise ConfigError(f"no test samples of family {cell.family} in {root}")
        mask = cell.acs.mask(samples[0].kspace.shape[-1], cell.acceleration)
        k, targets = stack_samples(samples, mask)
        recon = predict(model, k, mask).numpy()
        zf = physics.zero_filled(k).numpy()
        ours, base = MetricReport(), MetricReport()
        common = {"schema_version": SCHEMA_VERSION, "family": cell.family,
                  "R": cell.acceleration, "acs": cell.acs.label()}
        for s, r, z, t in zip(samples, recon, zf, targets.numpy()):
            m = ours.add(r, t)
            base.add(z, t)
            rows.append({**common, "kind": "sample", "variant": variant,
                         "sample_id": s.sample_id, "n": 1, **m})
        agg, bagg = ours.aggregate(), base.aggregate()
        deltas = {f"delta_{k}": agg[k] - bagg[k] for k in ("ssim", "psnr", "nmse")}
        rows.append({**common, "kind": "aggregate", "variant": variant, "sample_id": "",
                     "n": len(ours), **agg, **deltas})
        rows.append({**common, "kind": "baseline", "variant": "zero-filled", "sample_id": "",
                     "n": len(base), **bagg})
    return rows


def write_eval_csv(path: str, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EVAL_COLUMNS)
        for r in rows:
            w.writerow([_fmt(r.get(c, "")) for c in EVAL_COLUMNS])


def cmd_eval(args) -> int:
    model, cfg = load_checkpoint(args.checkpoint)
    set_deterministic(cfg.deterministic)
    grid = EvalGrid.parse(args.grid) if args.grid else cfg.eval_grid()
    rows = evaluate_grid(model, cfg.variant, grid, args.data, args.limit)
    tmp = f"{args.out}{INCOMPLETE}"
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    write_eval_csv(tmp, rows)
    os.replace(tmp, args.out)
    for r in rows:
        if r["kind"] != "sample":
            extra = f" delta_ssim={r['delta_ssim']:+.4f}" if r["kind"] == "aggregate" else ""
            print(f"{r['kind']:9s} {r['variant']:12s} {r['family']} R={r['R']} {r['acs']:9s} "
                  f"ssim={r['ssim']:.4f}±{r['ssim_std']:.4f} psnr={r['psnr']:.2f} "
                  f"nmse={r['nmse']:.4e}{extra}")
    return 0


def cmd_maskgen(args) -> int:
    mask = _mask_from_args(args, args.width)
    cols = mask.sampled_indices()
    print(f"sampled_columns: {' '.join(map(str, cols))}")
    print(f"sampled_count: {len(cols)}")
    print(f"net_acceleration: {mask.net_acceleration!r}")
    if args.out:
        with open(args.out, "w") as fh:
            fh.write("".join(str(int(c)) for c in mask.columns) + "\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="umri", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic multi-coil dataset")
    g.add_argument("--config")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train an unrolled model")
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--resume", action="store_true")
    t.add_argument("--max-epochs", type=int, default=None,
                   help="stop after this many epochs in this invocation")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("reconstruct", help="reconstruct one volume")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--volume", required=True)
    r.add_argument("--acceleration", type=int, required=True)
    r.add_argument("--acs", default="lines=8", help="lines=N or cf=F")
    r.add_argument("--out", required=True, help="output prefix (.pgm and .raw are written)")
    r.set_defaults(func=cmd_reconstruct)

    e = sub.add_parser("eval", help="evaluate a checkpoint over an R x ACS x family grid")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--grid", help="cells R:acs:family, comma separated")
    e.add_argument("--limit", type=int, default=None, help="max test samples per family")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    m = sub.add_parser("maskgen", help="print an equispaced mask")
    m.add_argument("--width", type=int, required=True)
    m.add_argument("--acceleration", type=int, required=True)
    m.add_argument("--acs", default="lines=24", help="lines=N or cf=F")
    m.add_argument("--out")
    m.set_defaults(func=cmd_maskgen)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (FormatError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return 4
    except (UmriError, RuntimeError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
