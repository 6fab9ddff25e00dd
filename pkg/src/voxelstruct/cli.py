"""Command-line entry point: gen-data, train and eval subcommands.

Exit codes: 0 ok, 1 training diverged, 2 bad arguments, 3 I/O failure,
4 data problem (e.g. missing annotations), 5 configuration mismatch.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import dataset as ds
from . import eval as ev
from . import nets
from . import training as tr
from .config import ConfigError, RunConfig, describe_defaults

EXIT_OK, EXIT_DIVERGED, EXIT_ARGS, EXIT_IO, EXIT_DATA, EXIT_MISMATCH = 0, 1, 2, 3, 4, 5


class CliError(Exception):
    def __init__(self, code: int, msg: str):
        super().__init__(msg)
        self.code = code


def worker_threads() -> int:
    """Worker cap from VOXELSTRUCT_THREADS (default: logical cores)."""
    raw = os.environ.get("VOXELSTRUCT_THREADS")
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            raise CliError(EXIT_ARGS, f"VOXELSTRUCT_THREADS must be an integer, got {raw!r}")
    return os.cpu_count() or 1


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x != ""]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _ints(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x != ""]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _fraction(text: str) -> float:
    v = float(text)
    if not 0.0 <= v < 1.0:
        raise argparse.ArgumentTypeError(f"fraction must be in [0, 1), got {v}")
    return v


class _HelpFormatter(argparse.RawDescriptionHelpFormatter, argparse.ArgumentDefaultsHelpFormatter):
    """Append defaults only where the help text does not already give one."""

    def _get_help_string(self, action):
        text = action.help or ""
        if "(default" in text or "(required)" in text or action.required or action.default is None:
            return text
        return super()._get_help_string(action)


def build_parser() -> argparse.ArgumentParser:
    fmt = _HelpFormatter
    p = argparse.ArgumentParser(
        prog="voxelstruct", formatter_class=fmt,
        description="Structure-aware voxel shape generation: data, training and evaluation.",
        epilog="Exit codes: 0 ok, 1 diverged, 2 arguments, 3 I/O, 4 data, 5 config mismatch. "
               "VOXELSTRUCT_THREADS caps worker threads.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a procedural chair dataset", formatter_class=fmt)
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--count", type=int, default=200, help="number of chairs")
    g.add_argument("--dim", type=int, default=16, help="grid resolution D")
    g.add_argument("--seed", type=int, default=0, help="generator seed")
    g.add_argument("--annotated-frac", type=_fraction, default=0.24,
                   help="fraction of each split with landmark files")
    g.add_argument("--test-frac", type=_fraction, default=0.2, help="held-out fraction")
    g.add_argument("--hard", action="store_true", help="include zero- and five-leg chairs")

    t = sub.add_parser("train", help="train the VAE, the detector, or both jointly",
                       formatter_class=fmt,
                       epilog="Config keys and defaults (override with --set key=value):\n"
                              + describe_defaults())
    t.add_argument("--mode", choices=("vae", "detector", "joint"), required=True,
                   help="vae / detector pretraining or joint collaborative training (required)")
    t.add_argument("--data", required=True, help="dataset directory (required)")
    t.add_argument("--out", required=True, help="run directory (required)")
    t.add_argument("--config", default=None, help="JSON run config (default: built-in desk config)")
    t.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="config override, repeatable, e.g. train.vae.epochs=30 (default: none)")
    t.add_argument("--seed", type=int, default=None,
                   help="training seed, overrides train.seed (default: config value)")
    t.add_argument("--init", default=None,
                   help="checkpoint(s) to start from; joint mode needs VAE_CKPT,DETECTOR_CKPT "
                        "(default: fresh initialization)")
    t.add_argument("--reconstructor", default=None,
                   help="detector mode: VAE checkpoint enabling the robustness term (default: none)")
    t.add_argument("--record-timing", action="store_true",
                   help="fill the wall_ms log column (breaks byte-identical reruns) (default: off)")

    e = sub.add_parser("eval", help="run an evaluation protocol", formatter_class=fmt)
    e.add_argument("--protocol", choices=("iou", "complete", "sweep", "interpolate", "consistency"),
                   required=True, help="evaluation protocol")
    e.add_argument("--models", required=True, help="checkpoint file(s), comma-separated")
    e.add_argument("--names", default=None, help="model names for reports, comma-separated "
                                                 "(default: checkpoint stems)")
    e.add_argument("--detector", default=None, help="checkpoint supplying detector weights")
    e.add_argument("--data", default=None, help="dataset directory (all but consistency)")
    e.add_argument("--split", choices=("train", "test", "all"), default="test",
                   help="dataset split to evaluate")
    e.add_argument("--limit", type=int, default=None, help="evaluate at most this many samples")
    e.add_argument("--out", required=True, help="report directory")
    e.add_argument("--threshold", type=float, default=0.5, help="IoU binarization threshold")
    e.add_argument("--sparsify", type=float, default=0.0, help="complete: drop probability")
    e.add_argument("--dilate", type=int, default=0, help="complete: dilation iterations")
    e.add_argument("--crop", default=None, metavar="AXIS:SIDE:FRAC",
                   help="complete: remove a slab, e.g. x:low:0.33")
    e.add_argument("--levels", type=_floats, default=[0.0, 0.25, 0.5, 0.75],
                   help="sweep: sparseness levels")
    e.add_argument("--seeds", type=_ints, default=[0], help="sweep/complete: degradation seeds")
    e.add_argument("--k", type=int, default=8, help="interpolate: number of frames")
    e.add_argument("--pair", type=_ints, default=None,
                   help="interpolate: two sample ids (default: first two of the split)")
    e.add_argument("--n", type=int, default=64, help="consistency: number of prior samples")
    e.add_argument("--seed", type=int, default=0, help="consistency: prior sampling seed")
    return p


# ---------------------------------------------------------------- helpers

def _load_data(path) -> ds.LoadedData:
    root = Path(path)
    if not (root / "manifest.json").is_file():
        raise CliError(EXIT_IO, f"no dataset manifest at {root / 'manifest.json'}")
    try:
        return ds.load_dataset(root)
    except (OSError, ValueError, KeyError) as exc:
        raise CliError(EXIT_DATA, f"cannot read dataset {root}: {exc}")


def _run_config(args, data: ds.LoadedData) -> RunConfig:
    try:
        cfg = RunConfig.load(args.config, args.set)
    except ConfigError as exc:
        raise CliError(EXIT_ARGS, f"config: {exc}")
    except OSError as exc:
        raise CliError(EXIT_IO, f"config: {exc}")
    dim = data.shapes.shape[-1]
    explicit = any(s.startswith("net.grid_dim") for s in args.set)
    if args.config is not None:
        explicit = explicit or "grid_dim" in json.loads(Path(args.config).read_text()).get("net", {})
    if cfg.net.grid_dim != dim:
        if explicit:
            raise CliError(EXIT_MISMATCH, f"config grid_dim {cfg.net.grid_dim} != dataset dim {dim}")
        doc = cfg.to_dict()
        doc["net"]["grid_dim"] = dim
        cfg = RunConfig.from_dict(doc)
    if args.seed is not None:
        doc = cfg.to_dict()
        doc["train"]["seed"] = args.seed
        cfg = RunConfig.from_dict(doc)
    if args.record_timing:
        cfg.train.record_timing = True
    return cfg


def _ckpt_config(path: Path) -> RunConfig:
    cfg_path = path.parent / "config.json"
    if not cfg_path.is_file():
        raise CliError(EXIT_IO, f"no config.json next to checkpoint {path}")
    doc = json.loads(cfg_path.read_text())
    stored_hash = doc.get("net_hash")
    cfg = RunConfig.from_dict({k: doc[k] for k in ("net", "train", "data") if k in doc})
    if stored_hash and stored_hash != cfg.net_hash:
        raise CliError(EXIT_MISMATCH, f"{cfg_path}: stored net hash does not match its contents")
    return cfg


def _load_model(path_text: str) -> tuple[RunConfig, dict]:
    path = Path(path_text)
    if not path.is_file():
        raise CliError(EXIT_IO, f"checkpoint not found: {path}")
    cfg = _ckpt_config(path)
    try:
        params = nets.load_checkpoint(path, cfg.net)
    except nets.CheckpointError as exc:
        raise CliError(EXIT_MISMATCH, f"{path}: {exc}")
    except OSError as exc:
        raise CliError(EXIT_IO, f"{path}: {exc}")
    return cfg, params


def _require_same_net(cfgs: list[RunConfig], what: str):
    hashes = {c.net_hash for c in cfgs}
    if len(hashes) > 1:
        raise CliError(EXIT_MISMATCH, f"{what}: checkpoints were built with different network configs")


def _groups(params: dict) -> tuple[dict, dict, dict]:
    enc, gen, det = nets.split_groups(params)
    return enc, gen, det


def _as_dtype(params: dict, dtype) -> dict:
    return {k: np.asarray(v, dtype=dtype) for k, v in params.items()}


# ---------------------------------------------------------------- commands

def cmd_gen_data(args) -> int:
    if args.count < 1:
        raise CliError(EXIT_ARGS, "--count must be >= 1")
    if args.dim < 16 or args.dim & (args.dim - 1):
        raise CliError(EXIT_ARGS, "--dim must be a power of two >= 16")
    try:
        man = ds.generate_dataset(args.out, args.count, args.dim, args.seed, args.annotated_frac,
                                  args.test_frac, args.hard, threads=min(worker_threads(), 8))
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write dataset: {exc}")
    except ValueError as exc:
        raise CliError(EXIT_ARGS, str(exc))
    s = man["samples"]
    n_train = sum(e["split"] == "train" for e in s)
    print(f"wrote {len(s)} shapes to {args.out}: train={n_train} test={len(s) - n_train} "
          f"annotated={sum(e['annotated'] for e in s)} hash={man['config_hash']}")
    return EXIT_OK


def cmd_train(args) -> int:
    data = _load_data(args.data)
    cfg = _run_config(args, data)
    net, tc = cfg.net, cfg.train
    dt = tc.np_dtype
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot create {out}: {exc}")
    train = data.train
    labeled = train.labeled
    inits = [] if args.init is None else [x for x in args.init.split(",") if x]
    loaded = [_load_model(p) for p in inits]
    _require_same_net([cfg] + [c for c, _ in loaded], "--init")
    extra = {"mode": args.mode, "data_hash": data.manifest.get("config_hash")}

    if args.mode in ("detector", "joint") and len(labeled.ids) == 0:
        raise CliError(EXIT_DATA, f"{args.mode} mode needs annotated training samples; "
                                  f"{args.data} has none (regenerate with --annotated-frac > 0)")
    merged: dict = {}
    for _, p in loaded:
        merged.update(p)
    enc, gen, det = _groups(merged)

    try:
        if args.mode == "vae":
            init = (enc, gen) if enc and gen else None
            enc, gen, log = tr.pretrain_vae(train.shapes, net, tc, init=init, out_dir=out)
            params = {**enc, **gen}
        elif args.mode == "detector":
            recon = None
            if args.reconstructor:
                rc, rp = _load_model(args.reconstructor)
                _require_same_net([cfg, rc], "--reconstructor")
                re, rg, _ = _groups(rp)
                recon = (re, rg)
            det, log = tr.pretrain_detector(labeled.shapes, labeled.landmarks, net, tc,
                                            reconstructor=recon, init=det or None, out_dir=out)
            params = det
        else:
            if not (enc and gen and det):
                raise CliError(EXIT_ARGS, "joint mode needs --init VAE_CKPT,DETECTOR_CKPT "
                                          "covering encoder, generator and detector")
            enc, gen, det, log = tr.collaborative_train(enc, gen, det, labeled.shapes,
                                                        labeled.landmarks, train.shapes, net, tc,
                                                        out_dir=out)
            params = {**enc, **gen, **det}
    except tr.TrainingDivergence as exc:
        if getattr(exc, "log", None) is not None:
            exc.log.to_csv(out / "train_log.csv")
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    try:
        nets.save_checkpoint(out / "model.ckpt", _as_dtype(params, dt))
        log.to_csv(out / "train_log.csv")
        cfg.save(out / "config.json", extra)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write outputs: {exc}")
    # joint logs interleave detector passes; summarize the shape steps only
    tot = np.array([r["total"] for r in log.records if not r["stage"].startswith("detector@")])
    first, last = (tot[0], tot[-1]) if len(tot) else (float("nan"), float("nan"))
    print(f"{args.mode}: {len(log)} steps, total loss {first:.4f} -> {last:.4f}; "
          f"wrote {out / 'model.ckpt'}")
    return EXIT_OK


def _parse_crop(text):
    if text is None:
        return None, "low", 0.0
    try:
        axis, side, frac = text.split(":")
        frac = float(frac)
    except ValueError:
        raise CliError(EXIT_ARGS, f"--crop expects AXIS:SIDE:FRAC, got {text!r}")
    if axis not in ("x", "y", "z") or side not in ("low", "high") or not 0 <= frac <= 1 / 3 + 1e-9:
        raise CliError(EXIT_ARGS, f"bad --crop {text!r}")
    return axis, side, frac


def cmd_eval(args) -> int:
    paths = [x for x in args.models.split(",") if x]
    if not paths:
        raise CliError(EXIT_ARGS, "--models is empty")
    names = args.names.split(",") if args.names else [Path(p).parent.name or Path(p).stem for p in paths]
    if len(names) != len(paths) or len(set(names)) != len(names):
        raise CliError(EXIT_ARGS, "--names must give one distinct name per model")
    models = [_load_model(p) for p in paths]
    cfgs = [c for c, _ in models]
    det_extra = None
    if args.detector:
        dc, dp = _load_model(args.detector)
        cfgs.append(dc)
        det_extra = _groups(dp)[2]
    _require_same_net(cfgs, "--models")
    net = cfgs[0].net
    chash = cfgs[0].net_hash
    out = Path(args.out)

    shapes = ids = None
    if args.protocol != "consistency":
        if args.data is None:
            raise CliError(EXIT_ARGS, f"--data is required for protocol {args.protocol}")
        data = _load_data(args.data)
        if data.shapes.shape[-1] != net.grid_dim:
            raise CliError(EXIT_MISMATCH, f"dataset dim {data.shapes.shape[-1]} != model grid_dim "
                                          f"{net.grid_dim}")
        part = data if args.split == "all" else getattr(data, args.split)
        if args.limit is not None:
            part = part.subset(np.arange(len(part.ids)) < args.limit)
        shapes, ids = part.shapes, part.ids
        if len(ids) == 0:
            raise CliError(EXIT_DATA, f"split {args.split!r} is empty")

    groups = [_groups(p) for _, p in models]
    for name, (enc, gen, _) in zip(names, groups):
        if args.protocol != "consistency" and not (enc and gen):
            raise CliError(EXIT_DATA, f"model {name} has no encoder/generator weights")
    try:
        if args.protocol in ("iou", "complete"):
            deg = ev.Degradation()
            if args.protocol == "complete":
                axis, side, frac = _parse_crop(args.crop)
                deg = ev.Degradation(args.sparsify, args.dilate, axis, side, frac)
            for name, (enc, gen, _) in zip(names, groups):
                rows = []
                for sd in args.seeds:
                    rep = ev.completion_eval(enc, gen, shapes, net, deg, args.threshold, sd, ids, chash)
                    rows += rep.rows
                rep = ev.EvalReport.from_rows(args.protocol, rows, chash, args.seeds,
                                              extra={"degradation": deg.to_dict(), "model": name})
                rep.write(out, f"{args.protocol}_{name}")
                print(f"{name}: mean IoU {rep.aggregates['iou']['mean']:.4f} over {len(rows)} rows")
        elif args.protocol == "sweep":
            rep = ev.sparseness_sweep({n: (g[0], g[1]) for n, g in zip(names, groups)}, shapes, net,
                                      args.levels, args.seeds, args.threshold, chash)
            rep.write(out, "sweep")
            if len(names) == 2:
                rows = ev.paired_sweep_rows(rep, names[0], names[1])
                ev.EvalReport.from_rows("sweep-paired", rows, chash, args.seeds).write(out, "sweep_paired")
            for r in rep.rows:
                print(f"{r['model']} level={r['level']:.2f} mean IoU {r['mean_iou']:.4f}")
        elif args.protocol == "interpolate":
            if args.k < 2:
                raise CliError(EXIT_ARGS, "--k must be >= 2")
            pair = args.pair or [int(ids[0]), int(ids[min(1, len(ids) - 1)])]
            lookup = {int(i): j for j, i in enumerate(ids)}
            if len(pair) != 2 or any(p not in lookup for p in pair):
                raise CliError(EXIT_DATA, f"--pair ids must be two ids from split {args.split!r}")
            for name, (enc, gen, det) in zip(names, groups):
                det = det or det_extra or None
                track = ev.interpolate(enc, gen, shapes[lookup[pair[0]]], shapes[lookup[pair[1]]],
                                       args.k, net, det=det, endpoint_ids=tuple(pair))
                d = out / f"interpolate_{name}"
                d.mkdir(parents=True, exist_ok=True)
                rows = []
                for i, g in enumerate(track.grids):
                    ds.write_voxels(d / f"frame{i:03d}.voxf", g.astype(np.float32))
                    ev.export_views(g, d / f"frame{i:03d}")
                    row = {"frame": i, "t": float(track.ts[i])}
                    if i + 1 < len(track.grids):
                        row["iou_next"] = ev.iou(g, track.grids[i + 1], args.threshold)
                    rows.append(row)
                ev.EvalReport.from_rows("interpolate", rows, chash, [],
                                        extra={"endpoints": list(pair),
                                               "smoothness": track.smoothness(args.threshold)}
                                        ).write(d, "track")
                print(f"{name}: {args.k} frames, consecutive-frame IoU {track.smoothness():.4f}")
        else:
            for name, (_, gen, det) in zip(names, groups):
                det = det or det_extra
                if not gen or not det:
                    raise CliError(EXIT_DATA, f"model {name} needs generator and detector weights "
                                              "(pass --detector CKPT)")
                rep = ev.consistency_report(gen, det, net, args.n, args.seed, chash)
                rep.write(out, f"consistency_{name}")
                print(f"{name}: overall consistency {rep.aggregates['overall']:.4f}")
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write reports: {exc}")
    return EXIT_OK


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with status 2 on bad arguments
    try:
        return COMMANDS[args.command](args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
