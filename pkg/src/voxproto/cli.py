"""``voxproto`` command-line tool: synth, train, score, eval, dump.

Exit codes: 0 ok, 2 configuration or shape error, 3 I/O error,
4 numeric abort during training, 5 metric precondition not met.
"""

import argparse
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import container, persist
from .config import ConfigError, RunConfig, build_config, load_config
from .echoood import score_scene
from .metrics import UndefinedMetricError, evaluate
from .prototype_bank import usable_classes
from .synth import scene_seed
from .trainer import HELDOUT_INDEX, TrainingAborted, feature_model_for, forward, make_scene, train
from .voxel_core import ClassCatalog, compute_class_catalog

log = logging.getLogger("voxproto")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4
EXIT_METRIC = 5

SCORE_CHANNELS = ("local_logit", "local_proto", "global_proto", "fused")


class CliError(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


def _sidecar(path: Path, tag: str, suffix: str = None):
    return path.with_name(f"{path.stem}.{tag}{suffix if suffix is not None else path.suffix}")


def _config_from_args(args) -> RunConfig:
    return load_config(args.config, _overrides(args))


def cmd_synth(args):
    run = _config_from_args(args)
    cfg = run.to_train_config()
    start = HELDOUT_INDEX if args.split == "heldout" else 0
    indices = [start + i for i in range(args.count)]
    model = feature_model_for(cfg)
    with ThreadPoolExecutor(max_workers=max(1, args.jobs)) as pool:
        scenes = list(pool.map(lambda i: make_scene(cfg, i, model), indices))
    out = Path(args.out)
    entries = []
    for i, (index, scene) in enumerate(zip(indices, scenes)):
        name = f"scene_{i:03d}"
        manifest = {
            "seed": cfg.seed, "scene_index": index, "scene_seed": scene_seed(cfg.seed, index),
            "dims": list(cfg.scene.dims.shape), "voxel_size": cfg.scene.dims.voxel_size,
            "channels": cfg.features.channels, "k_cls": cfg.scene.k_cls, "split": args.split,
        }
        persist.write_scene(out / name, scene, manifest)
        entries.append({"dir": name, **manifest})
    top = {"seed": cfg.seed, "config": run.to_dict(), "scenes": entries}
    (out / persist.MANIFEST).write_text(json.dumps(top, indent=1, sort_keys=True))
    print(f"wrote {len(entries)} scene(s) to {out}")


def _history_metadata(run: RunConfig):
    t = run.train
    return {"seed": t.seed, "steps": t.steps, "enable_pbcl": t.enable_pbcl,
            "enable_pgsi": t.enable_pgsi, "enable_pgtm": t.enable_pgtm, "config": run.to_dict()}


def _save_run(out: Path, state, step, run, history):
    ckpt = out / "checkpoint"
    persist.save_checkpoint(ckpt, state, step, run.to_dict())
    text = persist.history_csv(history, _history_metadata(run))
    (ckpt / "history.csv").write_text(text)
    (out / "history.csv").write_text(text)


def cmd_train(args):
    out = Path(args.out)
    state, history, start = None, None, 0
    if args.resume:
        ckpt = Path(args.resume)
        state, start, saved = persist.load_checkpoint(ckpt)
        run = load_config(args.config, _overrides(args)) if args.config else \
            build_config(saved or {}, _overrides(args), env={})
        hist_path = ckpt / "history.csv"
        history = persist.read_history(hist_path)[0] if hist_path.exists() else None
        if history is not None and len(history) != start:
            raise CliError(f"history has {len(history)} rows, checkpoint is at step {start}", EXIT_CONFIG)
    else:
        run = _config_from_args(args)
    cfg = run.to_train_config()
    if start > cfg.steps:
        raise CliError(f"checkpoint step {start} is past the configured {cfg.steps} steps", EXIT_CONFIG)
    out.mkdir(parents=True, exist_ok=True)
    try:
        state, history = train(cfg, state=state, history=history, start_step=start, jobs=args.jobs)
    except TrainingAborted as exc:
        _save_run(out, exc.state, len(exc.history), run, exc.history)
        raise CliError(f"training aborted: {exc}", EXIT_NUMERIC) from exc
    _save_run(out, state, cfg.steps, run, history)
    last = history.rows[-1] if history.rows else {}
    print(f"trained {cfg.steps - start} step(s); final total loss {last.get('total', float('nan')):.6g}")


def _overrides(args):
    overrides = list(args.set or [])
    if getattr(args, "steps", None) is not None:
        overrides.append(f"train.steps={args.steps}")
    return overrides


def cmd_score(args):
    state, step, saved = persist.load_checkpoint(args.checkpoint)
    run = build_config(saved or {}, env={})
    cfg = run.to_train_config()
    scene = persist.read_scene(args.scene)
    if scene.coarse.shape[1] != state.channels:
        raise CliError(f"scene has {scene.coarse.shape[1]} channels, checkpoint expects {state.channels}",
                       EXIT_CONFIG)
    fwd = forward(state, scene, cfg)
    scores = score_scene(fwd.refined, fwd.class_logits, fwd.predictions, state.bank, cfg.tau_conf)
    warnings = [w for w in (scores.warning,) if w]
    if not usable_classes(state.bank):
        warnings.append("no usable prototypes; global scores fall back to the conservative maximum")
    for w in warnings:
        print(f"warning: {w}", file=sys.stderr)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    dims = scene.dims.shape
    container.write_volume(out, scores.stack(), dims, 1)
    container.write_volume(_sidecar(out, "pred"), fwd.predictions, dims, 3)
    container.write_volume(_sidecar(out, "probs"), fwd.probabilities, dims, 1)
    cat = state.catalog
    meta = {"channels": list(SCORE_CHANNELS), "checkpoint_step": step, "k_cls": cat.k_cls,
            "frequencies": list(cat.frequencies), "tail_threshold": cat.tail_threshold,
            "warnings": warnings}
    _sidecar(out, "meta", ".json").write_text(json.dumps(meta, indent=1, sort_keys=True))
    print(f"wrote scores for {scene.labels.size} voxels to {out}")


def cmd_eval(args):
    run = _config_from_args(args)
    out_scores = Path(args.scores)
    vol = container.read_volume(out_scores)
    if vol.channels != len(SCORE_CHANNELS):
        raise CliError(f"{out_scores} has {vol.channels} channels, expected {len(SCORE_CHANNELS)}", EXIT_CONFIG)
    pred = container.read_volume(_sidecar(out_scores, "pred")).data[:, 0].astype(np.int64)
    probs = np.array(container.read_volume(_sidecar(out_scores, "probs")).data, dtype=np.float64)
    scene = persist.read_scene(args.gt)
    if vol.dims != scene.dims.shape:
        raise CliError(f"score grid {vol.dims} differs from ground-truth grid {scene.dims.shape}", EXIT_CONFIG)
    meta_path = _sidecar(out_scores, "meta", ".json")
    if meta_path.exists():
        meta = json.loads(meta_path.read_text())
        catalog = ClassCatalog(meta["k_cls"], tuple(meta["frequencies"]), meta["tail_threshold"])
    else:
        catalog = compute_class_catalog(scene.labels, run.scene.k_cls, run.metrics.tail_threshold)
    if probs.shape[1] != catalog.k_cls + 1:
        raise CliError(f"probabilities have {probs.shape[1]} columns, expected {catalog.k_cls + 1}",
                       EXIT_CONFIG)
    radii = tuple(run.metrics.radii)
    if radii and not scene.anomaly.is_ood.any():
        raise CliError("AuPRC_r requested but the ground truth has no OOD voxels", EXIT_METRIC)
    fused = np.array(vol.data[:, -1], dtype=np.float64)
    report = evaluate(pred, probs, scene.labels, catalog,
                      scores=fused if radii else None, anomaly=scene.anomaly if radii else None,
                      radii=radii)
    text = report.to_csv()
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)


def cmd_dump(args):
    vol = container.read_volume(args.file)
    x, y, z = vol.dims
    print(f"file: {args.file}")
    print(f"dims: {x} x {y} x {z} ({x * y * z} voxels)")
    print(f"channels: {vol.channels}")
    print(f"dtype: {vol.dtype_code} ({container.DTYPES[vol.dtype_code].name})")
    data = np.asarray(vol.data, dtype=np.float64)
    for c in range(vol.channels):
        col = data[:, c]
        finite = col[np.isfinite(col)]
        if finite.size:
            print(f"  ch{c}: min={finite.min():.6g} max={finite.max():.6g} mean={finite.mean():.6g}"
                  f" nonzero={np.count_nonzero(col)} nonfinite={col.size - finite.size}")
        else:
            print(f"  ch{c}: no finite values")


def _add_config_args(p):
    p.add_argument("--config", type=Path, help="JSON run configuration (defaults when omitted)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config value; dotted path or unique leaf name")


def build_parser():
    parser = argparse.ArgumentParser(prog="voxproto", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate synthetic scenes")
    _add_config_args(p)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--split", choices=("heldout", "train"), default="heldout")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train and write a checkpoint plus history CSV")
    _add_config_args(p)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--resume", type=Path, metavar="CHECKPOINT")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("score", help="anomaly-score one scene with a checkpoint")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--scene", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("eval", help="metrics CSV from a score file and ground truth")
    _add_config_args(p)
    p.add_argument("--scores", type=Path, required=True)
    p.add_argument("--gt", type=Path, required=True, help="scene directory with labels and anomaly masks")
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("dump", help="print a container header and per-channel stats")
    p.add_argument("file", type=Path)
    p.set_defaults(func=cmd_dump)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except UndefinedMetricError as exc:
        print(f"metric error: {exc}", file=sys.stderr)
        return EXIT_METRIC
    except (container.ContainerError, OSError, json.JSONDecodeError, KeyError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        # dataclass invariants from the config objects surface here
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
