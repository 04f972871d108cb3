"""On-disk layouts: checkpoints, history CSV and scene directories.

Checkpoint directory::

    state.json            scalars, bank bookkeeping, class catalog, run config
    params/<block>.voxv   one float64 container per parameter block
    prototypes.voxv       float64 prototype matrix

Array blocks are stored as ``(rows, 1, 1)`` grids with the trailing axis as
channels, so every block round-trips exactly through the volume container.
"""

import csv
import io
import json
import math
from pathlib import Path

import numpy as np

from . import container
from .metrics import AnomalyGroundTruth
from .prototype_bank import PrototypeBank
from .trainer import History, ModelState, Scene
from .voxel_core import ClassCatalog, GridDims

CHECKPOINT_FORMAT = 1
F64 = 4
STATE_FILE = "state.json"
PARAMS_DIR = "params"
PROTOTYPES_FILE = "prototypes.voxv"

SCENE_FILES = {
    "labels": ("labels.voxv", 3),
    "features": ("features.voxv", 1),
    "visible": ("visible.voxv", 3),
    "anomaly": ("anomaly.voxv", 3),
}
MANIFEST = "manifest.json"


def _matrix_dims(arr):
    rows = arr.shape[0] if arr.ndim >= 1 else 1
    return (max(rows, 1), 1, 1)


def _write_block(path, arr):
    arr = np.asarray(arr, dtype=np.float64)
    shape = arr.shape
    flat = arr.reshape(1, 1) if arr.ndim == 0 else arr.reshape(shape[0], -1)
    if flat.shape[0] == 0 or flat.shape[1] == 0:
        raise ValueError(f"cannot store empty block of shape {shape}")
    container.write_volume(path, flat, _matrix_dims(flat), F64)
    return list(shape)


def _read_block(path, shape):
    vol = container.read_volume(path)
    if vol.dtype_code != F64:
        raise container.ContainerError(f"{path} is not a float64 container")
    return np.array(vol.data, dtype=np.float64).reshape(shape)


def _float_or_none(v):
    return None if math.isnan(v) else float(v)


def save_checkpoint(directory, state: ModelState, step: int, config: dict = None):
    d = Path(directory)
    (d / PARAMS_DIR).mkdir(parents=True, exist_ok=True)
    shapes = {name: _write_block(d / PARAMS_DIR / f"{name}.voxv", arr)
              for name, arr in sorted(state.params.items())}
    bank = state.bank
    _write_block(d / PROTOTYPES_FILE, bank.prototypes)
    cat = state.catalog
    meta = {
        "format": CHECKPOINT_FORMAT,
        "step": int(step),
        "blocks": shapes,
        "bank": {
            "shape": list(bank.prototypes.shape),
            "beta": bank.beta, "t": bank.t, "t_warm": bank.t_warm,
            "theta_max": bank.theta_max, "theta_min": bank.theta_min, "n_min": bank.n_min,
            "eps": bank.eps, "norm_eps": bank.norm_eps,
            "last_quality": [_float_or_none(q) for q in bank.last_quality],
            "last_count": [int(c) for c in bank.last_count],
            "initialized": [bool(b) for b in bank.initialized],
        },
        "catalog": {
            "k_cls": cat.k_cls,
            "frequencies": [float(f) for f in cat.frequencies],
            "tail_threshold": cat.tail_threshold,
            "names": list(cat.names),
        },
        "config": config,
    }
    (d / STATE_FILE).write_text(json.dumps(meta, indent=1, sort_keys=True))


def load_checkpoint(directory):
    """Return ``(state, step, config_dict)``."""
    d = Path(directory)
    try:
        meta = json.loads((d / STATE_FILE).read_text())
    except json.JSONDecodeError as exc:
        raise container.ContainerError(f"{d / STATE_FILE}: {exc}") from None
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise container.ContainerError(f"unsupported checkpoint format {meta.get('format')!r}")
    params = {name: _read_block(d / PARAMS_DIR / f"{name}.voxv", shape)
              for name, shape in meta["blocks"].items()}
    b = meta["bank"]
    bank = PrototypeBank(
        prototypes=_read_block(d / PROTOTYPES_FILE, b["shape"]),
        beta=b["beta"], t=b["t"], t_warm=b["t_warm"], theta_max=b["theta_max"],
        theta_min=b["theta_min"], n_min=b["n_min"], eps=b["eps"], norm_eps=b["norm_eps"],
        last_quality=np.array([math.nan if q is None else q for q in b["last_quality"]]),
        last_count=np.array(b["last_count"], dtype=np.int64),
        initialized=np.array(b["initialized"], dtype=bool),
    )
    c = meta["catalog"]
    catalog = ClassCatalog(c["k_cls"], tuple(c["frequencies"]), c["tail_threshold"], tuple(c["names"]))
    return ModelState(params, bank, catalog), meta["step"], meta.get("config")


def history_csv(history: History, metadata: dict = None) -> str:
    """CSV text; ``metadata`` becomes leading ``# key=value`` lines."""
    buf = io.StringIO()
    for key, value in (metadata or {}).items():
        buf.write(f"# {key}={json.dumps(value, sort_keys=True)}\n")
    columns = []
    for row in history.rows:
        columns += [k for k in row if k not in columns]
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in history.rows:
        writer.writerow(["" if row.get(k) is None else repr(row[k]) if isinstance(row.get(k), float)
                         else row.get(k, "") for k in columns])
    return buf.getvalue()


def read_history(path):
    """Parse a history CSV back into ``(History, metadata)``; numbers are restored exactly."""
    metadata, lines = {}, []
    for line in Path(path).read_text().splitlines():
        if line.startswith("# ") and "=" in line:
            key, value = line[2:].split("=", 1)
            metadata[key] = json.loads(value)
        else:
            lines.append(line)
    history = History()
    for rec in csv.DictReader(lines):
        row = {}
        for k, v in rec.items():
            if v == "":
                continue
            row[k] = int(v) if v.lstrip("-").isdigit() else float(v)
        history.append(row)
    return history, metadata


def write_scene(directory, scene: Scene, manifest: dict):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    dims = scene.dims.shape
    arrays = {
        "labels": scene.labels,
        "features": scene.coarse,
        "visible": scene.visible.astype(np.uint8),
        "anomaly": scene.anomaly.is_ood.astype(np.uint8),
    }
    for key, (name, code) in SCENE_FILES.items():
        container.write_volume(d / name, arrays[key], dims, code)
    (d / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True))


def read_scene(directory) -> Scene:
    d = Path(directory)
    manifest = json.loads((d / MANIFEST).read_text())
    vols = {key: container.read_volume(d / name) for key, (name, _) in SCENE_FILES.items()}
    shape = vols["labels"].dims
    for key, vol in vols.items():
        if vol.dims != shape:
            raise container.ContainerError(f"{key} grid {vol.dims} differs from labels grid {shape}")
    dims = GridDims(*shape, voxel_size=float(manifest.get("voxel_size", 0.2)))
    return Scene(
        coarse=np.array(vols["features"].data, dtype=np.float64),
        labels=vols["labels"].data[:, 0].astype(np.int64),
        visible=vols["visible"].data[:, 0].astype(bool),
        anomaly=AnomalyGroundTruth(dims, vols["anomaly"].data[:, 0].astype(bool)),
        dims=dims,
    )
