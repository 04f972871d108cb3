"""Prototype-guided tail mining: candidate selection, injection, and tail loss."""

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from ._ops import safe_normalize, softmax
from .losses import cross_entropy
from .prototype_bank import PrototypeBank, normalized_prototypes
from .voxel_core import ClassCatalog, EMPTY, IGNORE

DEFAULT_ETA = 0.3
DEFAULT_DELTA = 0.1
KTOP_RATIO_KITTI = 0.02
KTOP_RATIO_KITTI360 = 0.0078


def k_top_from_ratio(ratio, n_voxels):
    return int(round(ratio * n_voxels))


@dataclass(frozen=True, eq=False)
class TailSelection:
    indices: np.ndarray  # ranked, best first
    sims: np.ndarray  # (n_voxels, k_cls)
    margins: np.ndarray  # (n_voxels,)
    tail_classes: tuple
    eta: float
    delta: float
    k_top: int
    tau_tail: float = 1.0
    warning: str = ""

    @property
    def size(self):
        return int(self.indices.size)


@dataclass(eq=False)
class TailInjector:
    """``psi``: two affine layers with a ReLU between; ``phi``: affine tail head."""

    psi_w1: np.ndarray  # (C, C)
    psi_b1: np.ndarray  # (C,)
    psi_w2: np.ndarray  # (C, C)
    psi_b2: np.ndarray  # (C,)
    phi_w: np.ndarray  # (C, k_cls)
    phi_b: np.ndarray  # (k_cls,)

    def __post_init__(self):
        c = self.psi_w1.shape[0]
        shapes = {
            "psi_w1": (c, c), "psi_b1": (c,), "psi_w2": (c, c), "psi_b2": (c,),
            "phi_w": (c, self.phi_b.shape[0]),
        }
        for name, shape in shapes.items():
            if getattr(self, name).shape != shape:
                raise ValueError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")

    @classmethod
    def init(cls, channels, k_cls, rng, scale=0.1):
        """Random first layers and a zero second ``psi`` layer (injection starts at zero)."""
        return cls(
            psi_w1=rng.normal(0.0, scale, (channels, channels)),
            psi_b1=np.zeros(channels),
            psi_w2=np.zeros((channels, channels)),
            psi_b2=np.zeros(channels),
            phi_w=rng.normal(0.0, scale, (channels, k_cls)),
            phi_b=np.zeros(k_cls),
        )

    def psi(self, v):
        hidden = v @ self.psi_w1 + self.psi_b1
        return np.maximum(hidden, 0.0) @ self.psi_w2 + self.psi_b2, hidden

    def phi(self, x):
        return x @ self.phi_w + self.phi_b


def prototype_similarities(features, bank: PrototypeBank) -> np.ndarray:
    """Cosine similarity of every voxel with every normalized prototype."""
    unit, _ = safe_normalize(features)
    return unit @ normalized_prototypes(bank).T


def similarity_margins(sims):
    if sims.shape[1] < 2:
        return sims[:, 0].copy()
    top2 = np.partition(sims, -2, axis=1)[:, -2:]
    return top2[:, 1] - top2[:, 0]


def _tail_ids(tail):
    if isinstance(tail, ClassCatalog):
        tail = tail.tail_set
    return tuple(sorted(int(k) for k in tail))


def select_tail_candidates(sims, tail, eta=DEFAULT_ETA, delta=DEFAULT_DELTA, k_top=0,
                           tau_tail=1.0) -> TailSelection:
    """Two strict threshold filters, then the ``k_top`` best by tail similarity.

    ``tail`` is a :class:`ClassCatalog` or an iterable of class ids. The
    margin is taken over all classes; ties rank by ascending voxel index.
    """
    sims = np.asarray(sims, dtype=np.float64)
    tail_ids = _tail_ids(tail)
    margins = similarity_margins(sims)
    if not tail_ids:
        return TailSelection(np.zeros(0, dtype=np.int64), sims, margins, (), eta, delta,
                             int(k_top), tau_tail, warning="empty tail set")
    tail_sim = sims[:, np.array(tail_ids) - 1].max(axis=1)
    passing = np.flatnonzero((tail_sim > eta) & (margins > delta))
    order = np.argsort(-tail_sim[passing], kind="stable")
    chosen = passing[order[: max(int(k_top), 0)]]
    return TailSelection(chosen, sims, margins, tail_ids, eta, delta, int(k_top), tau_tail)


class Injection(NamedTuple):
    features: np.ndarray
    weights: np.ndarray  # (n_sel, n_tail)
    aggregate: np.ndarray  # (n_sel, C)
    hidden: np.ndarray  # psi pre-activation


def inject_tail(features, sel: TailSelection, bank: PrototypeBank,
                injector: TailInjector) -> Injection:
    x = np.asarray(features, dtype=np.float64)
    out = x.copy()
    c = x.shape[1]
    if sel.size == 0 or not sel.tail_classes:
        n_tail = len(sel.tail_classes)
        return Injection(out, np.zeros((0, n_tail)), np.zeros((0, c)), np.zeros((0, c)))
    cols = np.array(sel.tail_classes) - 1
    w = softmax(sel.sims[sel.indices][:, cols] / sel.tau_tail, axis=1)
    agg = w @ bank.prototypes[cols]
    delta, hidden = injector.psi(agg)
    out[sel.indices] = x[sel.indices] + delta
    return Injection(out, w, agg, hidden)


def tail_targets(sel: TailSelection, labels):
    """Selected voxels with a semantic ground-truth label, and those labels."""
    y = np.asarray(labels).reshape(-1)
    idx = sel.indices
    keep = (y[idx] != IGNORE) & (y[idx] != EMPTY)
    return idx[keep], y[idx[keep]]


def tail_loss(refined, sel: TailSelection, labels, injector: TailInjector):
    """Mean cross-entropy of ``phi`` over selected, semantically labelled voxels.

    Returns ``(loss, grads)`` with gradient entries ``phi_w``, ``phi_b`` and
    ``refined`` (full volume, zero off the selection).
    """
    x = np.asarray(refined, dtype=np.float64)
    grads = {
        "phi_w": np.zeros_like(injector.phi_w),
        "phi_b": np.zeros_like(injector.phi_b),
        "refined": np.zeros_like(x),
    }
    idx, y = tail_targets(sel, labels)
    if idx.size == 0:
        return 0.0, grads
    loss, g = cross_entropy(injector.phi(x[idx]), y - 1)
    grads["phi_w"] = x[idx].T @ g
    grads["phi_b"] = g.sum(axis=0)
    grads["refined"][idx] = g @ injector.phi_w.T
    return loss, grads
