"""Desk-scale training loop over synthetic scenes.

Pipeline per scene: coarse features -> PGSI -> PGTM injection -> residual
affine refinement -> semantic and occupancy heads. Gradients are computed by
hand and applied with plain full-batch gradient descent. Prototypes move only
through :func:`~voxproto.prototype_bank.ema_update`.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import pgsi as pgsi_mod
from ._ops import safe_normalize, safe_normalize_backward, softmax
from .echoood import DEFAULT_TAU_CONF, score_scene
from .losses import (
    LossWeights,
    NonFiniteLossError,
    aux_occupancy_loss,
    pbcl_loss,
    semantic_ce_loss,
    total_loss,
)
from .metrics import DEFAULT_RADII, AnomalyGroundTruth, evaluate
from .pgsi import OccupancyHead, OccupancyMap, PgsiConfig
from .pgtm import (
    DEFAULT_DELTA,
    DEFAULT_ETA,
    KTOP_RATIO_KITTI,
    TailInjector,
    TailSelection,
    inject_tail,
    k_top_from_ratio,
    prototype_similarities,
    select_tail_candidates,
    tail_loss,
)
from .prototype_bank import PrototypeBank, ema_update, normalized_prototypes, usable_classes
from .synth import (
    FeatureModel,
    SceneSpec,
    generate_features,
    generate_scene,
    make_feature_model,
    scene_seed,
)
from .voxel_core import TAIL_THRESHOLD_KITTI, ClassCatalog, GridDims, compute_class_catalog

log = logging.getLogger(__name__)

HELDOUT_INDEX = 1 << 20
FEATURE_MODEL_SALT = 0x5EED_F00D
PARAM_INIT_SALT = 0x1417
GRAD_FLOOR = 1e-4

BLOCKS = (
    "sem_w", "sem_b", "occ_w", "occ_b", "psi_w1", "psi_b1", "psi_w2", "psi_b2",
    "phi_w", "phi_b", "alpha", "ref_w", "ref_b",
)


@dataclass(frozen=True)
class PgtmConfig:
    eta: float = DEFAULT_ETA
    delta: float = DEFAULT_DELTA
    k_top_ratio: float = KTOP_RATIO_KITTI
    tau_tail: float = 1.0


@dataclass(frozen=True)
class BankConfig:
    beta: float = 0.05
    t_warm: int = 100
    theta_max: float = 0.7
    theta_min: float = 0.3
    n_min: int = 2


@dataclass(frozen=True)
class FeatureConfig:
    channels: int = 16
    mean_norm: float = 2.0
    sigma: float = 0.25
    ood_margin: float = 4.0
    shared_norm: float = 4.0
    occluded_gain: float = 0.7


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 500
    batch_scenes: int = 2
    learning_rate: float = 0.4
    weights: LossWeights = LossWeights(tau_cl=0.05)
    pgsi: PgsiConfig = PgsiConfig()
    pgtm: PgtmConfig = PgtmConfig()
    bank: BankConfig = BankConfig()
    scene: SceneSpec = SceneSpec()
    features: FeatureConfig = FeatureConfig()
    seed: int = 0
    enable_pbcl: bool = True
    enable_pgsi: bool = True
    enable_pgtm: bool = True
    tail_threshold: float = TAIL_THRESHOLD_KITTI
    tau_conf: float = DEFAULT_TAU_CONF
    radii: tuple = DEFAULT_RADII
    eval_every: int = 0  # 0 disables periodic evaluation
    init_scale: float = 0.1

    def __post_init__(self):
        if self.steps <= 0:
            raise ValueError("steps must be positive")
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be non-negative")
        if self.batch_scenes < 1:
            raise ValueError("batch_scenes must be >= 1")


class Scene(NamedTuple):
    coarse: np.ndarray  # (n_voxels, C)
    labels: np.ndarray  # (n_voxels,)
    visible: np.ndarray  # (n_voxels,) bool
    anomaly: AnomalyGroundTruth
    dims: GridDims


@dataclass(eq=False)
class ModelState:
    params: dict
    bank: PrototypeBank
    catalog: ClassCatalog

    @property
    def channels(self):
        return self.params["ref_w"].shape[0]

    @property
    def k_cls(self):
        return self.params["phi_b"].shape[0]

    def occ_head(self):
        return OccupancyHead(self.params["occ_w"], float(self.params["occ_b"]))

    def injector(self):
        p = self.params
        return TailInjector(p["psi_w1"], p["psi_b1"], p["psi_w2"], p["psi_b2"], p["phi_w"], p["phi_b"])

    def copy(self):
        return ModelState({k: v.copy() for k, v in self.params.items()}, self.bank, self.catalog)


def feature_model_for(cfg: TrainConfig) -> FeatureModel:
    f = cfg.features
    return make_feature_model(cfg.scene.k_cls, f.channels, f.mean_norm, f.sigma,
                              ood_margin=f.ood_margin, shared_norm=f.shared_norm, seed=cfg.seed ^ FEATURE_MODEL_SALT)


def make_scene(cfg: TrainConfig, index, model: FeatureModel = None) -> Scene:
    model = model or feature_model_for(cfg)
    seed = scene_seed(cfg.seed, index)
    syn = generate_scene(cfg.scene.with_seed(seed))
    coarse = generate_features(syn.labels.labels, syn.anomaly, model, seed,
                               visible=syn.visible, occluded_gain=cfg.features.occluded_gain)
    return Scene(coarse, syn.labels.labels, syn.visible, syn.anomaly, cfg.scene.dims)


def training_scenes(cfg: TrainConfig):
    model = feature_model_for(cfg)
    return [make_scene(cfg, i, model) for i in range(cfg.batch_scenes)]


def heldout_scene(cfg: TrainConfig, offset=0):
    return make_scene(cfg, HELDOUT_INDEX + offset)


def init_state(cfg: TrainConfig, catalog: ClassCatalog) -> ModelState:
    c = cfg.features.channels
    k = cfg.scene.k_cls
    rng = np.random.default_rng(cfg.seed ^ PARAM_INIT_SALT)
    s = cfg.init_scale
    params = {
        "sem_w": rng.normal(0.0, s, (c, k + 1)),
        "sem_b": np.zeros(k + 1),
        "occ_w": rng.normal(0.0, s, c),
        "occ_b": np.array(0.0),
    }
    inj = TailInjector.init(c, k, rng, scale=s)
    params.update(
        psi_w1=inj.psi_w1, psi_b1=inj.psi_b1, psi_w2=inj.psi_w2, psi_b2=inj.psi_b2,
        phi_w=inj.phi_w, phi_b=inj.phi_b,
    )
    params["alpha"] = np.array(cfg.pgsi.alpha_pgsi)
    params["ref_w"] = np.zeros((c, c))
    params["ref_b"] = np.zeros(c)
    b = cfg.bank
    bank = PrototypeBank.empty(k, c, beta=b.beta, t_warm=b.t_warm, theta_max=b.theta_max,
                               theta_min=b.theta_min, n_min=b.n_min)
    return ModelState(params, bank, catalog)


class ForwardResult(NamedTuple):
    refined: np.ndarray
    logits: np.ndarray  # (n_voxels, k_cls + 1), column 0 is free space
    occupancy: OccupancyMap
    selection: TailSelection
    imputation: pgsi_mod.Imputation
    pgtm_input: np.ndarray  # features after PGSI
    refine_input: np.ndarray  # features after PGTM
    injection: object

    @property
    def predictions(self):
        """Occupancy map decides free vs occupied; the semantic head picks the class."""
        occupied = self.occupancy.occ > self.occupancy.theta
        return np.where(occupied, self.class_logits.argmax(axis=1) + 1, 0)

    @property
    def class_logits(self):
        return self.logits[:, 1:]

    @property
    def probabilities(self):
        """Joint ``[p_free, p_occ * softmax(class logits)]``, shape ``(n_voxels, k_cls + 1)``."""
        occ = self.occupancy.occ[:, None]
        return np.concatenate([1.0 - occ, occ * softmax(self.class_logits, axis=1)], axis=1)


def _empty_selection(n, k_cls, cfg):
    return TailSelection(np.zeros(0, dtype=np.int64), np.zeros((n, k_cls)), np.zeros(n), (),
                         cfg.pgtm.eta, cfg.pgtm.delta, 0, cfg.pgtm.tau_tail)


def forward(state: ModelState, scene: Scene, cfg: TrainConfig, update_bank=False) -> ForwardResult:
    """Run the pipeline on one scene; optionally apply the EMA update afterwards."""
    p = state.params
    x = np.asarray(scene.coarse, dtype=np.float64)
    if x.shape[1] != state.channels:
        raise ValueError(f"scene has {x.shape[1]} channels, model expects {state.channels}")
    occ = OccupancyMap(pgsi_mod.occupancy_probability(x, state.occ_head()), scene.visible,
                       cfg.pgsi.theta)
    if cfg.enable_pgsi:
        unobserved = pgsi_mod.unobserved_set(occ)
        imp = pgsi_mod.impute(x, unobserved, state.bank, cfg.pgsi, alpha=float(p["alpha"]))
    else:
        imp = pgsi_mod.impute(x, np.zeros(0, dtype=np.int64), state.bank, cfg.pgsi)
    x1 = imp.features

    injection = None
    if cfg.enable_pgtm:
        tail = sorted(state.catalog.tail_set & usable_classes(state.bank))
        sims = prototype_similarities(x1, state.bank)
        k_top = k_top_from_ratio(cfg.pgtm.k_top_ratio, x.shape[0])
        sel = select_tail_candidates(sims, tail, cfg.pgtm.eta, cfg.pgtm.delta, k_top,
                                     cfg.pgtm.tau_tail)
        injection = inject_tail(x1, sel, state.bank, state.injector())
        x2 = injection.features
    else:
        sel = _empty_selection(x.shape[0], state.k_cls, cfg)
        x2 = x1

    refined = x2 + x2 @ p["ref_w"] + p["ref_b"]
    logits = refined @ p["sem_w"] + p["sem_b"]
    if update_bank:
        state.bank = ema_update(state.bank, refined, scene.labels)
    return ForwardResult(refined, logits, occ, sel, imp, x1, x2, injection)


def scene_loss(state: ModelState, scene: Scene, cfg: TrainConfig, fwd: ForwardResult = None,
               need_grads=True):
    """Weighted total loss of one scene; returns ``(total, parts, grads, fwd)``."""
    fwd = fwd or forward(state, scene, cfg)
    w = cfg.weights
    parts = {}
    parts["sem"], g_logits = semantic_ce_loss(fwd.logits, scene.labels)
    parts["aux"], aux_grads = aux_occupancy_loss(scene.coarse, state.occ_head(), scene.labels)
    parts["tail"], tail_grads = (0.0, None)
    if cfg.enable_pgtm:
        parts["tail"], tail_grads = tail_loss(fwd.refined, fwd.selection, scene.labels, state.injector())
    parts["proto"], proto_grads = (0.0, None)
    if cfg.enable_pbcl:
        parts["proto"], proto_grads = pbcl_loss(fwd.refined, scene.labels, state.bank, w.tau_cl)
    total = total_loss(parts, w)
    if not need_grads:
        return total, parts, None, fwd
    return total, parts, _backward(state, scene, cfg, fwd, g_logits, aux_grads, tail_grads, proto_grads), fwd


def _backward(state, scene, cfg, fwd, g_logits, aux_grads, tail_grads, proto_grads):
    w = cfg.weights
    p = state.params
    grads = {name: np.zeros_like(v, dtype=np.float64) for name, v in p.items()}
    g_logits = w.w_sem * g_logits
    grads["sem_w"] = fwd.refined.T @ g_logits
    grads["sem_b"] = g_logits.sum(axis=0)
    g_r = g_logits @ p["sem_w"].T
    grads["occ_w"] = w.w_aux * aux_grads["weight"]
    grads["occ_b"] = np.array(w.w_aux * aux_grads["bias"])
    if tail_grads is not None:
        grads["phi_w"] = w.w_tail * tail_grads["phi_w"]
        grads["phi_b"] = w.w_tail * tail_grads["phi_b"]
        g_r = g_r + w.w_tail * tail_grads["refined"]
    if proto_grads is not None:
        if np.any(proto_grads["prototypes"]):
            raise AssertionError("prototype gradient must be identically zero")
        g_r = g_r + w.w_proto * proto_grads["refined"]

    x2 = fwd.refine_input
    grads["ref_w"] = x2.T @ g_r
    grads["ref_b"] = g_r.sum(axis=0)
    g_x1 = g_r + g_r @ p["ref_w"].T

    sel = fwd.selection
    if sel.size and fwd.injection is not None:
        idx = sel.indices
        inj = fwd.injection
        g_out = g_x1[idx]
        act = np.maximum(inj.hidden, 0.0)
        grads["psi_w2"] = act.T @ g_out
        grads["psi_b2"] = g_out.sum(axis=0)
        g_h = (g_out @ p["psi_w2"].T) * (inj.hidden > 0)
        grads["psi_w1"] = inj.aggregate.T @ g_h
        grads["psi_b1"] = g_h.sum(axis=0)
        g_agg = g_h @ p["psi_w1"].T
        cols = np.array(sel.tail_classes) - 1
        g_wts = g_agg @ state.bank.prototypes[cols].T
        wts = inj.weights
        g_s = wts * (g_wts - (wts * g_wts).sum(axis=1, keepdims=True)) / sel.tau_tail
        g_unit = g_s @ normalized_prototypes(state.bank)[cols]
        unit, norms = safe_normalize(fwd.pgtm_input[idx])
        g_x1[idx] += safe_normalize_backward(g_unit, unit, norms)

    imp = fwd.imputation
    if imp.indices.size:
        grads["alpha"] = np.array(float(np.einsum("ij,ij->", g_x1[imp.indices], imp.context)))
    return grads


def _map_scenes(fn, scenes, jobs):
    if jobs <= 1 or len(scenes) < 2:
        return [fn(s) for s in scenes]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, scenes))


def batch_loss(state, scenes, cfg, need_grads=True, jobs=1):
    """Mean of per-scene losses; returns ``(total, parts, grads, forwards)``.

    Scenes may be evaluated on ``jobs`` threads; the reduction always runs in
    scene order, so the result does not depend on ``jobs``.
    """
    totals, forwards = [], []
    parts = {name: 0.0 for name in ("sem", "aux", "tail", "proto")}
    grads = None
    results = _map_scenes(lambda sc: scene_loss(state, sc, cfg, need_grads=need_grads), scenes, jobs)
    for total, sp, sg, fwd in results:
        totals.append(total)
        forwards.append(fwd)
        for name in parts:
            parts[name] += sp[name] / len(scenes)
        if need_grads:
            if grads is None:
                grads = {k: v / len(scenes) for k, v in sg.items()}
            else:
                for k, v in sg.items():
                    grads[k] = grads[k] + v / len(scenes)
    return float(np.mean(totals)), parts, grads, forwards


class TrainingAborted(RuntimeError):
    def __init__(self, message, state, history):
        super().__init__(message)
        self.state = state
        self.history = history


@dataclass
class History:
    rows: list = field(default_factory=list)

    def append(self, row):
        self.rows.append(row)

    def column(self, name):
        return [row.get(name, math.nan) for row in self.rows]

    def __len__(self):
        return len(self.rows)


def sgd_step(state: ModelState, grads, lr):
    # prototypes move only through ema_update
    if not set(grads) <= set(BLOCKS) or any(
            np.shares_memory(state.params[name], state.bank.prototypes) for name in grads):
        raise AssertionError("optimizer step would touch the prototype bank")
    for name, g in grads.items():
        # asarray keeps 0-d blocks as arrays rather than numpy scalars
        state.params[name] = np.asarray(state.params[name] - lr * g)
    state.params["alpha"] = np.asarray(np.clip(state.params["alpha"], 1e-3, 1.0))


def evaluate_state(state: ModelState, scene: Scene, cfg: TrainConfig):
    """Forward without EMA update, then metrics and EchoOOD scores on one scene."""
    fwd = forward(state, scene, cfg)
    scores = score_scene(fwd.refined, fwd.class_logits, fwd.predictions, state.bank, cfg.tau_conf)
    probs = fwd.probabilities
    anomaly = scene.anomaly if scene.anomaly.is_ood.any() else None
    report = evaluate(fwd.predictions, probs, scene.labels, state.catalog,
                      scores=scores.fused, anomaly=anomaly, radii=cfg.radii)
    return report, scores, fwd


def train(cfg: TrainConfig, state: ModelState = None, history: History = None,
          start_step: int = 0, stop_step: int = None, eval_scene: Scene = None, jobs: int = 1):
    """Full-batch gradient descent from ``start_step`` up to ``stop_step`` (default ``cfg.steps``).

    Passing a state restored from a checkpoint continues the run exactly.
    """
    scenes = training_scenes(cfg)
    if state is None:
        catalog = compute_class_catalog(np.concatenate([s.labels for s in scenes]),
                                        cfg.scene.k_cls, cfg.tail_threshold)
        state = init_state(cfg, catalog)
    history = history if history is not None else History()
    stop = cfg.steps if stop_step is None else stop_step
    if cfg.eval_every and eval_scene is None:
        eval_scene = heldout_scene(cfg)

    for step in range(start_step, stop):
        snapshot = state.copy()
        try:
            total, parts, grads, forwards = batch_loss(state, scenes, cfg, jobs=jobs)
        except NonFiniteLossError as exc:
            raise TrainingAborted(f"step {step + 1}: {exc}", snapshot, history) from exc
        if not all(np.all(np.isfinite(g)) for g in grads.values()):
            raise TrainingAborted(f"step {step + 1}: non-finite gradient", snapshot, history)
        row = {"step": step + 1, "total": total, **parts,
               "usable": len(usable_classes(state.bank)),
               "n_unobserved": int(sum(f.imputation.indices.size for f in forwards)),
               "n_tail": int(sum(f.selection.size for f in forwards)),
               "alpha": float(state.params["alpha"])}
        sgd_step(state, grads, cfg.learning_rate)
        refined = np.concatenate([f.refined for f in forwards])
        labels = np.concatenate([s.labels for s in scenes])
        state.bank = ema_update(state.bank, refined, labels)
        if cfg.eval_every and (step + 1) % cfg.eval_every == 0:
            report, _, _ = evaluate_state(state, eval_scene, cfg)
            row.update(miou=report.miou, tail_miou=report.tail_miou, geo_iou=report.geo_iou,
                       auroc=report.auroc)
            row.update({f"auprc_r@{r:g}": v for r, v in report.auprc_r.items()})
        history.append(row)
        log.debug("step %d total=%.6f", step + 1, total)
    return state, history


def _discrete_signature(forwards):
    parts = []
    for f in forwards:
        parts.append(f.imputation.indices.tobytes())
        parts.append(f.selection.indices.tobytes())
        if f.injection is not None:
            parts.append((f.injection.hidden > 0).tobytes())
    return b"|".join(parts)


class GradCheckResult(NamedTuple):
    max_rel_error: dict  # block -> max relative error over checked entries
    checked: dict  # block -> entries compared
    skipped: dict  # block -> entries skipped at a discontinuity
    prototype_grad_max_abs: float


def grad_check(state: ModelState, scenes, cfg: TrainConfig, eps=1e-5, max_per_block=200,
               seed=0, blocks=BLOCKS) -> GradCheckResult:
    """Analytic gradients of the total loss vs central finite differences.

    Relative error is ``|a - n| / max(|a|, |n|, 1e-4)``. An entry whose
    perturbation changes any discrete choice (unobserved set, tail
    selection, ReLU pattern) is skipped.
    """
    if isinstance(scenes, Scene):
        scenes = [scenes]
    rng = np.random.default_rng(seed)
    _, _, analytic, forwards = batch_loss(state, scenes, cfg)
    base_sig = _discrete_signature(forwards)
    probe = state.copy()
    errors, checked, skipped = {}, {}, {}
    for name in blocks:
        flat = probe.params[name].flat  # writes through, 0-d blocks included
        n = probe.params[name].size
        picks = rng.choice(n, size=min(n, max_per_block), replace=False)
        worst, count, skip = 0.0, 0, 0
        for j in picks:
            orig = flat[j]
            values = []
            sigs = []
            for sign in (1.0, -1.0):
                flat[j] = orig + sign * eps
                val, _, _, fw = batch_loss(probe, scenes, cfg, need_grads=False)
                values.append(val)
                sigs.append(_discrete_signature(fw))
            flat[j] = orig
            if sigs[0] != base_sig or sigs[1] != base_sig:
                skip += 1
                continue
            numeric = (values[0] - values[1]) / (2 * eps)
            a = float(analytic[name].reshape(-1)[j])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), GRAD_FLOOR)
            worst = max(worst, rel)
            count += 1
        errors[name], checked[name], skipped[name] = worst, count, skip
    proto_abs = 0.0
    if cfg.enable_pbcl:
        for scene, fwd in zip(scenes, forwards):
            _, pg = pbcl_loss(fwd.refined, scene.labels, state.bank, cfg.weights.tau_cl)
            proto_abs = max(proto_abs, float(np.abs(pg["prototypes"]).max(initial=0.0)))
    return GradCheckResult(errors, checked, skipped, proto_abs)
