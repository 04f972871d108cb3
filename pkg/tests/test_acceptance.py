"""Acceptance criteria, one test per criterion.

Each test records a ``PASS n: ...`` or ``FAIL n: ...`` line that the
terminal summary prints under "acceptance criteria". Criteria 4 to 6 share
one cache of trained runs, and the runtime charged to a criterion is the
sum of the wall time of every run it consumes, including reused ones.

Run alone with ``pytest tests/test_acceptance.py -s``.
"""

import json
import time
from pathlib import Path

import numpy as np
import pytest

from oracles import (
    auprc_sweep_oracle,
    auroc_pairs,
    central_difference,
    ema_recurrence,
    entropy_score,
    max_softmax_score,
    rel_error,
    select_oracle,
)
from voxproto import container, persist
from voxproto.cli import main
from voxproto.config import build_config
from voxproto.echoood import score_scene
from voxproto.losses import aux_occupancy_loss, pbcl_loss, semantic_ce_loss
from voxproto.metrics import auprc_r, auroc, dilate
from voxproto.pgsi import OccupancyMap, PgsiConfig, impute, unobserved_set
from voxproto.pgtm import (
    TailInjector,
    inject_tail,
    prototype_similarities,
    select_tail_candidates,
    tail_loss,
)
from voxproto.prototype_bank import PrototypeBank, ema_update, usable_classes
from voxproto.trainer import evaluate_state, feature_model_for, heldout_scene, train
from voxproto.voxel_core import IGNORE

GOLDEN = Path(__file__).parent / "data" / "golden"
RADII = (0.8, 1.0, 1.2)
GRAD_TOL = 1e-6


def _usable_bank(protos):
    protos = np.asarray(protos, dtype=float)
    k = protos.shape[0]
    return PrototypeBank(protos, t=10, t_warm=0, last_quality=np.full(k, 5.0),
                         last_count=np.full(k, 4), initialized=np.ones(k, dtype=bool))


def _labels(rng, n, k):
    y = rng.integers(0, k + 1, size=n)
    y[rng.random(n) < 0.15] = IGNORE
    return y


# 1. formula oracles

def test_1_formula_oracles(verdict):
    t0 = time.perf_counter()

    ema_worst = 0.0
    ema_flags_ok = True
    for seq in range(50):
        rng = np.random.default_rng(seq)
        k, c = int(rng.integers(1, 6)), int(rng.integers(1, 5))
        bank = PrototypeBank.empty(k, c, beta=0.05)
        batches = []
        for _ in range(int(rng.integers(1, 10))):
            n = int(rng.integers(1, 40))
            feats = rng.normal(size=(n, c)) * 3
            labels = _labels(rng, n, k)
            batches.append((feats, labels))
            bank = ema_update(bank, feats, labels)
        expect, seen = ema_recurrence(batches, k, c, 0.05)
        ema_flags_ok &= bool(np.array_equal(bank.initialized, seen))
        ema_worst = max(ema_worst, float(np.abs(bank.prototypes - expect).max()))

    sel_mismatch = 0
    for trial in range(1000):
        rng = np.random.default_rng(10_000 + trial)
        n = int(np.prod(rng.integers(1, 7, size=3)))
        k = int(rng.integers(2, 6))
        sims = np.round(rng.uniform(-1, 1, size=(n, k)), 1)
        tail = sorted(rng.choice(np.arange(1, k + 1), size=int(rng.integers(1, k + 1)),
                                 replace=False).tolist())
        eta, delta = float(rng.uniform(-0.5, 0.8)), float(rng.uniform(0, 0.5))
        k_top = int(rng.integers(0, n + 2))
        got = select_tail_candidates(sims, tail, eta, delta, k_top).indices.tolist()
        sel_mismatch += got != select_oracle(sims.tolist(), tail, eta, delta, k_top)

    auroc_mismatch = 0
    for trial in range(300):
        rng = np.random.default_rng(20_000 + trial)
        n = int(rng.integers(2, 101))
        y = rng.random(n) < rng.uniform(0.05, 0.95)
        y[0], y[1] = True, False
        s = np.round(rng.normal(size=n), int(rng.integers(0, 3)))
        auroc_mismatch += auroc(s, y) != auroc_pairs(s.tolist(), y.tolist())

    scene = persist.read_scene(GOLDEN / "scene")
    scores = np.array(container.read_volume(GOLDEN / "scores.voxv").data[:, -1], dtype=np.float64)
    auprc_worst = max(
        abs(auprc_r(scores, scene.anomaly, r)
            - auprc_sweep_oracle(list(scores), list(scene.anomaly.is_ood), list(dilate(scene.anomaly, r))))
        for r in (0.0,) + RADII)

    elapsed = time.perf_counter() - t0
    ok = (ema_worst <= 1e-12 and ema_flags_ok and sel_mismatch == 0 and auroc_mismatch == 0
          and auprc_worst <= 1e-9 and elapsed < 60)
    detail = (f"ema max err {ema_worst:.1e} (50 seqs); selection mismatches {sel_mismatch}/1000; "
              f"auroc mismatches {auroc_mismatch}/300; golden auprc err {auprc_worst:.1e}; {elapsed:.1f}s")
    assert verdict(1, "formula oracles", ok, detail), detail


# 2. gradient suite

def _grad_errors(seed):
    rng = np.random.default_rng(seed)
    errs = {}

    logits = rng.normal(size=(12, 5)) * 2
    y = _labels(rng, 12, 4)
    _, g = semantic_ce_loss(logits, y)
    errs["sem"] = rel_error(g, central_difference(lambda: semantic_ce_loss(logits, y)[0], logits))

    from voxproto.pgsi import OccupancyHead
    x = rng.normal(size=(15, 4))
    y = _labels(rng, 15, 3)
    w = rng.normal(size=4)
    b = np.array([rng.normal()])

    def aux():
        return aux_occupancy_loss(x, OccupancyHead(w, float(b[0])), y)[0]

    _, g = aux_occupancy_loss(x, OccupancyHead(w, float(b[0])), y)
    errs["aux"] = max(rel_error(g["weight"], central_difference(aux, w)),
                      rel_error([g["bias"]], central_difference(aux, b)))

    inj = TailInjector.init(4, 4, rng, scale=0.5)
    inj.phi_b = rng.normal(size=4)
    x = rng.normal(size=(20, 4))
    sims = rng.uniform(-1, 1, size=(20, 4))
    sel = select_tail_candidates(sims, {3, 4}, -0.5, 0.0, 10)
    y = _labels(rng, 20, 4)
    _, g = tail_loss(x, sel, y, inj)

    def tl():
        return tail_loss(x, sel, y, inj)[0]

    errs["tail"] = max(rel_error(g["phi_w"], central_difference(tl, inj.phi_w)),
                       rel_error(g["phi_b"], central_difference(tl, inj.phi_b)),
                       rel_error(g["refined"], central_difference(tl, x)))

    bank = _usable_bank(rng.normal(size=(3, 4)))
    x = rng.normal(size=(10, 4))
    y = _labels(rng, 10, 3)
    _, g = pbcl_loss(x, y, bank, 0.1)
    errs["proto"] = rel_error(g["refined"], central_difference(lambda: pbcl_loss(x, y, bank, 0.1)[0], x))
    proto_zero = bool(np.array_equal(g["prototypes"], np.zeros_like(bank.prototypes)))
    return errs, proto_zero


def test_2_gradient_suite(verdict):
    t0 = time.perf_counter()
    worst = {"sem": 0.0, "aux": 0.0, "tail": 0.0, "proto": 0.0}
    zero_ok = True
    for seed in range(5):
        errs, proto_zero = _grad_errors(seed)
        zero_ok &= proto_zero
        worst = {k: max(v, errs[k]) for k, v in worst.items()}
    elapsed = time.perf_counter() - t0
    ok = max(worst.values()) < GRAD_TOL and zero_ok and elapsed < 30
    detail = ("max rel err " + ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
              + f"; prototype grad identically zero: {zero_ok}; {elapsed:.1f}s")
    assert verdict(2, "gradient suite", ok, detail), detail


# 3. structural invariants

def _random_bank(rng, k, c):
    initialized = rng.random(k) < 0.8
    quality = np.where(rng.random(k) < 0.7, rng.uniform(0.8, 5.0, k), rng.uniform(0.0, 0.6, k))
    counts = rng.integers(0, 5, size=k)
    return PrototypeBank(rng.normal(size=(k, c)) * 2, t=int(rng.integers(0, 5)), t_warm=2,
                         last_quality=quality, last_count=counts, initialized=initialized)


def _structural_case(seed):
    """Every check for one randomized case; returns (failures, fused score bytes)."""
    rng = np.random.default_rng(seed)
    n, c, k = int(rng.integers(4, 80)), int(rng.integers(2, 7)), int(rng.integers(2, 6))
    bank = _random_bank(rng, k, c)
    x = rng.normal(size=(n, c)) * 2
    fails = []

    cfg = PgsiConfig(tau_att=float(rng.uniform(0.2, 3)), alpha_pgsi=float(rng.uniform(0.05, 1)))
    occ = OccupancyMap(rng.random(n), rng.random(n) < 0.5)
    u = unobserved_set(occ)
    if not np.array_equal(u, np.flatnonzero((occ.occ > occ.theta) & ~occ.visible)):
        fails.append("unobserved set")
    imp = impute(x, u, bank, cfg)
    rest = np.setdiff1d(np.arange(n), u)
    if not np.array_equal(imp.features[rest], x[rest]):
        fails.append("pgsi touched a voxel outside U")
    if usable_classes(bank):
        if not np.array_equal(imp.indices, u):
            fails.append("pgsi skipped part of U")
        if u.size and np.abs(imp.attention.sum(axis=1) - 1).max() > 1e-6:
            fails.append("attention rows")
        protos = bank.prototypes[imp.classes - 1]
        d2 = ((x[u, None, :] - protos[None]) ** 2).sum(axis=2)
        a = np.exp(-(d2 - d2.min(axis=1, keepdims=True)) / cfg.tau_att)
        a /= a.sum(axis=1, keepdims=True)
        if u.size and np.abs(imp.features[u] - (x[u] + cfg.alpha_pgsi * a @ protos)).max() > 1e-9:
            fails.append("pgsi update value")
    elif not np.array_equal(imp.features, x):
        fails.append("pgsi without usable prototypes changed features")

    inj = TailInjector.init(c, k, rng, scale=0.5)
    inj.psi_w2 = rng.normal(size=(c, c))
    inj.psi_b2 = rng.normal(size=c)
    tail = sorted(rng.choice(np.arange(1, k + 1), size=int(rng.integers(1, k + 1)), replace=False).tolist())
    sel = select_tail_candidates(prototype_similarities(x, bank), tail, float(rng.uniform(-0.5, 0.5)),
                                 float(rng.uniform(0, 0.3)), int(rng.integers(0, n + 1)))
    out = inject_tail(x, sel, bank, inj).features
    off = np.setdiff1d(np.arange(n), sel.indices)
    if not np.array_equal(out[off], x[off]):
        fails.append("pgtm touched a voxel outside I_tail")
    if sel.size:
        cols = np.array(tail) - 1
        z = sel.sims[sel.indices][:, cols] / sel.tau_tail
        w = np.exp(z - z.max(axis=1, keepdims=True))
        w /= w.sum(axis=1, keepdims=True)
        agg = w @ bank.prototypes[cols]
        delta = np.maximum(agg @ inj.psi_w1 + inj.psi_b1, 0) @ inj.psi_w2 + inj.psi_b2
        if np.abs(out[sel.indices] - (x[sel.indices] + delta)).max() > 1e-9:
            fails.append("pgtm update value")

    logits = rng.normal(size=(n, k)) * 2
    pred = np.where(rng.random(n) < 0.25, 0, logits.argmax(axis=1) + 1)
    scores = score_scene(x, logits, pred, bank, float(rng.uniform(0.05, 0.9)))
    f = scores.fused
    if f.min() < 0 or f.max() > 1:
        fails.append("fused outside [0, 1]")
    occupied = pred != 0
    if occupied.any() and (~occupied).any() and not np.all(f[~occupied] == f[occupied].min()):
        fails.append("empty voxels not at the scene minimum")
    return fails, scores.stack().tobytes()


def test_3_structural_invariants(verdict):
    t0 = time.perf_counter()
    failures = {}
    nondeterministic = 0
    for case in range(1000):
        seed = 30_000 + case
        fails, first = _structural_case(seed)
        for name in fails:
            failures[name] = failures.get(name, 0) + 1
        nondeterministic += _structural_case(seed)[1] != first
    elapsed = time.perf_counter() - t0
    ok = not failures and nondeterministic == 0 and elapsed < 60
    detail = (f"1000 cases; violations {failures or 'none'}; "
              f"nondeterministic score maps {nondeterministic}; {elapsed:.1f}s")
    assert verdict(3, "structural invariants", ok, detail), detail


# 4 to 6. end-to-end runs on the default benchmark

_RUNS = {}
ARMS = {"full": [], "no_pbcl": ["enable_pbcl=false"], "no_pgsi": ["enable_pgsi=false"],
        "no_pgtm": ["enable_pgtm=false"]}


def _run(seed, arm="full"):
    key = (seed, arm)
    if key not in _RUNS:
        t0 = time.perf_counter()
        cfg = build_config({}, ARMS[arm] + [f"train.seed={seed}"], env={}).to_train_config()
        state, _ = train(cfg)
        scene = heldout_scene(cfg)
        report, scores, fwd = evaluate_state(state, scene, cfg)
        _RUNS[key] = {
            "cfg": cfg, "report": report, "fused": scores.fused, "pred": fwd.predictions,
            "class_probs": fwd.probabilities[:, 1:], "anomaly": scene.anomaly,
            "n_tail": len(state.catalog.tail_set), "seconds": time.perf_counter() - t0,
        }
    return _RUNS[key]


def _benchmark_preconditions(runs):
    cfg = runs[0]["cfg"]
    model = feature_model_for(cfg)
    gap = float(np.linalg.norm(model.class_means - model.ood_mean, axis=1).min())
    shape_ok = cfg.scene.dims.shape == (32, 32, 8) and cfg.features.channels == 16 and cfg.scene.k_cls == 8
    ok = (shape_ok and cfg.steps == 500 and cfg.scene.dims.voxel_size == 0.2
          and all(r["n_tail"] == 3 for r in runs) and gap >= 4 * cfg.features.sigma)
    return ok, f"OOD gap {gap / cfg.features.sigma:.1f} sigma"


def test_4_end_to_end_separation(verdict):
    runs = [_run(seed) for seed in range(10)]
    pre_ok, pre = _benchmark_preconditions(runs)
    aurocs = [r["report"].auroc for r in runs]
    mono = [all(r["report"].auprc_r[a] <= r["report"].auprc_r[b] for a, b in zip(RADII, RADII[1:]))
            for r in runs]
    elapsed = sum(r["seconds"] for r in runs)
    mean = float(np.mean(aurocs))
    ok = pre_ok and mean >= 0.95 and all(mono) and elapsed < 300
    detail = (f"mean AuROC {mean:.4f} (min {min(aurocs):.4f}) over 10 seeds; "
              f"AuPRC_r nondecreasing in {sum(mono)}/10; {pre}; {elapsed:.0f}s")
    assert verdict(4, "end-to-end separation", ok, detail), detail


def test_5_ablation_directions(verdict):
    checks = {"pbcl": ("no_pbcl", "tail_miou"), "pgsi": ("no_pgsi", "geo_iou"),
              "pgtm": ("no_pgtm", "tail_miou")}
    seeds = range(5)
    tallies, ties, used = {}, {}, []
    for name, (arm, metric) in checks.items():
        wins = 0
        tie = 0
        for seed in seeds:
            full, ablated = _run(seed), _run(seed, arm)
            a, b = getattr(full["report"], metric), getattr(ablated["report"], metric)
            wins += a >= b
            tie += a == b
            used += [(seed, "full"), (seed, arm)]
        tallies[name], ties[name] = wins, tie
    elapsed = sum(_RUNS[k]["seconds"] for k in set(used))
    ok = all(v >= 3 for v in tallies.values()) and elapsed < 600
    detail = ("not-decreasing seeds " + ", ".join(f"{k} {v}/5 ({ties[k]} exact ties)"
                                                   for k, v in tallies.items()) + f"; {elapsed:.0f}s")
    assert verdict(5, "ablation directions", ok, detail), detail


def test_6_echoood_beats_baselines(verdict):
    runs = [_run(seed) for seed in range(10)]
    means = {}
    for name in ("echoood", "max_softmax", "entropy"):
        per_radius = {r: [] for r in RADII}
        for run in runs:
            if name == "echoood":
                s = run["fused"]
            elif name == "max_softmax":
                s = max_softmax_score(run["class_probs"], run["pred"])
            else:
                s = entropy_score(run["class_probs"], run["pred"])
            for r in RADII:
                per_radius[r].append(auprc_r(s, run["anomaly"], r))
        means[name] = {r: float(np.mean(v)) for r, v in per_radius.items()}
    ok = all(means["echoood"][r] > max(means["max_softmax"][r], means["entropy"][r]) for r in RADII)
    detail = "; ".join(
        f"r={r:g}: echo {means['echoood'][r]:.3f} msp {means['max_softmax'][r]:.3f} "
        f"ent {means['entropy'][r]:.3f}" for r in RADII) + " (mean over 10 seeds)"
    assert verdict(6, "EchoOOD vs baseline scorers", ok, detail), detail


# 7. I/O contract

SMALL = ["--set", "scene.dims.x=16", "--set", "scene.dims.y=16", "--set", "scene.dims.z=4",
         "--set", "ood_count=1", "--set", "ood_size=[2,3]", "--set", "batch_scenes=1",
         "--set", "t_warm=3"]


def _tree_bytes(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(Path(root).rglob("*")) if p.is_file()}


def test_7_io_contract(verdict, tmp_path):
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    roundtrip_ok = True
    for trial in range(40):
        dims = tuple(int(d) for d in rng.integers(1, 6, size=3))
        ch = int(rng.integers(1, 5))
        code = (1, 2, 3, 4)[trial % 4]
        n = int(np.prod(dims))
        if code in (2, 3):
            data = rng.integers(0, 256 if code == 3 else 65536, size=(n, ch))
        else:
            data = rng.normal(size=(n, ch)) * 1e3
        path = tmp_path / f"v{trial}.voxv"
        container.write_volume(path, data, dims, code)
        raw = path.read_bytes()
        vol = container.read_volume(path)
        container.write_volume(tmp_path / "again.voxv", vol.data, vol.dims, vol.dtype_code)
        roundtrip_ok &= (tmp_path / "again.voxv").read_bytes() == raw and vol.dims == dims

    run = lambda *a: main([str(x) for x in a])  # noqa: E731
    codes = [run("synth", "--out", tmp_path / f"s{i}", "--count", 2, *SMALL) for i in (1, 2)]
    codes += [run("train", "--out", tmp_path / f"t{i}", "--steps", 12, *SMALL) for i in (1, 2)]
    synth_same = _tree_bytes(tmp_path / "s1") == _tree_bytes(tmp_path / "s2")
    train_same = _tree_bytes(tmp_path / "t1") == _tree_bytes(tmp_path / "t2")

    codes.append(run("train", "--out", tmp_path / "part", "--steps", 5, *SMALL))
    codes.append(run("train", "--out", tmp_path / "rest", "--steps", 12,
                     "--resume", tmp_path / "part" / "checkpoint"))
    full, rest = tmp_path / "t1" / "checkpoint", tmp_path / "rest" / "checkpoint"
    a, b = _tree_bytes(full), _tree_bytes(rest)
    sa, sb = json.loads(a.pop("state.json")), json.loads(b.pop("state.json"))
    # the saved config differs only in train.steps (5 then 12 vs 12)
    resume_same = a == b and sa["bank"] == sb["bank"] and sa["step"] == sb["step"] == 12 \
        and sa["blocks"] == sb["blocks"]

    elapsed = time.perf_counter() - t0
    ok = roundtrip_ok and synth_same and train_same and resume_same and not any(codes) and elapsed < 30
    detail = (f"container byte round-trip {roundtrip_ok} (40 volumes, 4 dtypes); same-config synth "
              f"{synth_same}, train {train_same}; resume 5+7 == 12 steps {resume_same}; {elapsed:.1f}s")
    assert verdict(7, "I/O contract", ok, detail), detail


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-s", "-q"]))
