import numpy as np
import pytest

from voxproto.synth import SceneSpec
from voxproto.trainer import (
    BankConfig,
    FeatureConfig,
    PgtmConfig,
    TrainConfig,
    TrainingAborted,
    batch_loss,
    forward,
    grad_check,
    init_state,
    make_scene,
    sgd_step,
    train,
    training_scenes,
)
from voxproto.prototype_bank import usable_classes
from voxproto.voxel_core import GridDims, compute_class_catalog

SPEC = SceneSpec(dims=GridDims(16, 16, 4), ood_count=1, ood_size=(2, 3))
SMALL = TrainConfig(steps=15, batch_scenes=1, scene=SPEC, bank=BankConfig(t_warm=5),
                    pgtm=PgtmConfig(k_top_ratio=0.05))


def _fresh(cfg):
    scenes = training_scenes(cfg)
    cat = compute_class_catalog(np.concatenate([s.labels for s in scenes]), cfg.scene.k_cls,
                                cfg.tail_threshold)
    return init_state(cfg, cat), scenes


def test_config_invariants():
    with pytest.raises(ValueError):
        TrainConfig(steps=0)
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=-1)
    with pytest.raises(ValueError):
        TrainConfig(batch_scenes=0)


def test_all_toggles_off_is_baseline():
    cfg = TrainConfig(scene=SPEC, enable_pbcl=False, enable_pgsi=False, enable_pgtm=False)
    state, scenes = _fresh(cfg)
    state.params["ref_w"] = np.random.default_rng(0).normal(0, 0.1, state.params["ref_w"].shape)
    x = scenes[0].coarse
    fwd = forward(state, scenes[0], cfg)
    p = state.params
    refined = x + x @ p["ref_w"] + p["ref_b"]
    np.testing.assert_array_equal(fwd.logits, refined @ p["sem_w"] + p["sem_b"])
    assert fwd.selection.size == 0 and fwd.imputation.indices.size == 0


def test_pgsi_with_empty_unobserved_matches_pgsi_off():
    cfg = TrainConfig(scene=SceneSpec(dims=GridDims(16, 16, 4), ood_count=1, ood_size=(2, 3),
                                      occlusion_fraction=0.0), enable_pgtm=False)
    state, scenes = _fresh(cfg)
    on = forward(state, scenes[0], cfg)
    off = forward(state, scenes[0], TrainConfig(**{**cfg.__dict__, "enable_pgsi": False}))
    np.testing.assert_array_equal(on.logits, off.logits)


def test_forward_deterministic_and_bank_update_optional():
    state, scenes = _fresh(SMALL)
    a = forward(state, scenes[0], SMALL)
    b = forward(state, scenes[0], SMALL)
    assert a.logits.tobytes() == b.logits.tobytes()
    assert state.bank.t == 0
    forward(state, scenes[0], SMALL, update_bank=True)
    assert state.bank.t == 1


def test_zero_learning_rate_freezes_parameters_but_not_prototypes():
    cfg = TrainConfig(**{**SMALL.__dict__, "learning_rate": 0.0, "steps": 8})
    init, _ = _fresh(cfg)
    state, hist = train(cfg)
    for k, v in init.params.items():
        np.testing.assert_array_equal(state.params[k], v, err_msg=k)
    assert state.bank.t == 8 and state.bank.initialized.all()
    assert not np.array_equal(state.bank.prototypes, init.bank.prototypes)


def test_semantic_ce_decreases_over_200_steps():
    cfg = TrainConfig(steps=200, batch_scenes=1, scene=SPEC)
    _, hist = train(cfg)
    sem = hist.column("sem")
    assert sem[-1] < sem[0]


def test_pgtm_toggle_only_matters_after_warm_up():
    on_cfg = TrainConfig(**{**SMALL.__dict__, "steps": 12, "bank": BankConfig(t_warm=6)})
    off_cfg = TrainConfig(**{**on_cfg.__dict__, "enable_pgtm": False})
    _, on = train(on_cfg)
    _, off = train(off_cfg)
    assert on.rows[:6] == off.rows[:6]
    assert all(r["n_tail"] == 0 for r in on.rows[:6])
    assert any(r["n_tail"] > 0 for r in on.rows[6:])
    assert on.rows[6:] != off.rows[6:]


def test_training_is_deterministic_and_resumable():
    s1, h1 = train(SMALL)
    s2, h2 = train(SMALL)
    assert h1.rows == h2.rows
    part, hp = train(SMALL, stop_step=7)
    s3, h3 = train(SMALL, state=part, history=hp, start_step=7)
    assert h3.rows == h1.rows
    for k in s1.params:
        assert s1.params[k].tobytes() == s3.params[k].tobytes()
    assert s1.bank.prototypes.tobytes() == s3.bank.prototypes.tobytes()


def test_jobs_do_not_change_results():
    cfg = TrainConfig(**{**SMALL.__dict__, "batch_scenes": 3, "steps": 6})
    _, a = train(cfg, jobs=1)
    _, b = train(cfg, jobs=3)
    assert a.rows == b.rows


def test_alpha_clipped():
    state, _ = _fresh(SMALL)
    sgd_step(state, {"alpha": np.array(-100.0)}, 1.0)
    assert float(state.params["alpha"]) == 1.0
    assert isinstance(state.params["alpha"], np.ndarray)


def test_optimizer_never_touches_prototypes():
    state, _ = _fresh(SMALL)
    with pytest.raises(AssertionError):
        sgd_step(state, {"prototypes": np.zeros_like(state.bank.prototypes)}, 0.1)


def test_nan_loss_aborts_with_last_good_state(monkeypatch):
    from voxproto import trainer

    real = trainer.semantic_ce_loss
    calls = {"n": 0}

    def flaky(logits, labels):
        calls["n"] += 1
        loss, grad = real(logits, labels)
        return (float("nan") if calls["n"] == 4 else loss), grad

    good, good_hist = train(TrainConfig(**{**SMALL.__dict__, "steps": 3}))
    monkeypatch.setattr(trainer, "semantic_ce_loss", flaky)
    with pytest.raises(TrainingAborted, match="step 4") as info:
        train(SMALL)
    exc = info.value
    assert exc.history.rows == good_hist.rows
    for k, v in good.params.items():
        assert exc.state.params[k].tobytes() == v.tobytes()


@pytest.mark.parametrize("seed", range(3))
def test_grad_check_with_every_module_active(seed):
    cfg = TrainConfig(**{**SMALL.__dict__, "seed": seed})
    state, _ = train(cfg)
    scenes = training_scenes(cfg)
    _, _, _, fw = batch_loss(state, scenes, cfg)
    assert usable_classes(state.bank)
    assert fw[0].selection.size > 0 and fw[0].imputation.indices.size > 0
    res = grad_check(state, scenes, cfg, max_per_block=60, seed=seed)
    for block, err in res.max_rel_error.items():
        assert res.checked[block] > 0, block
        assert err < 1e-6, (block, err)
    assert res.prototype_grad_max_abs == 0.0


def test_scene_channel_mismatch():
    state, _ = _fresh(SMALL)
    other = make_scene(TrainConfig(**{**SMALL.__dict__, "features": FeatureConfig(channels=4)}), 0)
    with pytest.raises(ValueError):
        forward(state, other, SMALL)
