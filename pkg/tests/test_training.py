import csv

import numpy as np
import pytest
import torch

from rmnet.data import synthetic_images, to_model_range
from rmnet.mask_synthesis import MaskSourceConfig, StrokeSpec
from rmnet.model import param_hash
from rmnet.training import (STEP_LOG_FIELDS, TrainConfig, TrainingData, critic_step, epoch_means,
                            generator_history, generator_step, init_state, train)

from conftest import TINY_CRITIC, TINY_GEN, random_mask


def tiny_data(n=4, size=16, seed=0, fixed=True):
    x = to_model_range(synthetic_images(n, (size, size), seed=seed)).transpose(0, 3, 1, 2)
    if fixed:
        rng = np.random.default_rng(seed)
        masks = np.stack([random_mask(rng, size, size) for _ in range(n)])
    else:
        masks = MaskSourceConfig(target_size=(size, size), seed=seed,
                                 strokes=StrokeSpec(num_strokes=(1, 4), thickness=(1, 3), canvas=(size, size)))
    return TrainingData(x, masks)


def tiny_cfg(**kw):
    base = dict(lr_generator=1e-3, lr_critic=1e-4, batch_size=2, epochs=1, n_critic=2,
                image_size=(16, 16), seed=0)
    base.update(kw)
    return TrainConfig(**base)


def run(cfg, data, fx, **kw):
    return train(cfg, data, gen_spec=TINY_GEN, critic_spec=TINY_CRITIC, extractor=fx, **kw)


def test_defaults_match_reported_settings():
    cfg = TrainConfig()
    assert (cfg.lr_generator, cfg.lr_critic, cfg.adam_beta1, cfg.batch_size) == (1e-4, 1e-12, 0.9, 5)
    assert (cfg.n_critic, cfg.clip_c, cfg.lam) == (5, 0.01, 0.4)


def test_config_validation_and_round_trip():
    with pytest.raises(ValueError):
        TrainConfig(lam=2.0)
    with pytest.raises(ValueError):
        TrainConfig(clip_c=0)
    with pytest.raises(ValueError):
        TrainConfig(lr_decay_factor=1.5)
    cfg = tiny_cfg(mask_bucket=(0.1, 0.2))
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


def test_lr_schedule():
    cfg = TrainConfig(lr_generator=1e-3, lr_decay_every=10, lr_decay_factor=0.5)
    assert [cfg.generator_lr(s) for s in (0, 9, 10, 25)] == [1e-3, 1e-3, 5e-4, 2.5e-4]
    assert TrainConfig(lr_generator=1e-3).generator_lr(10 ** 6) == 1e-3


def test_zero_critic_first_estimate_is_zero(tiny_fx):
    state = init_state(tiny_cfg(), TINY_GEN, TINY_CRITIC, tiny_fx)
    with torch.no_grad():
        for p in state.critic.parameters():
            p.zero_()
    real, masked, masks = tiny_data().batch([0, 1], state.rng, None)
    assert critic_step(state, real, masked, masks) == 0.0


def test_critic_step_clips_and_leaves_generator(tiny_fx):
    state = init_state(tiny_cfg(lr_critic=0.5, clip_c=0.02), TINY_GEN, TINY_CRITIC, tiny_fx)
    g_before = param_hash(state.generator)
    real, masked, masks = tiny_data().batch([0, 1], state.rng, None)
    critic_step(state, real, masked, masks)
    assert param_hash(state.generator) == g_before
    assert all(p.abs().max() <= 0.02 for p in state.critic.parameters())
    assert state.critic_steps == 1


def test_generator_step_leaves_critic(tiny_fx):
    state = init_state(tiny_cfg(lam=0.0), TINY_GEN, TINY_CRITIC, tiny_fx)
    c_before, g_before = param_hash(state.critic), param_hash(state.generator)
    real, masked, masks = tiny_data().batch([0, 1], state.rng, None)
    lg, lp, lrm = generator_step(state, tiny_fx, real, masked, masks)
    assert param_hash(state.critic) == c_before
    assert param_hash(state.generator) != g_before
    assert lg == lp  # lambda = 0 endpoint
    assert all(p.grad is None for p in state.critic.parameters())


def test_single_pair_overfit_decreases(tiny_fx):
    data = tiny_data(n=1)
    state = run(tiny_cfg(batch_size=1, epochs=200, n_critic=1), data, tiny_fx)
    lg = [r["L_G"] for r in generator_history(state.history)]
    assert len(lg) == 200
    assert np.mean(lg[-10:]) < np.mean(lg[:10])
    assert lg[-1] < lg[0]


def test_zero_epochs_returns_initial_state(tiny_fx, tmp_path):
    state = run(tiny_cfg(epochs=0), tiny_data(), tiny_fx, out_dir=tmp_path)
    assert state.step == 0 and state.history == []
    assert (tmp_path / "checkpoint" / "manifest.json").exists()


def test_schedule_bookkeeping_and_step_log(tiny_fx, tmp_path):
    cfg = tiny_cfg(epochs=2, n_critic=5)
    state = run(cfg, tiny_data(n=5), tiny_fx, out_dir=tmp_path)
    # 5 images, batch 2 -> 3 generator steps per epoch
    assert state.step == 6 and state.critic_steps == 30
    with open(tmp_path / "steps.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert tuple(rows[0].keys()) == STEP_LOG_FIELDS
    kinds = [r["kind"] for r in rows]
    assert kinds == (["critic"] * 5 + ["generator"]) * 6
    assert all(np.isfinite(float(r["L_G"])) for r in rows if r["kind"] == "generator")
    assert len(epoch_means(state.history)) == 2


def test_training_is_deterministic(tiny_fx):
    a = run(tiny_cfg(epochs=2), tiny_data(fixed=False), tiny_fx)
    b = run(tiny_cfg(epochs=2), tiny_data(fixed=False), tiny_fx)
    assert a.history == b.history
    assert param_hash(a.generator) == param_hash(b.generator)


def test_max_generator_steps_stops(tiny_fx):
    state = run(tiny_cfg(epochs=100, max_generator_steps=3), tiny_data(), tiny_fx)
    assert state.step == 3


def test_periodic_checkpoints(tiny_fx, tmp_path):
    run(tiny_cfg(epochs=2, checkpoint_every=2), tiny_data(), tiny_fx, out_dir=tmp_path)
    names = sorted(p.name for p in (tmp_path / "checkpoints").iterdir())
    assert names == ["step_0000002", "step_0000004"]


def test_image_size_mismatch(tiny_fx):
    with pytest.raises(ValueError, match="config expects"):
        run(tiny_cfg(image_size=(32, 32)), tiny_data(), tiny_fx)


def test_extractor_identity_checked_on_resume(tiny_fx, small_fx):
    state = run(tiny_cfg(max_generator_steps=1), tiny_data(), tiny_fx)
    with pytest.raises(ValueError, match="differs"):
        run(tiny_cfg(max_generator_steps=2), tiny_data(), small_fx, state=state)


def test_non_finite_writes_diagnostic(tiny_fx, tmp_path):
    from rmnet.model import NonFiniteError
    state = init_state(tiny_cfg(), TINY_GEN, TINY_CRITIC, tiny_fx)
    with torch.no_grad():
        state.generator.output.bias.fill_(float("nan"))
    with pytest.raises(NonFiniteError):
        run(tiny_cfg(), tiny_data(), tiny_fx, state=state, out_dir=tmp_path)
    assert (tmp_path / "diagnostic" / "manifest.json").exists()
    assert not (tmp_path / "checkpoint").exists()


def test_data_validation():
    with pytest.raises(ValueError):
        TrainingData(np.zeros((2, 16, 16, 3), np.float32), np.ones((2, 16, 16)))
    with pytest.raises(ValueError):
        TrainingData(np.zeros((2, 3, 16, 16), np.float32), np.ones((3, 16, 16)))
