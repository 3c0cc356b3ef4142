"""Alternating WGAN training.

Each batch gets ``n_critic`` critic updates followed by one generator update.
The generator's output is composited with the ground truth (visible pixels
kept, holes predicted) before the critic sees it. Everything random in a run
comes from ``TrainConfig.seed``.
"""

import csv
import logging
import time
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
import torch

from .losses import (FeatureExtractor, FeatureExtractorSpec, build_extractor, check_lambda,
                     generator_loss, wasserstein_loss)
from .mask_synthesis import FULL_RANGE, HoleRatioBucket, MaskSourceConfig, sample_mask_in_bucket
from .masking import apply_mask, composite
from .model import (Critic, CriticSpec, Generator, GeneratorSpec, NonFiniteError, build_critic,
                    build_generator, clip_critic_params)

log = logging.getLogger(__name__)

STEP_LOG_FIELDS = ("step", "kind", "epoch", "L_p", "L_rm", "L_G", "L_w", "wall_time")


@dataclass(frozen=True)
class TrainConfig:
    lr_generator: float = 1e-4
    lr_critic: float = 1e-12
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    batch_size: int = 5
    epochs: int = 1
    n_critic: int = 5
    clip_c: float = 0.01
    lam: float = 0.4
    adv_weight: float = 1e-3
    seed: int = 0
    image_size: Tuple[int, int] = (256, 256)
    checkpoint_every: int = 0
    max_generator_steps: int = 0
    mask_bucket: Tuple[float, float] = (FULL_RANGE.lo, FULL_RANGE.hi)
    # generator lr is multiplied by lr_decay_factor every lr_decay_every generator steps
    lr_decay_every: int = 0
    lr_decay_factor: float = 1.0

    def __post_init__(self):
        if self.lr_generator <= 0 or self.lr_critic <= 0:
            raise ValueError("learning rates must be positive")
        if self.batch_size < 1 or self.n_critic < 1:
            raise ValueError("batch_size and n_critic must be >= 1")
        if self.epochs < 0 or self.checkpoint_every < 0 or self.max_generator_steps < 0:
            raise ValueError("epochs, checkpoint_every and max_generator_steps must be >= 0")
        if self.clip_c <= 0:
            raise ValueError("clip_c must be positive")
        if self.lr_decay_every < 0 or not 0 < self.lr_decay_factor <= 1:
            raise ValueError("lr_decay_every must be >= 0 and lr_decay_factor in (0, 1]")
        if self.adv_weight < 0:
            raise ValueError("adv_weight must be >= 0")
        check_lambda(self.lam)
        HoleRatioBucket(*self.mask_bucket)

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = list(v) if isinstance(v, tuple) else v
        return out

    def generator_lr(self, step: int) -> float:
        if not self.lr_decay_every:
            return self.lr_generator
        return self.lr_generator * self.lr_decay_factor ** (step // self.lr_decay_every)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**kw)


@dataclass
class TrainState:
    config: TrainConfig
    generator: Generator
    critic: Critic
    opt_g: torch.optim.Adam
    opt_d: torch.optim.Adam
    rng: np.random.Generator
    extractor_spec: FeatureExtractorSpec
    extractor_identity: str
    step: int = 0
    critic_steps: int = 0
    epoch: int = 0
    cursor: int = 0
    permutation: Optional[List[int]] = None
    history: List[dict] = field(default_factory=list)


def _adam(params, lr, cfg):
    return torch.optim.Adam(params, lr=lr, betas=(cfg.adam_beta1, cfg.adam_beta2))


def run_seeds(seed: int):
    """Split the root seed into (generator init, critic init, data order)."""
    children = np.random.SeedSequence(seed).spawn(3)
    return tuple(int(c.generate_state(1)[0]) for c in children)


def init_state(cfg: TrainConfig, gen_spec: GeneratorSpec = GeneratorSpec(),
               critic_spec: CriticSpec = CriticSpec(),
               extractor: Optional[FeatureExtractor] = None) -> TrainState:
    gen_seed, critic_seed, data_seed = run_seeds(cfg.seed)
    gen_spec.check_input_size(*cfg.image_size)
    generator = build_generator(gen_spec, gen_seed)
    critic = build_critic(critic_spec, critic_seed)
    if extractor is None:
        extractor = build_extractor()
    return TrainState(
        config=cfg,
        generator=generator,
        critic=critic,
        opt_g=_adam(generator.parameters(), cfg.lr_generator, cfg),
        opt_d=_adam(critic.parameters(), cfg.lr_critic, cfg),
        rng=np.random.default_rng(data_seed),
        extractor_spec=extractor.spec,
        extractor_identity=extractor.identity(),
    )


def _check_params(module, what, step):
    for name, p in module.named_parameters():
        if not torch.isfinite(p).all():
            raise NonFiniteError(f"{what} parameter {name} non-finite after step {step}")


def _fake_composite(state, real, masked, masks):
    with torch.no_grad():
        pred = state.generator(masked, masks)
    return composite(real, pred, masks)


def critic_step(state: TrainState, real, masked, masks, fake=None) -> float:
    """One critic update ascending the Wasserstein estimate, then weight clipping.

    ``fake`` (the composited generator output) is recomputed when not given.
    Returns the Wasserstein estimate before the update.
    """
    if fake is None:
        fake = _fake_composite(state, real, masked, masks)
    state.critic.train()
    lw = wasserstein_loss(state.critic(real), state.critic(fake))
    if not torch.isfinite(lw):
        raise NonFiniteError(f"critic loss is {lw.item()} at critic step {state.critic_steps}")
    state.opt_d.zero_grad(set_to_none=True)
    (-lw).backward()
    state.opt_d.step()
    clip_critic_params(state.critic, state.config.clip_c)
    state.critic_steps += 1
    _check_params(state.critic, "critic", state.critic_steps)
    return lw.item()


def generator_step(state: TrainState, extractor: FeatureExtractor, real, masked, masks, pred=None):
    """One generator update on L_G plus the weighted adversarial term.

    ``pred`` may be a prediction already computed (with graph) from the
    current generator parameters. Returns ``(L_G, L_p, L_rm)`` as floats.
    The critic's parameters are not updated (its gradients are discarded).
    """
    cfg = state.config
    if pred is None:
        pred = state.generator(masked, masks)
    terms = generator_loss(extractor, real, pred, masks, cfg.lam)
    total = terms.total
    if cfg.adv_weight > 0:
        adv = -state.critic(composite(real, pred, masks)).mean()
        total = total + cfg.adv_weight * adv
    if not torch.isfinite(total):
        raise NonFiniteError(f"generator loss is {total.item()} at step {state.step}")
    state.opt_g.zero_grad(set_to_none=True)
    total.backward()
    state.opt_g.step()
    state.critic.zero_grad(set_to_none=True)
    state.step += 1
    _check_params(state.generator, "generator", state.step)
    return terms.total.item(), terms.perceptual.item(), terms.reverse_mask.item()


class TrainingData:
    """Model-range images (N x 3 x H x W) with fixed or freshly sampled masks."""

    def __init__(self, images, masks):
        self.images = torch.as_tensor(images, dtype=torch.float32)
        if self.images.ndim != 4 or self.images.shape[1] != 3:
            raise ValueError(f"images must be N x 3 x H x W, got {tuple(self.images.shape)}")
        if len(self.images) == 0:
            raise ValueError("training set is empty")
        if isinstance(masks, MaskSourceConfig):
            self.mask_source, self.fixed_masks = masks, None
        else:
            m = torch.as_tensor(np.asarray(masks), dtype=torch.float32)
            if m.ndim == 3:
                m = m[:, None]
            if m.shape[0] != self.images.shape[0] or m.shape[2:] != self.images.shape[2:]:
                raise ValueError(f"fixed masks {tuple(m.shape)} do not match images")
            self.mask_source, self.fixed_masks = None, m

    def __len__(self):
        return len(self.images)

    def batch(self, idx, rng, bucket):
        real = self.images[idx]
        if self.fixed_masks is not None:
            masks = self.fixed_masks[idx]
        else:
            seeds = rng.integers(0, 2 ** 63 - 1, size=len(idx))
            masks = torch.stack([
                torch.from_numpy(sample_mask_in_bucket(self.mask_source, bucket, seed=int(s))).float()
                for s in seeds])[:, None]
        return real, apply_mask(real, masks), masks


class StepLog:
    """Append-only CSV of optimizer steps."""

    def __init__(self, path: Path):
        self.path = Path(path)
        new = not self.path.exists()
        self._fh = open(self.path, "a", newline="")
        self._w = csv.DictWriter(self._fh, fieldnames=STEP_LOG_FIELDS)
        if new:
            self._w.writeheader()

    def write(self, row: dict):
        self._w.writerow({k: row.get(k, "") for k in STEP_LOG_FIELDS})
        self._fh.flush()

    def close(self):
        self._fh.close()


def train(cfg: TrainConfig, data: TrainingData, *, gen_spec: GeneratorSpec = GeneratorSpec(),
          critic_spec: CriticSpec = CriticSpec(), extractor: Optional[FeatureExtractor] = None,
          state: Optional[TrainState] = None, out_dir=None) -> TrainState:
    """Run (or resume) training until ``cfg.epochs`` or ``cfg.max_generator_steps``.

    With ``state`` given, training continues from it, and ``cfg`` only
    changes the stopping point. ``out_dir`` receives ``steps.csv``, periodic
    checkpoints under ``checkpoints/`` and the final one in ``checkpoint/``.
    """
    from .checkpoint import save_checkpoint

    if extractor is None:
        extractor = build_extractor()
    if state is None:
        state = init_state(cfg, gen_spec, critic_spec, extractor)
    elif state.extractor_identity != extractor.identity():
        raise ValueError(f"extractor {extractor.identity()} differs from the checkpoint's "
                         f"{state.extractor_identity}")
    run_cfg = state.config
    if tuple(data.images.shape[2:]) != tuple(run_cfg.image_size):
        raise ValueError(f"images are {tuple(data.images.shape[2:])}, "
                         f"config expects {tuple(run_cfg.image_size)}")
    bucket = HoleRatioBucket(*run_cfg.mask_bucket)
    out = Path(out_dir) if out_dir is not None else None
    steplog = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        steplog = StepLog(out / "steps.csv")

    prev = torch.are_deterministic_algorithms_enabled()
    torch.use_deterministic_algorithms(True)
    state.generator.train()
    t0 = time.perf_counter()
    try:
        while state.epoch < cfg.epochs:
            if cfg.max_generator_steps and state.step >= cfg.max_generator_steps:
                break
            if state.permutation is None:
                state.permutation = state.rng.permutation(len(data)).tolist()
                state.cursor = 0
            idx = state.permutation[state.cursor:state.cursor + run_cfg.batch_size]
            real, masked, masks = data.batch(idx, state.rng, bucket)
            # generator weights do not move during the critic updates
            pred = state.generator(masked, masks)
            fake = composite(real, pred.detach(), masks)
            for _ in range(run_cfg.n_critic):
                lw = critic_step(state, real, masked, masks, fake=fake)
                rec = {"step": state.critic_steps, "kind": "critic", "epoch": state.epoch, "L_w": lw}
                state.history.append(rec)
                if steplog:
                    steplog.write({**rec, "wall_time": round(time.perf_counter() - t0, 4)})
            for group in state.opt_g.param_groups:
                group["lr"] = run_cfg.generator_lr(state.step)
            lg, lp, lrm = generator_step(state, extractor, real, masked, masks, pred=pred)
            rec = {"step": state.step, "kind": "generator", "epoch": state.epoch,
                   "L_p": lp, "L_rm": lrm, "L_G": lg, "L_w": lw}
            state.history.append(rec)
            if steplog:
                steplog.write({**rec, "wall_time": round(time.perf_counter() - t0, 4)})
            state.cursor += len(idx)
            if state.cursor >= len(data):
                state.epoch += 1
                state.permutation = None
                state.cursor = 0
            if out is not None and run_cfg.checkpoint_every and state.step % run_cfg.checkpoint_every == 0:
                save_checkpoint(state, out / "checkpoints" / f"step_{state.step:07d}")
    except NonFiniteError:
        if out is not None:
            try:
                save_checkpoint(state, out / "diagnostic", verify_finite=False)
            except Exception:  # the original error matters more
                log.exception("could not write diagnostic snapshot")
        raise
    finally:
        torch.use_deterministic_algorithms(prev)
        if steplog:
            steplog.close()
    if out is not None:
        save_checkpoint(state, out / "checkpoint")
    return state


def generator_history(history) -> List[dict]:
    return [r for r in history if r["kind"] == "generator"]


def epoch_means(history, key="L_G") -> List[float]:
    by_epoch = {}
    for r in generator_history(history):
        by_epoch.setdefault(r["epoch"], []).append(r[key])
    return [float(np.mean(by_epoch[e])) for e in sorted(by_epoch)]
