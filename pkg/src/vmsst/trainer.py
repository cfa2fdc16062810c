"""Deterministic seeded training loop.

All randomness at step s comes from a generator seeded with (seed, s), so a
resumed checkpoint reproduces an unbroken run exactly. Learning rate follows
linear warmup then inverse-sqrt decay; the KL weight ramps linearly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .corpus import ParallelPair, Vocabulary, epoch_batches
from .errors import ConfigError, ContractError, NumericalError
from .model import Model
from .numcore import Tape, backward
from .objectives import OBJECTIVES, LossBreakdown, compute_loss

DEFAULT_LAMBDA = {"vmsst": 0.1, "vmsst_contrastive": 0.0005}
LOSS_CSV_COLUMNS = (
    "step", "lr", "kl_weight", "total", "recon_a", "recon_b", "kl_sem",
    "kl_lang_a", "kl_lang_b", "translation_ab", "translation_ba", "contrastive",
)


@dataclass
class TrainingConfig:
    objective: str = "vmsst"
    steps: int = 5000
    batch_size: int = 64
    peak_lr: float = 0.001
    warmup_steps: int = 4000
    kl_anneal_steps: int = 10000
    lam: Optional[float] = None
    dropout_rate: Optional[float] = None
    use_kl: bool = True
    seed: int = 7
    checkpoint_every: int = 0
    eval_every: int = 0
    clip_norm: float = 1.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    adam_eps: float = 1e-9

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ConfigError(
                f"training.objective {self.objective!r} not one of {OBJECTIVES}"
            )
        if self.steps < 1:
            raise ConfigError("training.steps must be >= 1")
        if self.warmup_steps < 1:
            raise ConfigError("training.warmup_steps must be >= 1")
        if self.kl_anneal_steps < 1:
            raise ConfigError("training.kl_anneal_steps must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("training.batch_size must be >= 1")
        if self.lam is not None and self.lam < 0:
            raise ConfigError("training.lambda must be >= 0")
        if self.dropout_rate is not None and not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("training.dropout_rate must be in [0, 1)")

    def resolved_lambda(self) -> float:
        if self.lam is not None:
            return self.lam
        return DEFAULT_LAMBDA.get(self.objective, 0.0)

    def resolved_dropout(self) -> float:
        if self.dropout_rate is not None:
            return self.dropout_rate
        return 0.1 if self.objective == "contrastive" else 0.0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainingConfig":
        names = {f.name for f in cls.__dataclass_fields__.values()}  # type: ignore[attr-defined]
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"training config has unknown fields: {sorted(unknown)}")
        return cls(**d)


def lr_schedule(step: int, peak_lr: float, warmup_steps: int) -> float:
    """Linear warmup to peak_lr at warmup_steps, then inverse-sqrt decay."""
    if step < 1:
        raise ContractError("lr_schedule: step must be >= 1")
    return peak_lr * min(step / warmup_steps, math.sqrt(warmup_steps / step))


def kl_anneal(step: int, kl_anneal_steps: int) -> float:
    """Linear ramp from 0 to 1 over kl_anneal_steps, clamped at 1."""
    if step < 0:
        raise ContractError("kl_anneal: step must be >= 0")
    return min(step / kl_anneal_steps, 1.0)


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]

    @classmethod
    def init(cls, model: Model) -> "AdamState":
        return cls(
            m={n: np.zeros_like(p.data) for n, p in model.params.items()},
            v={n: np.zeros_like(p.data) for n, p in model.params.items()},
        )


def clip_gradients(model: Model, max_norm: float) -> float:
    """Scale all grads so the global norm is at most max_norm; returns the
    pre-clip norm. Never increases the norm."""
    sq = 0.0
    for p in model.params.values():
        if p.grad is not None:
            sq += float(np.sum(p.grad.astype(np.float64) ** 2))
    norm = math.sqrt(sq)
    if norm > max_norm > 0:
        scale = max_norm / norm
        for p in model.params.values():
            if p.grad is not None:
                p.grad *= scale
    return norm


@dataclass
class TrainState:
    model: Model
    config: TrainingConfig
    opt: AdamState
    step: int = 0

    @classmethod
    def init(cls, model: Model, config: TrainingConfig) -> "TrainState":
        return cls(model=model, config=config, opt=AdamState.init(model))


def train_step(state: TrainState, batch) -> LossBreakdown:
    """One optimizer update; all randomness derives from (seed, step)."""
    cfg = state.config
    step = state.step + 1
    rng = np.random.default_rng([cfg.seed, step])
    kl_weight = kl_anneal(state.step, cfg.kl_anneal_steps) if cfg.use_kl else 0.0
    model = state.model
    with Tape():
        loss, breakdown = compute_loss(
            cfg.objective, model, batch, rng,
            lam=cfg.resolved_lambda(), kl_weight=kl_weight,
            dropout_rate=cfg.resolved_dropout(),
        )
        if not np.isfinite(breakdown.total):
            raise NumericalError(
                f"non-finite loss at step {step}: {breakdown}"
            )
        model.zero_grad()
        backward(loss)
    clip_gradients(model, cfg.clip_norm)
    lr = lr_schedule(step, cfg.peak_lr, cfg.warmup_steps)
    b1, b2, eps = cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps
    bc1 = 1.0 - b1**step
    bc2 = 1.0 - b2**step
    for name, p in model.params.items():
        g = p.grad
        if g is None:
            continue
        m = state.opt.m[name]
        v = state.opt.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= (lr / bc1) * m / (np.sqrt(v / bc2) + eps)
    state.step = step
    return breakdown


def breakdown_csv_row(step: int, lr: float, bd: LossBreakdown) -> str:
    vals = [str(step), repr(float(lr)), repr(float(bd.kl_weight)),
            repr(float(bd.total)), repr(float(bd.recon_a)), repr(float(bd.recon_b)),
            repr(float(bd.kl_sem)), repr(float(bd.kl_lang_a)), repr(float(bd.kl_lang_b)),
            repr(float(bd.translation_ab)), repr(float(bd.translation_ba)),
            repr(float(bd.contrastive))]
    return ",".join(vals)


def train(state: TrainState, pairs: Sequence[ParallelPair], vocab: Vocabulary,
          max_len: int, total_steps: Optional[int] = None,
          loss_csv: Optional[Path] = None, checkpoint_dir: Optional[Path] = None,
          quiet: bool = True,
          step_callback: Optional[Callable[[int, LossBreakdown], None]] = None,
          ) -> list[LossBreakdown]:
    """Run the loop from state.step to total_steps (default config.steps).

    Writes one loss-CSV row per step executed in this call and checkpoints
    per config.checkpoint_every plus a final checkpoint.
    """
    cfg = state.config
    target = cfg.steps if total_steps is None else total_steps
    per_epoch = math.ceil(len(pairs) / cfg.batch_size)
    csv_fh = None
    if loss_csv is not None:
        Path(loss_csv).parent.mkdir(parents=True, exist_ok=True)
        csv_fh = open(loss_csv, "w", encoding="utf-8")
        csv_fh.write(",".join(LOSS_CSV_COLUMNS) + "\n")
    if checkpoint_dir is not None:
        Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
    history: list[LossBreakdown] = []
    batches: list = []
    batches_epoch = -1
    try:
        while state.step < target:
            epoch = state.step // per_epoch
            if epoch != batches_epoch:
                batches = epoch_batches(pairs, cfg.batch_size, cfg.seed, epoch,
                                        vocab, max_len)
                batches_epoch = epoch
            batch = batches[state.step % per_epoch]
            bd = train_step(state, batch)
            history.append(bd)
            if csv_fh is not None:
                lr = lr_schedule(state.step, cfg.peak_lr, cfg.warmup_steps)
                csv_fh.write(breakdown_csv_row(state.step, lr, bd) + "\n")
            if not quiet and (state.step % 100 == 0 or state.step == target):
                print(f"step {state.step}/{target} {cfg.objective} "
                      f"total={bd.total:.4f}", flush=True)
            if step_callback is not None:
                step_callback(state.step, bd)
            if (checkpoint_dir is not None and cfg.checkpoint_every > 0
                    and state.step % cfg.checkpoint_every == 0):
                save_state(state, Path(checkpoint_dir) / f"step{state.step:07d}.ckpt")
        if checkpoint_dir is not None:
            save_state(state, Path(checkpoint_dir) / "final.ckpt")
    finally:
        if csv_fh is not None:
            csv_fh.close()
    return history


def save_state(state: TrainState, path) -> None:
    save_checkpoint(path, state.model, step=state.step,
                    adam_m=state.opt.m, adam_v=state.opt.v,
                    training=state.config.to_dict())


def load_state(path) -> TrainState:
    loaded = load_checkpoint(path)
    if loaded.training is None or loaded.adam_m is None or loaded.adam_v is None:
        raise ConfigError(f"checkpoint {path} lacks optimizer state; cannot resume")
    cfg = TrainingConfig.from_dict(loaded.training)
    return TrainState(model=loaded.model, config=cfg,
                      opt=AdamState(m=loaded.adam_m, v=loaded.adam_v),
                      step=loaded.step)
