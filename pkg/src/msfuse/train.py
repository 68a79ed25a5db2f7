"""Adam with a triangular cyclic learning rate, periodic validation, best-checkpoint retention."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .augment import AugmentConfig, augment
from .dataset import Case
from .errors import ConfigError, NumericError
from .fpmode import flush_denormals
from .losses import combined_loss, one_hot_targets
from .metrics import mean_aggregated_dsc
from .nn import Parameter
from .segnet import ModelConfig, SegNet, predict_mask, save_checkpoint, sliding_window_infer
from .tensor import Tensor, backward

log = logging.getLogger(__name__)

HALF_CYCLE = 500
BETA1, BETA2, ADAM_EPS = 0.9, 0.999, 1e-8


@dataclass
class TrainConfig:
    iterations: int = 10000
    val_every: int = 500
    lr_base: float = 5e-4
    lr_max: float = 3e-3
    batch: int = 1
    split: float = 0.8
    seed: int = 0
    augment: bool = True
    overlap: float = 0.5

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        if self.val_every < 1 or self.iterations % self.val_every:
            raise ConfigError(f"val_every ({self.val_every}) must be >= 1 and divide iterations ({self.iterations})")
        if not 0 < self.lr_base <= self.lr_max:
            raise ConfigError(f"need 0 < lr_base <= lr_max, got {self.lr_base}, {self.lr_max}")
        if self.batch != 1:
            raise ConfigError("only batch size 1 is supported")
        if not 0 < self.split < 1:
            raise ConfigError(f"split must be in (0, 1), got {self.split}")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")
        if not 0 <= self.overlap < 1:
            raise ConfigError(f"overlap must be in [0, 1), got {self.overlap}")


def cyclic_lr(iteration: int, cfg: TrainConfig) -> float:
    """Triangular wave: base -> max over 500 steps, back to base over the next 500."""
    if iteration < 0:
        raise ValueError("iteration must be >= 0")
    pos = iteration % (2 * HALF_CYCLE)
    frac = pos / HALF_CYCLE if pos <= HALF_CYCLE else (2 * HALF_CYCLE - pos) / HALF_CYCLE
    # convex combination so both endpoints come out exactly
    return cfg.lr_base * (1.0 - frac) + cfg.lr_max * frac


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params: Sequence[tuple[str, Parameter]], grads: Sequence[np.ndarray | None],
              state: AdamState, lr: float) -> AdamState:
    """One bias-corrected Adam update, in place on the parameter arrays.

    A missing gradient counts as zero.  Non-finite gradients abort before any
    parameter is touched.
    """
    if len(params) != len(grads):
        raise ValueError(f"{len(params)} parameters but {len(grads)} gradients")
    for (name, p), g in zip(params, grads):
        if g is None:
            continue
        if g.shape != p.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in {name} at step {state.t + 1}")
    state.t += 1
    c1 = 1.0 - BETA1 ** state.t
    c2 = 1.0 - BETA2 ** state.t
    for (name, p), g in zip(params, grads):
        dt = p.data.dtype
        g = np.zeros_like(p.data) if g is None else g.astype(dt, copy=False)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= dt.type(BETA1)
        m += dt.type(1.0 - BETA1) * g
        v *= dt.type(BETA2)
        v += dt.type(1.0 - BETA2) * g * g
        step = (m / dt.type(c1)) / (np.sqrt(v / dt.type(c2)) + dt.type(ADAM_EPS))
        p.data = p.data - dt.type(lr) * step
    return state


@dataclass
class TrainState:
    iteration: int = 0
    adam: AdamState = field(default_factory=AdamState)
    best_score: float = -math.inf
    best_checkpoint: Path | None = None
    losses: list = field(default_factory=list)  # (iteration, lr, total, bce, dice)
    validations: list = field(default_factory=list)  # (iteration, score)

    def lr_phase(self) -> float:
        """Position inside the current LR cycle, in [0, 1)."""
        return (self.iteration % (2 * HALF_CYCLE)) / (2 * HALF_CYCLE)


@dataclass
class TrainResult:
    checkpoint: Path
    state: TrainState
    model: SegNet
    train_ids: list
    val_ids: list

    @property
    def history(self) -> list:
        return self.state.losses


def split_cases(cases: Sequence[Case], frac: float, seed: int) -> tuple[list[Case], list[Case]]:
    """Seeded shuffle of sorted case ids, then a train/validation cut at ``frac``."""
    if len(cases) < 2:
        raise ConfigError(f"a train/validation split needs at least 2 cases, got {len(cases)}")
    ordered = sorted(cases, key=lambda c: c.case_id)
    perm = np.random.default_rng(seed).permutation(len(ordered))
    n_train = min(max(int(round(frac * len(ordered))), 1), len(ordered) - 1)
    return [ordered[i] for i in perm[:n_train]], [ordered[i] for i in perm[n_train:]]


def validate(model: SegNet, cases: Sequence[Case], overlap: float = 0.5) -> float:
    pairs = []
    for case in cases:
        probs = sliding_window_infer(model.predict, case.image, model.cfg.patch, overlap)
        pairs.append((predict_mask(probs), case.mask))
    return mean_aggregated_dsc(pairs)


def write_history(state: TrainState, out_dir) -> None:
    out_dir = Path(out_dir)
    with open(out_dir / "history.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", "lr", "loss", "bce", "dice"])
        for row in state.losses:
            w.writerow([row[0]] + [repr(float(x)) for x in row[1:]])
    with open(out_dir / "validation.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", "score"])
        for it, score in state.validations:
            w.writerow([it, repr(float(score))])


def train(model_cfg: ModelConfig, train_cfg: TrainConfig, dataset: Sequence[Case], out_dir,
          progress: Callable[[TrainState], None] | None = None) -> TrainResult:
    """Train on a seeded split of ``dataset``; the best validation checkpoint lands in ``out_dir``.

    Validation runs before the first step and after every ``val_every`` steps.
    """
    if not dataset:
        raise ConfigError("dataset is empty")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    seeds = np.random.SeedSequence(train_cfg.seed).spawn(2)
    train_set, val_set = split_cases(dataset, train_cfg.split, int(seeds[0].generate_state(1)[0]))
    sampler = np.random.default_rng(seeds[1])
    aug_cfg = AugmentConfig(patch=model_cfg.patch) if train_cfg.augment else AugmentConfig.identity(model_cfg.patch)

    model = SegNet(model_cfg)
    params = model.trainable()
    state = TrainState()
    ckpt = out_dir / "best.h3ck"

    def run_validation():
        score = validate(model, val_set, train_cfg.overlap)
        state.validations.append((state.iteration, score))
        if score > state.best_score:
            state.best_score = score
            save_checkpoint(ckpt, model, state.iteration, score)
            state.best_checkpoint = ckpt
        log.info("iteration %d: validation mean aggregated DSC %.4f (best %.4f)",
                 state.iteration, score, state.best_score)

    with flush_denormals():
        run_validation()
        t0 = time.perf_counter()
        for it in range(train_cfg.iterations):
            case = train_set[int(sampler.integers(len(train_set)))]
            x, m = augment(case.image, case.mask, aug_cfg, int(sampler.integers(0, 2**63)))
            probs = model(Tensor(x))
            lv = combined_loss(one_hot_targets(m), probs)
            total, bce, dice = lv.as_floats()
            if not math.isfinite(total):
                raise NumericError(f"non-finite loss at iteration {it} (case {case.case_id})")
            backward(lv.total)
            lr = cyclic_lr(it, train_cfg)
            adam_step(params, [p.grad for _, p in params], state.adam, lr)
            model.zero_grad()
            state.losses.append((it, lr, total, bce, dice))
            state.iteration = it + 1
            if state.iteration % train_cfg.val_every == 0:
                log.info("iteration %d: loss %.4f (%.2f s/it)", state.iteration, total,
                         (time.perf_counter() - t0) / state.iteration)
                run_validation()
            if progress is not None:
                progress(state)
    write_history(state, out_dir)
    return TrainResult(ckpt, state, model, [c.case_id for c in train_set], [c.case_id for c in val_set])


def config_dicts() -> tuple[dict, dict]:
    return ModelConfig().to_dict(), asdict(TrainConfig())
