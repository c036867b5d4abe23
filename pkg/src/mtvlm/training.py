"""Two-stage optimization: change-module pretraining and joint tuning.

Stage 1 trains the change-extraction module (plus the projector) against
captions through a throwaway single-layer transformer head, with the
patch encoder frozen. Stage 2 tunes the language model on the mixed
instruction data with the whole visual side frozen.

Both stages share the schedule (linear warmup into cosine decay), the
AdamW optimizer, and the next-token cross entropy below.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autograd import Parameter, ParameterSet, Tensor, concat, take
from .change import (ChangeFeatureMap, DualTimeFeatures, FusionParams,
                     SpatialEnhanceParams, change_extract)
from .checkpoint import write_checkpoint
from .data import MixedDataset, SampleRecord
from .errors import ConfigurationError, ContractError, DivergenceError
from .lm import LMConfig, TinyCausalLM, Vocab
from .vision import (EncoderConfig, PatchLinearEncoder, Projector,
                     embed_change, load_visual)


@dataclass
class TrainConfig:
    max_lr: float = 1e-4
    min_lr: float = 0.0
    warmup_ratio: float = 0.03
    # Full-scale published run: batch 128 for 3,858 steps. Desk runs
    # override both; the defaults document the reference setting.
    total_steps: int = 3858
    batch_size: int = 128
    seed: int = 0
    freeze: tuple[str, ...] = ()
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip: float | None = None

    def __post_init__(self):
        if not 0.0 <= self.warmup_ratio < 1.0:
            raise ConfigurationError(
                f"warmup_ratio must be in [0, 1), got {self.warmup_ratio}")
        if self.min_lr > self.max_lr:
            raise ConfigurationError(
                f"min_lr {self.min_lr} exceeds max_lr {self.max_lr}")
        if self.total_steps < 0:
            raise ConfigurationError(f"negative total_steps {self.total_steps}")
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.total_steps > 0 and self.warmup_steps >= self.total_steps:
            raise ConfigurationError(
                f"warmup ({self.warmup_steps} steps) spans the whole run")

    @property
    def warmup_steps(self) -> int:
        return round(self.warmup_ratio * self.total_steps)


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to max_lr, then cosine decay to min_lr."""
    if not 0 <= step <= cfg.total_steps:
        raise ContractError(
            f"step {step} outside [0, {cfg.total_steps}]")
    w = cfg.warmup_steps
    if step < w:
        return cfg.max_lr * step / w
    frac = (step - w) / (cfg.total_steps - w)
    return cfg.min_lr + 0.5 * (cfg.max_lr - cfg.min_lr) * (1.0 + math.cos(math.pi * frac))


def cross_entropy_next_token(logits: Tensor, targets: list[int],
                             mask: np.ndarray) -> Tensor:
    """Mean -log p(target[i]) under logits[i-1], over mask-true positions."""
    mask = np.asarray(mask, dtype=bool)
    n = logits.shape[0]
    if len(targets) != n or mask.shape != (n,):
        raise ContractError(
            f"logits rows {n}, targets {len(targets)}, mask {mask.shape} disagree")
    positions = np.flatnonzero(mask)
    if positions.size == 0:
        raise ContractError("loss mask selects no positions")
    if mask[0]:
        raise ContractError("position 0 has no preceding logits to predict it")
    logp = logits.log_softmax(axis=-1)
    picked = take(logp, [int(i) - 1 for i in positions],
                  [int(targets[i]) for i in positions])
    return picked.sum().scale(-1.0 / positions.size)


class AdamW:
    """Decoupled weight decay; parameters without gradients are skipped."""

    def __init__(self, params: list[Parameter], cfg: TrainConfig):
        self.params = list(params)
        self.cfg = cfg
        self.t = 0
        self.m = {p.name: np.zeros_like(p.data) for p in self.params}
        self.v = {p.name: np.zeros_like(p.data) for p in self.params}

    def step(self, lr: float) -> None:
        c = self.cfg
        self.t += 1
        bc1 = 1.0 - c.beta1 ** self.t
        bc2 = 1.0 - c.beta2 ** self.t
        for p in self.params:
            g = p.grad
            if g is None:
                continue
            m = self.m[p.name] = c.beta1 * self.m[p.name] + (1.0 - c.beta1) * g
            v = self.v[p.name] = c.beta2 * self.v[p.name] + (1.0 - c.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + c.eps)
            p.data = p.data - lr * update - lr * c.weight_decay * p.data


def clip_gradients(params: list[Parameter], max_norm: float) -> float:
    """Scale all gradients so their global l2 norm is at most max_norm."""
    total = 0.0
    grads = [p for p in params if p.grad is not None]
    for p in grads:
        total += float(np.sum(p.grad * p.grad))
    norm = math.sqrt(total)
    if norm > max_norm:
        scale = max_norm / norm
        for p in grads:
            p.tensor.grad = p.grad * scale
    return norm


def write_log(path: str | Path, log: list[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in log:
            fh.write(json.dumps(row) + "\n")


def _cyclic_batches(n: int, batch_size: int, steps: int):
    at = 0
    for _ in range(steps):
        batch = [(at + j) % n for j in range(min(batch_size, n))]
        at = (at + min(batch_size, n)) % n
        yield batch


def _finite_or_raise(value: float, step: int) -> None:
    if not math.isfinite(value):
        raise DivergenceError(step - 1)


# -- stage 1: change-module pretraining ----------------------------------------

class _CaptionStub:
    """Change module + projector + single-layer caption head over frozen
    encoder features. Lives only for the duration of pretraining."""

    def __init__(self, records: list[SampleRecord], seed: int, *,
                 patch: int, d_v: int, dim: int, heads: int, max_seq: int):
        self.params = ParameterSet()
        rng = np.random.default_rng(seed)
        self.encoder = PatchLinearEncoder(EncoderConfig(d_p=patch, d_v=d_v),
                                          self.params, rng)
        self.enhance = SpatialEnhanceParams(self.params, d_v)
        self.fusion = FusionParams(self.params, d_v, rng)
        self.projector = Projector(d_v, dim, self.params, rng)
        self.vocab = Vocab.from_texts([r.target for r in records])
        self.head = TinyCausalLM(LMConfig(dim=dim, layers=1, heads=heads,
                                          max_seq=max_seq),
                                 len(self.vocab), self.params, rng,
                                 prefix="caphead.")
        self.params.freeze(("encoder.",))

    def change_map(self, record: SampleRecord, base_dir) -> ChangeFeatureMap:
        vi = load_visual(record.kind, record.visual_refs, base_dir)
        feats = self.encoder.encode(vi)
        dual = DualTimeFeatures(f1=feats.per_frame[0], f2=feats.per_frame[1],
                                grid=feats.grid)
        return change_extract(dual, self.enhance, self.fusion)

    def caption_loss(self, record: SampleRecord, base_dir) -> Tensor:
        unit = embed_change(self.change_map(record, base_dir), self.projector)
        ids = [self.vocab.bos_id] + self.vocab.encode(record.target) \
            + [self.vocab.eos_id]
        rows = concat([unit.values, self.head.embed_ids(ids)], axis=0)
        n_vis = unit.values.shape[0]
        targets = [0] * n_vis + ids
        mask = np.zeros(len(targets), dtype=bool)
        mask[n_vis + 1:] = True        # supervise everything after bos
        return cross_entropy_next_token(self.head.forward(rows), targets, mask)


def pretrain_change_module(records: list[SampleRecord], cfg: TrainConfig,
                           base_dir: str | Path, *, patch: int = 8,
                           d_v: int = 16, dim: int = 64, heads: int = 4,
                           max_seq: int = 128):
    """Caption-supervised warmup of the change module.

    Returns (state, log): state holds the trained change.* and projector.*
    arrays, ready to seed joint tuning; the caption head is dropped.
    """
    if not records:
        raise ContractError("pretraining needs at least one record")
    bad = [r.id for r in records if r.kind != "pair"]
    if bad:
        raise ContractError(f"pretraining expects pair records, got {bad[:3]}")
    stub = _CaptionStub(records, cfg.seed, patch=patch, d_v=d_v, dim=dim,
                        heads=heads, max_seq=max_seq)
    opt = AdamW(stub.params.trainable(), cfg)
    log: list[dict] = []
    for step, batch in enumerate(_cyclic_batches(len(records), cfg.batch_size,
                                                 cfg.total_steps)):
        stub.params.zero_grads()
        loss = stub.caption_loss(records[batch[0]], base_dir)
        for i in batch[1:]:
            loss = loss + stub.caption_loss(records[i], base_dir)
        loss = loss.scale(1.0 / len(batch))
        value = loss.item()
        _finite_or_raise(value, step)
        loss.backward()
        if cfg.grad_clip is not None:
            clip_gradients(stub.params.trainable(), cfg.grad_clip)
        lr = lr_at(step, cfg)
        opt.step(lr)
        log.append({"step": step, "lr": lr, "loss": value})
    state = {name: arr for name, arr in stub.params.state().items()
             if name.startswith(("change.", "projector."))}
    return state, log


# -- stage 2: joint instruction tuning ------------------------------------------

JOINT_FREEZE = ("encoder.", "change.", "projector.")


def train_joint(model, dataset: MixedDataset | list[SampleRecord],
                cfg: TrainConfig, *, log_path: str | Path | None = None,
                checkpoint_path: str | Path | None = None) -> list[dict]:
    """Tune the unfrozen parameters on the mixed dataset.

    ``model`` supplies ``params``, ``lm``, and ``training_example(record)``
    returning (packed sequence, target ids, loss mask). Records are
    consumed cyclically in the dataset's mixed order. Raises
    DivergenceError on a non-finite loss; the checkpoint and log are only
    written after a clean run.
    """
    records = dataset.records if isinstance(dataset, MixedDataset) else list(dataset)
    if not records:
        raise ContractError("training needs at least one record")
    model.params.freeze(cfg.freeze)
    opt = AdamW(model.params.trainable(), cfg)
    log: list[dict] = []
    for step, batch in enumerate(_cyclic_batches(len(records), cfg.batch_size,
                                                 cfg.total_steps)):
        model.params.zero_grads()
        loss = _example_loss(model, records[batch[0]])
        for i in batch[1:]:
            loss = loss + _example_loss(model, records[i])
        loss = loss.scale(1.0 / len(batch))
        value = loss.item()
        _finite_or_raise(value, step)
        loss.backward()
        if cfg.grad_clip is not None:
            clip_gradients(model.params.trainable(), cfg.grad_clip)
        lr = lr_at(step, cfg)
        opt.step(lr)
        log.append({"step": step, "lr": lr, "loss": value})
    if checkpoint_path is not None:
        write_checkpoint(checkpoint_path, model.params.state())
    if log_path is not None:
        write_log(log_path, log)
    return log


def _example_loss(model, record: SampleRecord) -> Tensor:
    packed, targets, mask = model.training_example(record)
    logits = model.lm.forward(packed.embeddings)
    return cross_entropy_next_token(logits, targets, mask)
