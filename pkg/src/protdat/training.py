"""Next-token training loop: decoupled-weight-decay Adam over batches.

The loss is cross-entropy on the sequence branch only; text and slot
branches receive gradients exclusively through the concatenated
attention path.  Runs are bit-for-bit reproducible under a fixed seed:
shuffling, initialization and batch assembly all derive from one root
seed, and the emitted loss log carries no wall-clock fields (timings go
to a separate sidecar so log files from identical runs compare equal).
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .data import Batch, ProteinRecord, batches_of, make_batch
from .model import ModelConfig, ModelParams, init_params, model_forward, save_checkpoint
from .tokenizer import AminoVocabulary, TrainableTextEncoder


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainingConfig:
    batch_size: int = 10
    lr: float = 1.5e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-9
    weight_decay: float = 0.1
    clip_norm: float | None = 1.0

    def to_dict(self) -> dict:
        return {
            "batch_size": self.batch_size,
            "lr": self.lr,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "weight_decay": self.weight_decay,
            "clip_norm": self.clip_norm,
        }


class OptimizerState:
    """Per-parameter Adam moments plus the shared step counter.

    Weight decay is decoupled and skipped for norm gains/offsets and the
    PAD row of the token embedding.
    """

    def __init__(self, params: ModelParams, config: TrainingConfig, pad_id: int = 0):
        self.config = config
        self.step = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.decay_mask: dict[str, np.ndarray | float] = {}
        for name, p in params.named_parameters():
            self.m[name] = np.zeros_like(p.data)
            self.v[name] = np.zeros_like(p.data)
            if ".ln" in name and (name.endswith(".gamma") or name.endswith(".beta")):
                self.decay_mask[name] = 0.0
            elif name == "token_embedding":
                mask = np.ones(p.shape[0], dtype=p.data.dtype)
                mask[pad_id] = 0.0
                self.decay_mask[name] = mask[:, None]
            else:
                self.decay_mask[name] = 1.0

    def apply(self, params: ModelParams) -> None:
        cfg = self.config
        self.step += 1
        t = self.step
        bc1 = 1.0 - cfg.beta1**t
        bc2 = 1.0 - cfg.beta2**t
        for name, p in params.named_parameters():
            g = p.grad_or_zeros()
            m = self.m[name]
            v = self.v[name]
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
            if cfg.weight_decay:
                update = update + cfg.weight_decay * self.decay_mask[name] * p.data
            p.data = p.data - cfg.lr * update


def clip_gradients(params: ModelParams, max_norm: float) -> float:
    """Global-norm gradient clipping; returns the pre-clip norm."""
    total = 0.0
    for _, p in params.named_parameters():
        if p.grad is not None:
            total += float((p.grad.astype(np.float64) ** 2).sum())
    norm = float(np.sqrt(total))
    if norm > max_norm and norm > 0:
        scale = max_norm / norm
        for _, p in params.named_parameters():
            if p.grad is not None:
                p.grad *= scale
    return norm


def compute_loss(batch: Batch, params: ModelParams) -> nx.Tensor:
    """Sequence-branch next-token cross-entropy; PAD targets contribute nothing."""
    logits, _ = model_forward(batch, params)
    return nx.next_token_cross_entropy(logits, batch.targets(), ignore_id=batch.pad_id)


def training_step(batch: Batch, params: ModelParams, opt: OptimizerState) -> float:
    """One forward/backward/update.  A non-finite loss aborts before any
    parameter or optimizer mutation."""
    params.zero_grad()
    loss = compute_loss(batch, params)
    loss_value = float(loss.data)
    if not np.isfinite(loss_value):
        raise TrainingError(f"non-finite loss {loss_value}; step aborted")
    loss.backward()
    if opt.config.clip_norm is not None:
        clip_gradients(params, opt.config.clip_norm)
    opt.apply(params)
    return loss_value


@dataclass
class LogEntry:
    step: int
    split: str
    loss: float
    wall_time: float


@dataclass
class TrainLog:
    seed: int
    config: dict
    entries: list[LogEntry] = field(default_factory=list)

    def losses(self, split: str = "train") -> list[float]:
        return [e.loss for e in self.entries if e.split == split]

    def write(self, out_dir) -> None:
        """Loss curve (deterministic fields only) plus a timing sidecar."""
        out_dir = Path(out_dir)
        with open(out_dir / "train_log.jsonl", "w") as fh:
            for e in self.entries:
                fh.write(json.dumps({"step": e.step, "split": e.split, "loss": e.loss}) + "\n")
        with open(out_dir / "timing.jsonl", "w") as fh:
            for e in self.entries:
                fh.write(json.dumps({"step": e.step, "wall_time": e.wall_time}) + "\n")


def evaluate_loss(records: list[ProteinRecord], params: ModelParams, vocab, provider,
                  batch_size: int) -> float:
    """Mean per-token loss over a record list (no gradients)."""
    total, count = 0.0, 0
    order = np.arange(len(records))
    with nx.no_grad():
        for start in range(0, len(records), batch_size):
            chunk = [records[i] for i in order[start : start + batch_size]]
            batch = make_batch(chunk, vocab, provider, params.config.c_size,
                               dtype=params.config.np_dtype)
            loss = compute_loss(batch, params)
            n = int((batch.targets() != batch.pad_id).sum())
            total += float(loss.data) * n
            count += n
    return total / max(count, 1)


def fit(
    train_records: list[ProteinRecord],
    valid_records: list[ProteinRecord],
    model_config: ModelConfig,
    train_config: TrainingConfig,
    epochs: int,
    seed: int,
    out_dir=None,
    embedding_path=None,
    init_from: ModelParams | None = None,
    max_steps: int | None = None,
    stop_below_loss: float | None = None,
) -> tuple[ModelParams, TrainLog]:
    """Train a fresh model; returns final parameters and the step log.

    Deterministic under ``seed``: initialization, epoch shuffles and
    batch composition all derive from it.  When ``out_dir`` is given the
    best-validation checkpoint and log files are written there.
    """
    if not train_records:
        raise TrainingError("empty training set")
    vocab = AminoVocabulary()
    if init_from is not None:
        params = init_from
    elif model_config.text_provider == "trainable":
        words = TrainableTextEncoder.build_vocabulary([r.text for r in train_records])
        params = init_params(model_config, seed=seed, text_words=words)
    else:
        params = init_params(model_config, seed=seed)
    provider = params.text_encoder(embedding_path)
    opt = OptimizerState(params, train_config, pad_id=vocab.pad_id)
    log = TrainLog(seed=seed, config={"model": params.config.to_dict(), "training": train_config.to_dict()})
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng(seed)
    best_valid = np.inf
    step = 0
    t0 = time.monotonic()
    stop = False
    for _epoch in range(epochs):
        epoch_losses = []
        for chunk in batches_of(train_records, train_config.batch_size, rng):
            batch = make_batch(chunk, vocab, provider, model_config.c_size,
                               dtype=model_config.np_dtype)
            loss = training_step(batch, params, opt)
            step += 1
            epoch_losses.append(loss)
            log.entries.append(LogEntry(step=step, split="train", loss=loss,
                                        wall_time=time.monotonic() - t0))
            if max_steps is not None and step >= max_steps:
                stop = True
                break
        if stop_below_loss is not None and epoch_losses:
            if float(np.mean(epoch_losses)) < stop_below_loss:
                stop = True
        if valid_records:
            vloss = evaluate_loss(valid_records, params, vocab, provider, train_config.batch_size)
            if not np.isfinite(vloss):
                raise TrainingError(f"validation loss became {vloss}; aborting")
            log.entries.append(LogEntry(step=step, split="valid", loss=vloss,
                                        wall_time=time.monotonic() - t0))
            if vloss < best_valid and out_dir is not None:
                best_valid = vloss
                save_checkpoint(params, out_dir / "best.ckpt")
        if stop:
            break
    if out_dir is not None:
        save_checkpoint(params, out_dir / "model.ckpt")
        log.write(out_dir)
    return params, log
