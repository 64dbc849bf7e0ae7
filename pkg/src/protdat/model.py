"""Text-conditioned decoder stack with fused three-branch attention.

Every decoder layer runs three coupled attention paths over a shared
multi-head kernel:

* text branch: self-attention over the description embedding,
* bottleneck branch: a fixed-length slot tensor querying the text keys
  and values, then projected into extra keys/values,
* sequence branch: causal attention over the concatenation of bottleneck
  keys/values and the sequence's own keys/values.

Wiring is pre-norm residual (x + block(norm(x))) per branch, with a
per-branch feedforward sublayer.  Rotary embeddings rotate text
queries/keys in the text branch and sequence queries plus sequence-region
keys in the sequence branch; bottleneck queries/keys stay unrotated (the
slots carry no positional semantics).

Only the sequence branch feeds the output head; the text and bottleneck
branches shape it through the concatenated attention.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numerics as nx
from .data import Batch
from .numerics import Tensor
from .tokenizer import PrecomputedTextEncoder, TrainableTextEncoder

CHECKPOINT_FORMAT = "protdat-ckpt-1"


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 768
    n_layers: int = 12
    n_heads: int = 12
    c_size: int = 50
    d_text: int = 768
    ffn_dim: int = 0  # 0 -> 4 * d_model
    max_text: int = 512
    max_seq: int = 1024
    vocab_size: int = 29
    text_provider: str = "trainable"
    dtype: str = "float32"

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ModelError("d_model must be divisible by n_heads")
        if (self.d_model // self.n_heads) % 2 != 0:
            raise ModelError("head dimension must be even for rotary embeddings")
        if self.ffn_dim and self.ffn_dim < self.d_model:
            raise ModelError("ffn_dim must be >= d_model")
        if self.c_size < 1:
            raise ModelError("c_size must be >= 1")
        if self.text_provider not in ("trainable", "precomputed"):
            raise ModelError(f"unknown text provider {self.text_provider!r}")
        if self.dtype not in ("float32", "float64"):
            raise ModelError(f"unsupported dtype {self.dtype!r}")

    @property
    def ffn(self) -> int:
        return self.ffn_dim or 4 * self.d_model

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class LinearParams:
    w: Tensor
    b: Tensor


@dataclass
class NormParams:
    gamma: Tensor
    beta: Tensor


@dataclass
class FfnParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


@dataclass
class DecoderLayerParams:
    ln_t: NormParams
    ln_c: NormParams
    ln_s: NormParams
    wq_t: LinearParams
    wk_t: LinearParams
    wv_t: LinearParams
    wo_t: LinearParams
    wq_c: LinearParams
    wo_c: LinearParams
    w_kc: LinearParams
    w_vc: LinearParams
    wq_s: LinearParams
    wk_s: LinearParams
    wv_s: LinearParams
    wo_s: LinearParams
    ln2_t: NormParams
    ln2_c: NormParams
    ln2_s: NormParams
    ffn_t: FfnParams
    ffn_c: FfnParams
    ffn_s: FfnParams


@dataclass
class ModelParams:
    config: ModelConfig
    token_embedding: Tensor  # (vocab_size, d_model), shared by sequence and slot ids
    text_projection: LinearParams | None  # None when d_text == d_model (identity)
    layers: list[DecoderLayerParams]
    head: LinearParams  # (d_model, vocab_size)
    text_words: list[str] | None = None
    text_word_embedding: Tensor | None = None  # (n_words + 1, d_text), row 0 = UNK

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out: list[tuple[str, Tensor]] = [("token_embedding", self.token_embedding)]
        if self.text_word_embedding is not None:
            out.append(("text_word_embedding", self.text_word_embedding))
        if self.text_projection is not None:
            out.append(("text_projection.w", self.text_projection.w))
            out.append(("text_projection.b", self.text_projection.b))
        for i, layer in enumerate(self.layers):
            prefix = f"layers.{i}"
            for fname in (
                "ln_t", "ln_c", "ln_s", "ln2_t", "ln2_c", "ln2_s",
            ):
                norm: NormParams = getattr(layer, fname)
                out.append((f"{prefix}.{fname}.gamma", norm.gamma))
                out.append((f"{prefix}.{fname}.beta", norm.beta))
            for fname in (
                "wq_t", "wk_t", "wv_t", "wo_t", "wq_c", "wo_c",
                "w_kc", "w_vc", "wq_s", "wk_s", "wv_s", "wo_s",
            ):
                lin: LinearParams = getattr(layer, fname)
                out.append((f"{prefix}.{fname}.w", lin.w))
                out.append((f"{prefix}.{fname}.b", lin.b))
            for fname in ("ffn_t", "ffn_c", "ffn_s"):
                ffn: FfnParams = getattr(layer, fname)
                out.append((f"{prefix}.{fname}.w1", ffn.w1))
                out.append((f"{prefix}.{fname}.b1", ffn.b1))
                out.append((f"{prefix}.{fname}.w2", ffn.w2))
                out.append((f"{prefix}.{fname}.b2", ffn.b2))
        out.append(("head.w", self.head.w))
        out.append(("head.b", self.head.b))
        return out

    def zero_grad(self) -> None:
        for _, p in self.named_parameters():
            p.zero_grad()

    def text_encoder(self, embedding_path=None):
        """The text provider matching this model's configuration."""
        if self.config.text_provider == "trainable":
            return TrainableTextEncoder(self.text_words or [], self.text_word_embedding)
        if embedding_path is None:
            raise ModelError("precomputed text provider needs an embedding file path")
        return PrecomputedTextEncoder(embedding_path)


def _param(rng: np.random.Generator, shape, dtype, kind: str) -> Tensor:
    if kind == "normal":
        data = rng.normal(0.0, 0.02, size=shape).astype(dtype)
    elif kind == "zeros":
        data = np.zeros(shape, dtype=dtype)
    elif kind == "ones":
        data = np.ones(shape, dtype=dtype)
    else:
        raise ValueError(kind)
    return Tensor(data, requires_grad=True)


def init_params(
    config: ModelConfig, seed: int = 0, text_words: list[str] | None = None
) -> ModelParams:
    """Fresh parameters: normal(0, 0.02) weights, zero biases, unit norms."""
    rng = np.random.default_rng(seed)
    dt = config.np_dtype
    d, f = config.d_model, config.ffn

    def lin(n_in, n_out):
        return LinearParams(w=_param(rng, (n_in, n_out), dt, "normal"), b=_param(rng, (n_out,), dt, "zeros"))

    def norm():
        return NormParams(gamma=_param(rng, (d,), dt, "ones"), beta=_param(rng, (d,), dt, "zeros"))

    def ffn():
        return FfnParams(
            w1=_param(rng, (d, f), dt, "normal"),
            b1=_param(rng, (f,), dt, "zeros"),
            w2=_param(rng, (f, d), dt, "normal"),
            b2=_param(rng, (d,), dt, "zeros"),
        )

    token_embedding = _param(rng, (config.vocab_size, d), dt, "normal")
    text_projection = None if config.d_text == d else lin(config.d_text, d)
    layers = []
    for _ in range(config.n_layers):
        layers.append(
            DecoderLayerParams(
                ln_t=norm(), ln_c=norm(), ln_s=norm(),
                wq_t=lin(d, d), wk_t=lin(d, d), wv_t=lin(d, d), wo_t=lin(d, d),
                wq_c=lin(d, d), wo_c=lin(d, d),
                w_kc=lin(d, d), w_vc=lin(d, d),
                wq_s=lin(d, d), wk_s=lin(d, d), wv_s=lin(d, d), wo_s=lin(d, d),
                ln2_t=norm(), ln2_c=norm(), ln2_s=norm(),
                ffn_t=ffn(), ffn_c=ffn(), ffn_s=ffn(),
            )
        )
    head = lin(d, config.vocab_size)
    text_word_embedding = None
    if config.text_provider == "trainable":
        if text_words is None:
            raise ModelError("trainable text provider needs the training-split word list")
        text_word_embedding = _param(rng, (len(text_words) + 1, config.d_text), dt, "normal")
    return ModelParams(
        config=config,
        token_embedding=token_embedding,
        text_projection=text_projection,
        layers=layers,
        head=head,
        text_words=list(text_words) if text_words is not None else None,
        text_word_embedding=text_word_embedding,
    )


def count_parameters(params: ModelParams) -> int:
    return sum(int(p.data.size) for _, p in params.named_parameters())


@dataclass
class AttentionTrace:
    """Per-layer head-averaged attention weights of a single-record forward."""

    ptm: list[np.ndarray] = field(default_factory=list)  # (T, T)
    cim: list[np.ndarray] = field(default_factory=list)  # (c_size, T)
    cca: list[np.ndarray] = field(default_factory=list)  # (S, c_size + S)


def _apply_linear(x: Tensor, lin: LinearParams) -> Tensor:
    return nx.linear(x, lin.w, lin.b)


def _apply_norm(x: Tensor, norm: NormParams) -> Tensor:
    return nx.layer_norm(x, norm.gamma, norm.beta)


def _apply_ffn(x: Tensor, ffn: FfnParams) -> Tensor:
    return nx.linear(nx.gelu(nx.linear(x, ffn.w1, ffn.b1)), ffn.w2, ffn.b2)


@dataclass(frozen=True)
class MaskSet:
    ptm: np.ndarray
    cim: np.ndarray
    psm: np.ndarray

    @classmethod
    def from_batch(cls, batch: Batch) -> "MaskSet":
        return cls(ptm=batch.ptm_mask, cim=batch.cim_mask, psm=batch.psm_mask)


def mcm_forward(
    e_s: Tensor,
    e_c: Tensor,
    e_t: Tensor,
    masks: MaskSet,
    layer: DecoderLayerParams,
    config: ModelConfig,
    trace: bool = False,
):
    """The fused attention block on pre-normalized branch inputs.

    Returns pre-residual branch outputs (sequence, slots, text) and,
    when tracing, the per-branch attention weights (head axis intact).
    """
    h = config.n_heads
    hd = config.head_dim
    t_len = e_t.shape[-2]
    s_len = e_s.shape[-2]
    if e_c.shape[-2] != config.c_size:
        raise ModelError(f"slot tensor has {e_c.shape[-2]} rows, expected {config.c_size}")
    text_pos = np.arange(t_len)
    seq_pos = np.arange(s_len)

    # text branch: rotary self-attention
    q_t = _apply_linear(e_t, layer.wq_t)
    k_t = _apply_linear(e_t, layer.wk_t)
    v_t = _apply_linear(e_t, layer.wv_t)
    ptm_raw, ptm_w = nx.masked_attention(
        nx.rope_rotate(q_t, text_pos, hd), nx.rope_rotate(k_t, text_pos, hd), v_t, masks.ptm, h
    )
    t_out = _apply_linear(ptm_raw, layer.wo_t)

    # bottleneck branch: slot queries against unrotated text keys/values
    q_c = _apply_linear(e_c, layer.wq_c)
    cim_raw, cim_w = nx.masked_attention(q_c, k_t, v_t, masks.cim, h)
    c_out = _apply_linear(cim_raw, layer.wo_c)

    # sequence branch: causal attention over [slot keys | rotated sequence keys]
    k_c = _apply_linear(c_out, layer.w_kc)
    v_c = _apply_linear(c_out, layer.w_vc)
    q_s = _apply_linear(e_s, layer.wq_s)
    k_s = _apply_linear(e_s, layer.wk_s)
    v_s = _apply_linear(e_s, layer.wv_s)
    k_cat = nx.concat([k_c, nx.rope_rotate(k_s, seq_pos, hd)], axis=-2)
    v_cat = nx.concat([v_c, v_s], axis=-2)
    psm_raw, cca_w = nx.masked_attention(
        nx.rope_rotate(q_s, seq_pos, hd), k_cat, v_cat, masks.psm, h
    )
    s_out = _apply_linear(psm_raw, layer.wo_s)

    weights = (ptm_w, cim_w, cca_w) if trace else None
    return s_out, c_out, t_out, weights


def decoder_layer_forward(
    e_s: Tensor,
    e_c: Tensor,
    e_t: Tensor,
    masks: MaskSet,
    layer: DecoderLayerParams,
    config: ModelConfig,
    trace: bool = False,
):
    """Pre-norm residual wrapper: x + MCM(norm(x)), then x + FFN(norm(x))."""
    s_n = _apply_norm(e_s, layer.ln_s)
    c_n = _apply_norm(e_c, layer.ln_c)
    t_n = _apply_norm(e_t, layer.ln_t)
    ds, dc, dt_, weights = mcm_forward(s_n, c_n, t_n, masks, layer, config, trace)
    e_s = nx.add(e_s, ds)
    e_c = nx.add(e_c, dc)
    e_t = nx.add(e_t, dt_)
    e_s = nx.add(e_s, _apply_ffn(_apply_norm(e_s, layer.ln2_s), layer.ffn_s))
    e_c = nx.add(e_c, _apply_ffn(_apply_norm(e_c, layer.ln2_c), layer.ffn_c))
    e_t = nx.add(e_t, _apply_ffn(_apply_norm(e_t, layer.ln2_t), layer.ffn_t))
    return e_s, e_c, e_t, weights


def model_forward(batch: Batch, params: ModelParams, trace: bool = False):
    """Full forward pass: (B, S, vocab) logits, optionally an attention trace.

    Logits at position t depend only on sequence tokens <= t, the full
    text encoding and the slot tensor; the head emits raw logits.
    """
    config = params.config
    if batch.seq_len > config.max_seq:
        raise ModelError(f"sequence length {batch.seq_len} exceeds max_seq {config.max_seq}")
    if batch.text_len > config.max_text:
        raise ModelError(f"text length {batch.text_len} exceeds max_text {config.max_text}")
    if trace and batch.size != 1:
        raise ModelError("attention tracing expects a single-record batch")
    dt = config.np_dtype

    e_s = nx.embedding(params.token_embedding, batch.seq_ids)
    e_c = nx.embedding(params.token_embedding, batch.cross_ids)
    if batch.text_ids is not None:
        if params.text_word_embedding is None:
            raise ModelError("batch carries text ids but the model has no word table")
        e_t = nx.embedding(params.text_word_embedding, batch.text_ids)
        # zero padded rows so they stay inert even as values
        e_t = nx.mul(e_t, batch.text_mask[..., None].astype(dt))
    else:
        if batch.text_embed is None:
            raise ModelError("batch carries neither text ids nor text embeddings")
        e_t = Tensor(batch.text_embed.astype(dt))
    if params.text_projection is not None:
        e_t = _apply_linear(e_t, params.text_projection)

    masks = MaskSet.from_batch(batch)
    collected = AttentionTrace() if trace else None
    for layer in params.layers:
        e_s, e_c, e_t, weights = decoder_layer_forward(e_s, e_c, e_t, masks, layer, config, trace)
        if trace:
            ptm_w, cim_w, cca_w = weights
            collected.ptm.append(ptm_w.mean(axis=-3)[0])
            collected.cim.append(cim_w.mean(axis=-3)[0])
            collected.cca.append(cca_w.mean(axis=-3)[0])
    logits = _apply_linear(e_s, params.head)
    return logits, collected


# -- persistence -------------------------------------------------------------


def save_checkpoint(params: ModelParams, path) -> None:
    """Write a checkpoint: format line, JSON manifest, float32 LE blocks."""
    named = params.named_parameters()
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "config": params.config.to_dict(),
        "tensors": [{"name": name, "shape": list(p.shape)} for name, p in named],
        "text_words": params.text_words,
    }
    with open(path, "wb") as fh:
        fh.write((CHECKPOINT_FORMAT + "\n").encode("ascii"))
        fh.write((json.dumps(manifest, sort_keys=True) + "\n").encode("utf-8"))
        for _, p in named:
            fh.write(p.data.astype("<f4").tobytes(order="C"))


def load_checkpoint(path) -> ModelParams:
    """Rebuild a model from a checkpoint, rejecting version/shape mismatches."""
    with open(path, "rb") as fh:
        magic = fh.readline().decode("ascii", errors="replace").strip()
        if magic != CHECKPOINT_FORMAT:
            raise ModelError(f"checkpoint format {magic!r} != {CHECKPOINT_FORMAT!r}")
        manifest = json.loads(fh.readline().decode("utf-8"))
        blob = fh.read()
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise ModelError("manifest format mismatch")
    config = ModelConfig.from_dict(manifest["config"])
    params = init_params(config, seed=0, text_words=manifest.get("text_words"))
    named = params.named_parameters()
    expected = [{"name": name, "shape": list(p.shape)} for name, p in named]
    if expected != manifest["tensors"]:
        raise ModelError("checkpoint tensor directory does not match the config")
    total = sum(int(np.prod(t["shape"])) for t in manifest["tensors"])
    if len(blob) != 4 * total:
        raise ModelError(
            f"checkpoint blob has {len(blob)} bytes, expected {4 * total} (corrupt file?)"
        )
    offset = 0
    dt = config.np_dtype
    for _, p in named:
        n = int(p.data.size)
        block = np.frombuffer(blob, dtype="<f4", count=n, offset=offset)
        p.data = block.reshape(p.shape).astype(dt)
        offset += 4 * n
    return params
