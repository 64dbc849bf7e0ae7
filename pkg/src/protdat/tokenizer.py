"""Amino-acid tokenization and pluggable text encoders.

Residues are tokenized one per character over the 25-letter extended
IUPAC alphabet, with four special ids (PAD, CLS, EOS, CROSS) sharing the
same vocabulary so cross-modality slots can be embedded through the
shared token table.

Text enters the model either as precomputed embedding matrices read from
a binary container file (mirroring an external biomedical encoder), or
through a small trainable word-embedding table built from the training
split.
"""

from __future__ import annotations

import json
import re
import warnings
from dataclasses import dataclass, field

import numpy as np

from .numerics import Tensor

RESIDUES = "ARNDCQEGHILKMFPSTWYVBZXUO"
MAX_TEXT_TOKENS = 512
MAX_SEQ_TOKENS = 1024

EMBED_FILE_MAGIC = "PROTDAT-EMB-1"


class TokenizerError(ValueError):
    pass


@dataclass(frozen=True)
class AminoVocabulary:
    """Per-residue vocabulary with PAD/CLS/EOS/CROSS special ids."""

    pad_id: int = 0
    cls_id: int = 1
    eos_id: int = 2
    cross_id: int = 3
    _to_id: dict[str, int] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        mapping = {ch: 4 + i for i, ch in enumerate(RESIDUES)}
        object.__setattr__(self, "_to_id", mapping)

    @property
    def size(self) -> int:
        return 4 + len(RESIDUES)

    @property
    def special_ids(self) -> frozenset[int]:
        return frozenset((self.pad_id, self.cls_id, self.eos_id, self.cross_id))

    def residue_id(self, ch: str) -> int:
        try:
            return self._to_id[ch]
        except KeyError:
            raise TokenizerError(f"unknown residue {ch!r}") from None

    def residue_of(self, token_id: int) -> str:
        if not (4 <= token_id < self.size):
            raise TokenizerError(f"id {token_id} is not a residue id")
        return RESIDUES[token_id - 4]

    def is_valid_sequence(self, seq: str) -> bool:
        return all(ch in self._to_id for ch in seq)

    def encode_sequence(self, seq: str, add_cls: bool = True, add_eos: bool = True) -> np.ndarray:
        """Encode a residue string, optionally bracketed by CLS/EOS."""
        ids = []
        if add_cls:
            ids.append(self.cls_id)
        for pos, ch in enumerate(seq):
            if ch not in self._to_id:
                raise TokenizerError(f"invalid residue {ch!r} at position {pos}")
            ids.append(self._to_id[ch])
        if add_eos:
            ids.append(self.eos_id)
        if len(ids) > MAX_SEQ_TOKENS:
            raise TokenizerError(
                f"sequence of {len(ids)} tokens exceeds the {MAX_SEQ_TOKENS}-token cap"
            )
        return np.asarray(ids, dtype=np.int64)

    def decode_sequence(self, ids) -> str:
        """Inverse of encode: strips specials, stops at the first EOS."""
        out = []
        for token_id in np.asarray(ids, dtype=np.int64).tolist():
            if token_id == self.eos_id:
                break
            if token_id in (self.pad_id, self.cls_id, self.cross_id):
                continue
            out.append(self.residue_of(token_id))
        return "".join(out)


@dataclass
class TextEncoding:
    """Encoded description text: one embedding row per token plus its mask."""

    embeddings: np.ndarray  # (m_tokens, d_text)
    mask: np.ndarray  # (m_tokens,) bool, True = real token
    word_ids: np.ndarray | None = None  # set by the trainable provider

    @property
    def n_tokens(self) -> int:
        return self.embeddings.shape[0]

    @property
    def d_text(self) -> int:
        return self.embeddings.shape[1]


_WORD_RE = re.compile(r"[a-z0-9]+")


def split_words(text: str) -> list[str]:
    """Lowercase and split on whitespace/punctuation."""
    return _WORD_RE.findall(text.lower())


class TrainableTextEncoder:
    """Word-level encoder with a learned embedding table (row 0 = shared UNK)."""

    def __init__(self, words: list[str], table: Tensor):
        if table.shape[0] != len(words) + 1:
            raise TokenizerError("embedding table must have one row per word plus UNK")
        self.words = list(words)
        self.table = table
        self.word_to_id = {w: i + 1 for i, w in enumerate(self.words)}

    @property
    def d_text(self) -> int:
        return self.table.shape[1]

    @staticmethod
    def build_vocabulary(texts: list[str]) -> list[str]:
        """Unique words of the training split, in first-seen order."""
        seen: dict[str, None] = {}
        for text in texts:
            for w in split_words(text):
                seen.setdefault(w, None)
        return list(seen)

    def tokenize(self, text: str) -> np.ndarray:
        words = split_words(text)
        if not words:
            raise TokenizerError("text produced no tokens")
        if len(words) > MAX_TEXT_TOKENS:
            warnings.warn(
                f"text of {len(words)} tokens truncated to {MAX_TEXT_TOKENS}",
                stacklevel=2,
            )
            words = words[:MAX_TEXT_TOKENS]
        return np.asarray([self.word_to_id.get(w, 0) for w in words], dtype=np.int64)

    def encode(self, text: str, record_id: str | None = None) -> TextEncoding:
        if not text:
            raise TokenizerError("empty text")
        ids = self.tokenize(text)
        return TextEncoding(
            embeddings=self.table.data[ids].copy(),
            mask=np.ones(len(ids), dtype=bool),
            word_ids=ids,
        )


class PrecomputedTextEncoder:
    """Reads per-record embedding matrices from an embedding container file."""

    def __init__(self, path):
        self.path = path
        with open(path, "rb") as fh:
            magic = fh.readline().decode("ascii").strip()
            if magic != EMBED_FILE_MAGIC:
                raise TokenizerError(f"not an embedding file (magic {magic!r})")
            manifest = json.loads(fh.readline().decode("utf-8"))
            self._blob_start = fh.tell()
        self.d_text = int(manifest["d_text"])
        self.records = manifest["records"]

    def encode(self, text: str, record_id: str | None = None) -> TextEncoding:
        if not text:
            raise TokenizerError("empty text")
        if record_id is None or record_id not in self.records:
            raise TokenizerError(f"no precomputed embedding for record {record_id!r}")
        meta = self.records[record_id]
        n = int(meta["tokens"])
        d = int(meta.get("d_text", self.d_text))
        if n > MAX_TEXT_TOKENS:
            warnings.warn(f"embedding of {n} tokens truncated to {MAX_TEXT_TOKENS}", stacklevel=2)
            n = MAX_TEXT_TOKENS
        with open(self.path, "rb") as fh:
            fh.seek(self._blob_start + int(meta["offset"]))
            raw = fh.read(4 * n * d)
        if len(raw) != 4 * n * d:
            raise TokenizerError(f"embedding file truncated for record {record_id!r}")
        emb = np.frombuffer(raw, dtype="<f4").reshape(n, d).astype(np.float64)
        return TextEncoding(embeddings=emb, mask=np.ones(n, dtype=bool))


def encode_text(text: str, provider, record_id: str | None = None) -> TextEncoding:
    """Encode description text through the given provider."""
    return provider.encode(text, record_id=record_id)


def write_embedding_file(path, entries: dict[str, np.ndarray]) -> None:
    """Write the precomputed-embedding container.

    Layout: magic line, one-line JSON manifest (record id -> offset into
    the blob, token count, d_text), then row-major little-endian float32
    blocks in manifest insertion order.
    """
    if not entries:
        raise TokenizerError("no embedding entries to write")
    d_text = next(iter(entries.values())).shape[1]
    manifest: dict = {"d_text": d_text, "records": {}}
    offset = 0
    blobs = []
    for rec_id, matrix in entries.items():
        matrix = np.asarray(matrix)
        if matrix.ndim != 2 or matrix.shape[1] != d_text:
            raise TokenizerError(f"entry {rec_id!r} must be (tokens, {d_text})")
        raw = matrix.astype("<f4").tobytes(order="C")
        manifest["records"][rec_id] = {
            "offset": offset,
            "tokens": int(matrix.shape[0]),
            "d_text": d_text,
        }
        blobs.append(raw)
        offset += len(raw)
    with open(path, "wb") as fh:
        fh.write((EMBED_FILE_MAGIC + "\n").encode("ascii"))
        fh.write((json.dumps(manifest, sort_keys=True) + "\n").encode("utf-8"))
        for raw in blobs:
            fh.write(raw)
