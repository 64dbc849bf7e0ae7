"""Dataset ingestion, validation, splitting and batch assembly.

The canonical serialization is jsonl with ``id``/``text``/``sequence``
fields; a 2-column tab-separated import (sequence, description) is also
accepted.  Descriptions must carry at least one of the FUNCTION /
SUBCELLULAR LOCATION / SIMILARITY section headers.

Batch assembly pads to per-batch maxima and builds the three attention
masks used by the fused decoder layers:

* text self-attention mask (T, T): real text tokens visible as keys,
* bottleneck cross-attention mask (c_size, T): same key visibility,
* sequence mask (S, c_size + S): the first c_size key columns are always
  visible, the remaining columns are causal (k <= q) and exclude PAD.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tokenizer import AminoVocabulary, MAX_SEQ_TOKENS, MAX_TEXT_TOKENS, TokenizerError

SECTION_HEADERS = ("FUNCTION", "SUBCELLULAR LOCATION", "SIMILARITY")


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class ProteinRecord:
    id: str
    text: str
    sequence: str

    def validate(self, vocab: AminoVocabulary) -> None:
        if not self.sequence:
            raise DatasetError(f"record {self.id!r}: empty sequence")
        for pos, ch in enumerate(self.sequence):
            if not vocab.is_valid_sequence(ch):
                raise DatasetError(
                    f"record {self.id!r}: invalid residue {ch!r} at position {pos}"
                )
        if len(self.sequence) + 2 > MAX_SEQ_TOKENS:
            raise DatasetError(
                f"record {self.id!r}: sequence exceeds {MAX_SEQ_TOKENS - 2} residues"
            )
        if not any(h in self.text for h in SECTION_HEADERS):
            raise DatasetError(
                f"record {self.id!r}: text lacks all of {', '.join(SECTION_HEADERS)}"
            )


@dataclass
class LoadReport:
    records: list[ProteinRecord]
    errors: list[str]
    total_rows: int

    @property
    def error_text(self) -> str:
        return "\n".join(self.errors)


def _parse_jsonl_row(line: str) -> ProteinRecord:
    row = json.loads(line)
    missing = [k for k in ("id", "text", "sequence") if k not in row]
    if missing:
        raise DatasetError(f"missing fields: {', '.join(missing)}")
    return ProteinRecord(id=str(row["id"]), text=str(row["text"]), sequence=str(row["sequence"]))


def _parse_table_row(line: str, line_no: int) -> ProteinRecord:
    parts = line.split("\t")
    if len(parts) != 2:
        raise DatasetError(f"expected 2 tab-separated columns, got {len(parts)}")
    sequence, text = parts[0].strip(), parts[1].strip()
    return ProteinRecord(id=f"row-{line_no:06d}", text=text, sequence=sequence)


def read_dataset(path, fmt: str = "jsonl", vocab: AminoVocabulary | None = None) -> LoadReport:
    """Parse and validate every row; keep order; collect line-addressed errors."""
    if fmt not in ("jsonl", "table"):
        raise DatasetError(f"unknown dataset format {fmt!r}")
    vocab = vocab or AminoVocabulary()
    records: list[ProteinRecord] = []
    errors: list[str] = []
    total = 0
    for line_no, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        total += 1
        try:
            rec = _parse_jsonl_row(line) if fmt == "jsonl" else _parse_table_row(line, line_no)
            rec.validate(vocab)
        except (DatasetError, TokenizerError, json.JSONDecodeError) as exc:
            errors.append(f"line {line_no}: {exc}")
            continue
        records.append(rec)
    return LoadReport(records=records, errors=errors, total_rows=total)


def load_records(path, fmt: str = "jsonl", vocab: AminoVocabulary | None = None) -> list[ProteinRecord]:
    """Load a dataset file, rejecting it outright when >10% of rows are invalid."""
    report = read_dataset(path, fmt, vocab)
    if report.total_rows == 0:
        raise DatasetError(f"{path}: no rows")
    if len(report.errors) > 0.10 * report.total_rows:
        raise DatasetError(
            f"{path}: {len(report.errors)}/{report.total_rows} invalid rows\n"
            + report.error_text
        )
    return report.records


def write_jsonl(path, records: list[ProteinRecord]) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps({"id": rec.id, "text": rec.text, "sequence": rec.sequence}) + "\n")


@dataclass(frozen=True)
class SplitSpec:
    """Three-way split by counts or fractions, shuffled by ``seed``."""

    train: float
    valid: float
    test: float
    seed: int = 0

    def counts(self, n: int) -> tuple[int, int, int]:
        """Values with a fractional part are fractions (must sum to 1); otherwise counts."""
        parts = (self.train, self.valid, self.test)
        if any(isinstance(p, float) and 0 < p < 1 for p in parts):
            if abs(sum(parts) - 1.0) > 1e-9:
                raise DatasetError("split fractions must sum to 1")
            n_train = int(round(self.train * n))
            n_valid = int(round(self.valid * n))
            return n_train, n_valid, n - n_train - n_valid
        counts = (int(self.train), int(self.valid), int(self.test))
        if sum(counts) > n:
            raise DatasetError(f"split counts {counts} exceed {n} records")
        return counts


def split_records(
    records: list[ProteinRecord], spec: SplitSpec
) -> tuple[list[ProteinRecord], list[ProteinRecord], list[ProteinRecord]]:
    """Deterministic disjoint train/valid/test partition under ``spec.seed``.

    When explicit counts sum to less than the record count, the leftover
    tail of the shuffled order is dropped.
    """
    n_train, n_valid, n_test = spec.counts(len(records))
    order = np.random.default_rng(spec.seed).permutation(len(records))
    shuffled = [records[i] for i in order]
    train = shuffled[:n_train]
    valid = shuffled[n_train : n_train + n_valid]
    test = shuffled[n_train + n_valid : n_train + n_valid + n_test]
    return train, valid, test


@dataclass
class Batch:
    """Padded model input plus the three attention masks.

    ``seq_ids`` rows are [CLS, residues..., EOS, PAD...].  Exactly one of
    ``text_embed`` (frozen provider) and ``text_ids`` (trainable provider)
    is set.  Mask arrays are boolean with True = visible.
    """

    record_ids: list[str]
    seq_ids: np.ndarray  # (B, S) int64
    text_mask: np.ndarray  # (B, T) bool
    cross_ids: np.ndarray  # (B, c_size) int64
    ptm_mask: np.ndarray  # (B, T, T)
    cim_mask: np.ndarray  # (B, c_size, T)
    psm_mask: np.ndarray  # (B, S, c_size + S)
    pad_id: int
    text_embed: np.ndarray | None = None  # (B, T, d_text)
    text_ids: np.ndarray | None = None  # (B, T) int64, 0 where padded

    @property
    def size(self) -> int:
        return self.seq_ids.shape[0]

    @property
    def seq_len(self) -> int:
        return self.seq_ids.shape[1]

    @property
    def text_len(self) -> int:
        return self.text_mask.shape[1]

    @property
    def c_size(self) -> int:
        return self.cross_ids.shape[1]

    def targets(self) -> np.ndarray:
        """Next-token targets: seq_ids shifted one step left, PAD at the end."""
        tgt = np.full_like(self.seq_ids, self.pad_id)
        tgt[:, :-1] = self.seq_ids[:, 1:]
        return tgt


def build_masks(
    seq_ids: np.ndarray, text_mask: np.ndarray, c_size: int, pad_id: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """The three per-record visibility masks from padded ids."""
    b, s = seq_ids.shape
    t = text_mask.shape[1]
    ptm = np.broadcast_to(text_mask[:, None, :], (b, t, t)).copy()
    cim = np.broadcast_to(text_mask[:, None, :], (b, c_size, t)).copy()
    psm = np.zeros((b, s, c_size + s), dtype=bool)
    psm[:, :, :c_size] = True
    causal = np.tril(np.ones((s, s), dtype=bool))
    key_ok = seq_ids != pad_id
    psm[:, :, c_size:] = causal[None, :, :] & key_ok[:, None, :]
    return ptm, cim, psm


def make_batch(
    records: list[ProteinRecord],
    vocab: AminoVocabulary,
    text_provider,
    c_size: int,
    dtype=np.float32,
    pad_seq_to: int | None = None,
    pad_text_to: int | None = None,
) -> Batch:
    """Encode, pad and mask a list of records into one model input.

    The cross-modality slot ids are freshly assembled for every batch
    (re-embedded from the shared table at forward time, no state carried
    between batches).
    """
    if not records:
        raise DatasetError("make_batch: empty record list")
    if c_size < 1:
        raise DatasetError("make_batch: c_size must be >= 1")
    encoded = [vocab.encode_sequence(r.sequence, add_cls=True, add_eos=True) for r in records]
    texts = [text_provider.encode(r.text, record_id=r.id) for r in records]

    b = len(records)
    s_max = max(len(e) for e in encoded)
    t_max = max(te.n_tokens for te in texts)
    if pad_seq_to is not None:
        s_max = max(s_max, pad_seq_to)
    if pad_text_to is not None:
        t_max = max(t_max, pad_text_to)
    if t_max > MAX_TEXT_TOKENS:
        raise DatasetError(f"text length {t_max} exceeds the {MAX_TEXT_TOKENS}-token cap")

    seq_ids = np.full((b, s_max), vocab.pad_id, dtype=np.int64)
    for i, ids in enumerate(encoded):
        seq_ids[i, : len(ids)] = ids

    text_mask = np.zeros((b, t_max), dtype=bool)
    for i, te in enumerate(texts):
        text_mask[i, : te.n_tokens] = te.mask

    trainable = all(te.word_ids is not None for te in texts)
    text_embed = None
    text_ids = None
    if trainable:
        text_ids = np.zeros((b, t_max), dtype=np.int64)
        for i, te in enumerate(texts):
            text_ids[i, : te.n_tokens] = te.word_ids
    else:
        d_text = texts[0].d_text
        text_embed = np.zeros((b, t_max, d_text), dtype=dtype)
        for i, te in enumerate(texts):
            text_embed[i, : te.n_tokens, :] = te.embeddings.astype(dtype)

    cross_ids = np.full((b, c_size), vocab.cross_id, dtype=np.int64)
    ptm, cim, psm = build_masks(seq_ids, text_mask, c_size, vocab.pad_id)
    return Batch(
        record_ids=[r.id for r in records],
        seq_ids=seq_ids,
        text_mask=text_mask,
        cross_ids=cross_ids,
        ptm_mask=ptm,
        cim_mask=cim,
        psm_mask=psm,
        pad_id=vocab.pad_id,
        text_embed=text_embed,
        text_ids=text_ids,
    )


def batches_of(records: list[ProteinRecord], batch_size: int, rng: np.random.Generator):
    """Seeded shuffle then sequential chunking (no length bucketing)."""
    order = rng.permutation(len(records))
    for start in range(0, len(records), batch_size):
        yield [records[i] for i in order[start : start + batch_size]]


_TOY_VERBS = ("Catalyzes", "Mediates", "Regulates", "Transports", "Binds", "Cleaves")
_TOY_SUBSTRATES = (
    "quinate", "shikimate", "malonyl", "biotin", "chorismate",
    "citrate", "glutamate", "pyruvate", "fumarate", "oxalate",
)
_TOY_LOCATIONS = ("Cytoplasm", "Membrane", "Secreted", "Nucleus", "Periplasm")
_TOY_FAMILIES = ("AccA", "MGF", "EspC", "DHQase", "KinB", "LigT", "PortA", "SynQ")
_TOY_RESIDUES = "ARNDCQEGHILKMFPSTWYV"


def synthetic_records(
    n: int, seed: int = 0, min_len: int = 16, max_len: int = 64
) -> list[ProteinRecord]:
    """A deterministic toy corpus of annotation-style texts and random sequences.

    Texts share a small template vocabulary but carry a distinguishing
    index token, so models can learn a text->sequence binding at desk
    scale.
    """
    rng = np.random.default_rng(seed)
    records = []
    for i in range(n):
        verb = _TOY_VERBS[int(rng.integers(len(_TOY_VERBS)))]
        substrate = _TOY_SUBSTRATES[int(rng.integers(len(_TOY_SUBSTRATES)))]
        loc = _TOY_LOCATIONS[int(rng.integers(len(_TOY_LOCATIONS)))]
        fam = _TOY_FAMILIES[int(rng.integers(len(_TOY_FAMILIES)))]
        text = (
            f"FUNCTION: {verb} the {substrate} pathway step {i}. "
            f"SUBCELLULAR LOCATION: {loc}. "
            f"SIMILARITY: Belongs to the {fam} {i} family."
        )
        length = int(rng.integers(min_len, max_len + 1))
        seq = "".join(_TOY_RESIDUES[j] for j in rng.integers(0, len(_TOY_RESIDUES), length))
        records.append(ProteinRecord(id=f"toy-{i:04d}", text=text, sequence=seq))
    return records
