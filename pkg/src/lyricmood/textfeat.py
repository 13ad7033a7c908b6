"""Lyric text normalization and subword n-gram vector representations.

A lyric is represented by the arithmetic mean of the embeddings of all its
subword units: for each token, the whole token plus every character n-gram
of the angle-bracket-wrapped token. Out-of-vocabulary units fall into hashed
buckets, so lookups never fail. Sentence-level contextual vectors of a
declared dimension (1024 or 768) can be loaded from files instead.
"""

from __future__ import annotations

import io
import unicodedata
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import ValidationError

DEFAULT_DIMENSION = 300
DEFAULT_NGRAM_RANGE = (3, 6)
# Practical default; the fastText reference implementation uses 2_000_000,
# which is available by passing bucket_count explicitly.
DEFAULT_BUCKETS = 50_000


def normalize(text: str) -> list[str]:
    """Lowercase, NFKC-normalize, map punctuation to spaces, and split."""
    text = unicodedata.normalize("NFKC", text).lower()
    cleaned = "".join(c if c.isalnum() else " " for c in text)
    return cleaned.split()


def subwords(token: str, n_min: int = 3, n_max: int = 6) -> list[str]:
    """The token itself plus every n-gram of ``<token>`` for n in [n_min, n_max]."""
    if not token:
        raise ValueError("cannot compute subwords of an empty token")
    wrapped = f"<{token}>"
    units = [token]
    for n in range(n_min, n_max + 1):
        units.extend(wrapped[i : i + n] for i in range(len(wrapped) - n + 1))
    return units


_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_U64 = 0xFFFFFFFFFFFFFFFF


def hash_bucket(subword: str, buckets: int) -> int:
    """FNV-1a 64-bit hash of the UTF-8 bytes, modulo ``buckets``.

    Stable across runs and platforms.
    """
    if buckets <= 0:
        raise ValueError(f"bucket count must be positive, got {buckets}")
    h = _FNV_OFFSET
    for byte in subword.encode("utf-8"):
        h ^= byte
        h = (h * _FNV_PRIME) & _U64
    return h % buckets


@dataclass
class EmbeddingTable:
    """Subword-unit vector store: vocabulary rows followed by hashed buckets.

    ``vectors`` has ``len(word_vocab) + bucket_count`` rows of ``dimension``
    components. Vocabulary units resolve to their row; everything else hashes
    into a bucket, so any unit has a vector.
    """

    dimension: int
    bucket_count: int
    word_vocab: dict[str, int]
    vectors: np.ndarray
    ngram_range: tuple[int, int] = DEFAULT_NGRAM_RANGE

    def __post_init__(self):
        expected = (len(self.word_vocab) + self.bucket_count, self.dimension)
        if self.vectors.shape != expected:
            raise ValueError(f"vectors shape {self.vectors.shape} != {expected}")

    @classmethod
    def create(
        cls,
        vocab: Sequence[str] = (),
        dimension: int = DEFAULT_DIMENSION,
        bucket_count: int = DEFAULT_BUCKETS,
        ngram_range: tuple[int, int] = DEFAULT_NGRAM_RANGE,
        seed: int = 0,
    ) -> "EmbeddingTable":
        """Randomly initialized table (uniform in ±0.5/dimension)."""
        rng = np.random.default_rng(seed)
        n_rows = len(vocab) + bucket_count
        scale = 0.5 / dimension
        vectors = rng.uniform(-scale, scale, size=(n_rows, dimension))
        return cls(
            dimension=dimension,
            bucket_count=bucket_count,
            word_vocab={tok: i for i, tok in enumerate(vocab)},
            vectors=vectors,
            ngram_range=ngram_range,
        )

    @property
    def vocab_size(self) -> int:
        return len(self.word_vocab)

    def row_index(self, unit: str) -> int:
        idx = self.word_vocab.get(unit)
        if idx is not None:
            return idx
        return self.vocab_size + hash_bucket(unit, self.bucket_count)

    def unit_indices(self, text: str) -> list[int]:
        """Row indices of every subword unit of every token in ``text``."""
        n_min, n_max = self.ngram_range
        indices: list[int] = []
        for token in normalize(text):
            indices.extend(self.row_index(u) for u in subwords(token, n_min, n_max))
        return indices


@dataclass(frozen=True)
class TextFeature:
    """Fixed-size averaged representation of one lyric."""

    vector: np.ndarray
    subword_count: int


def embed_text(text: str, table: EmbeddingTable) -> TextFeature:
    """Mean of the vectors of all subword units; empty text gives a zero vector."""
    indices = table.unit_indices(text)
    if not indices:
        return TextFeature(np.zeros(table.dimension), 0)
    return TextFeature(table.vectors[indices].mean(axis=0), len(indices))


def _decode(source) -> str:
    if isinstance(source, bytes):
        return source.decode("utf-8")
    if isinstance(source, str):
        return source
    data = source.read()
    return data.decode("utf-8") if isinstance(data, bytes) else data


def save_embeddings(table: EmbeddingTable) -> str:
    """Text-vec serialization: ``count dim`` header, one token line per vocab
    row, then a ``#buckets B`` section with the bucket rows."""
    ordered = sorted(table.word_vocab.items(), key=lambda kv: kv[1])
    lines = [f"{table.vocab_size} {table.dimension}"]
    for token, idx in ordered:
        lines.append(token + " " + " ".join(repr(v) for v in table.vectors[idx]))
    lines.append(f"#buckets {table.bucket_count}")
    for i in range(table.bucket_count):
        row = table.vectors[table.vocab_size + i]
        lines.append(" ".join(repr(v) for v in row))
    return "\n".join(lines) + "\n"


def load_embeddings(
    source,
    bucket_count: int = DEFAULT_BUCKETS,
    ngram_range: tuple[int, int] = DEFAULT_NGRAM_RANGE,
) -> EmbeddingTable:
    """Load a text-vec file; bucket rows are zero unless a bucket section exists."""
    lines = _decode(source).splitlines()
    if not lines or not lines[0].strip():
        raise ValidationError("missing 'count dim' header", line=1)
    parts = lines[0].split()
    if len(parts) != 2:
        raise ValidationError(f"expected 'count dim' header, got {lines[0]!r}", line=1)
    try:
        count, dim = int(parts[0]), int(parts[1])
    except ValueError:
        raise ValidationError(f"expected 'count dim' header, got {lines[0]!r}", line=1) from None
    if count < 0 or dim <= 0:
        raise ValidationError(f"invalid header values {count} {dim}", line=1)

    vocab: dict[str, int] = {}
    vocab_rows = np.zeros((count, dim))
    lineno = 1
    for i in range(count):
        lineno = 2 + i
        if lineno > len(lines):
            raise ValidationError("unexpected end of file", line=lineno)
        fields = lines[lineno - 1].split()
        if len(fields) != dim + 1:
            raise ValidationError(
                f"expected token plus {dim} values, got {len(fields)} fields", line=lineno
            )
        token = fields[0]
        if token in vocab:
            raise ValidationError(f"duplicate token {token!r}", line=lineno)
        try:
            vocab_rows[i] = [float(v) for v in fields[1:]]
        except ValueError as exc:
            raise ValidationError(str(exc), line=lineno) from None
        vocab[token] = i

    buckets = bucket_count
    bucket_rows = None
    rest = lines[lineno:] if count else lines[1:]
    rest_start = lineno + 1 if count else 2
    nonempty = [(rest_start + j, ln) for j, ln in enumerate(rest) if ln.strip()]
    if nonempty:
        first_no, first = nonempty[0]
        head = first.split()
        if len(head) != 2 or head[0] != "#buckets":
            raise ValidationError(f"expected '#buckets B' section, got {first!r}", line=first_no)
        buckets = int(head[1])
        bucket_rows = np.zeros((buckets, dim))
        if len(nonempty) - 1 != buckets:
            raise ValidationError(
                f"bucket section declares {buckets} rows, found {len(nonempty) - 1}",
                line=first_no,
            )
        for i, (no, ln) in enumerate(nonempty[1:]):
            fields = ln.split()
            if len(fields) != dim:
                raise ValidationError(
                    f"expected {dim} values, got {len(fields)}", line=no
                )
            bucket_rows[i] = [float(v) for v in fields]
    if bucket_rows is None:
        bucket_rows = np.zeros((buckets, dim))
    return EmbeddingTable(
        dimension=dim,
        bucket_count=buckets,
        word_vocab=vocab,
        vectors=np.vstack([vocab_rows, bucket_rows]) if count else bucket_rows.copy(),
        ngram_range=ngram_range,
    )


@dataclass
class ContextualEmbeddingFile:
    """Per-row precomputed sentence vectors of one uniform dimension."""

    dimension: int | None = None
    vectors: dict[int, np.ndarray] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.vectors)

    def __getitem__(self, row_id: int) -> np.ndarray:
        return self.vectors[row_id]


def load_contextual(source) -> ContextualEmbeddingFile:
    """Load ``id dim v1 ... v_dim`` records; ids unique, dimension uniform."""
    out = ContextualEmbeddingFile()
    for lineno, line in enumerate(_decode(source).splitlines(), start=1):
        if not line.strip():
            continue
        fields = line.split()
        if len(fields) < 2:
            raise ValidationError("expected 'id dim v...' record", line=lineno)
        try:
            row_id, dim = int(fields[0]), int(fields[1])
        except ValueError as exc:
            raise ValidationError(str(exc), line=lineno) from None
        if len(fields) - 2 != dim:
            raise ValidationError(
                f"record declares {dim} values, found {len(fields) - 2}", line=lineno
            )
        if out.dimension is None:
            out.dimension = dim
        elif dim != out.dimension:
            raise ValidationError(
                f"dimension {dim} differs from file dimension {out.dimension}", line=lineno
            )
        if row_id in out.vectors:
            raise ValidationError(f"duplicate id {row_id}", line=lineno)
        out.vectors[row_id] = np.array([float(v) for v in fields[2:]])
    return out


def save_contextual(vectors: dict[int, np.ndarray]) -> str:
    lines = []
    for row_id in sorted(vectors):
        vec = np.asarray(vectors[row_id], dtype=np.float64)
        lines.append(f"{row_id} {vec.size} " + " ".join(repr(v) for v in vec))
    return "\n".join(lines) + ("\n" if lines else "")


def load_contextual_sequences(source) -> dict[int, np.ndarray]:
    """Load per-token sequences: ``id token_index dim v...`` records.

    Token indices per id must form 0..T-1; returns id -> [T, dim] arrays.
    """
    records: dict[int, dict[int, np.ndarray]] = {}
    dim_seen: int | None = None
    for lineno, line in enumerate(_decode(source).splitlines(), start=1):
        if not line.strip():
            continue
        fields = line.split()
        if len(fields) < 3:
            raise ValidationError("expected 'id token_index dim v...' record", line=lineno)
        try:
            row_id, tok, dim = int(fields[0]), int(fields[1]), int(fields[2])
        except ValueError as exc:
            raise ValidationError(str(exc), line=lineno) from None
        if len(fields) - 3 != dim:
            raise ValidationError(
                f"record declares {dim} values, found {len(fields) - 3}", line=lineno
            )
        if dim_seen is None:
            dim_seen = dim
        elif dim != dim_seen:
            raise ValidationError(
                f"dimension {dim} differs from file dimension {dim_seen}", line=lineno
            )
        per_id = records.setdefault(row_id, {})
        if tok in per_id:
            raise ValidationError(f"duplicate token index {tok} for id {row_id}", line=lineno)
        per_id[tok] = np.array([float(v) for v in fields[3:]])
    out: dict[int, np.ndarray] = {}
    for row_id, toks in records.items():
        if sorted(toks) != list(range(len(toks))):
            raise ValidationError(
                f"token indices for id {row_id} are not contiguous from 0"
            )
        out[row_id] = np.stack([toks[i] for i in range(len(toks))])
    return out


def save_contextual_sequences(sequences: dict[int, np.ndarray]) -> str:
    lines = []
    for row_id in sorted(sequences):
        seq = np.asarray(sequences[row_id], dtype=np.float64)
        for t in range(seq.shape[0]):
            lines.append(
                f"{row_id} {t} {seq.shape[1]} " + " ".join(repr(v) for v in seq[t])
            )
    return "\n".join(lines) + ("\n" if lines else "")
