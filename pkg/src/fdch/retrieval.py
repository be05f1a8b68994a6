"""Query encoding, bit-packed code index and Hamming-space evaluation.

Code matrices are k x m with entries in {-1, +1}.  Packed form stores each
code in ceil(k / 64) uint64 words: bit j lives at ``(word[j // 64] >> (j % 64)) & 1``
and bit value 1 means +1.  Unused high bits of the last word are zero.
"""

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from . import container
from .container import Reader
from .errors import EvaluationError, FormatError, ShapeError
from .network import forward

MODALITIES = ("unified", "image", "text")
_SHIFTS = np.arange(64, dtype=np.uint64)


def n_words(k):
    return (k + 63) // 64


def pack_codes(codes):
    """k x m sign matrix -> (m, n_words) uint64."""
    codes = np.asarray(codes)
    if codes.ndim == 1:
        codes = codes[:, None]
    k, m = codes.shape
    W = n_words(k)
    bits = np.zeros((m, W * 64), dtype=np.uint64)
    bits[:, :k] = (codes.T > 0)
    return np.bitwise_or.reduce(bits.reshape(m, W, 64) << _SHIFTS, axis=2)


def unpack_codes(packed, k):
    """(m, n_words) uint64 -> k x m int8 sign matrix."""
    packed = np.atleast_2d(np.asarray(packed, dtype=np.uint64))
    bits = (packed[:, :, None] >> _SHIFTS) & np.uint64(1)
    bits = bits.reshape(packed.shape[0], -1)[:, :k]
    return np.where(bits == 1, 1, -1).astype(np.int8).T


def sign_codes(X):
    """Elementwise sign with sign(0) = +1."""
    return np.where(np.asarray(X) >= 0, 1, -1).astype(np.int8)


def encode(net, X, chunk=None):
    """Hash codes for the columns of X; ``chunk`` bounds the forward batch."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    if X.shape[0] != net.in_dim:
        raise ShapeError(f"input dim {X.shape[0]} does not match network input {net.in_dim}")
    m = X.shape[1]
    step = chunk or max(m, 1)
    parts = [forward(net, X[:, s:s + step])[0] for s in range(0, m, step)]
    out = np.concatenate(parts, axis=1) if parts else np.zeros((net.out_dim, 0))
    return sign_codes(out)


def encode_image(net, v, chunk=None):
    codes = encode(net, v, chunk)
    return codes[:, 0] if np.ndim(v) == 1 else codes


def encode_text(net, t, chunk=None):
    codes = encode(net, t, chunk)
    return codes[:, 0] if np.ndim(t) == 1 else codes


def hamming(a, b):
    """Hamming distance between two packed codes (word arrays of equal length)."""
    a = np.asarray(a, dtype=np.uint64)
    b = np.asarray(b, dtype=np.uint64)
    if a.shape != b.shape:
        raise ShapeError(f"code length mismatch: {a.shape} vs {b.shape}")
    return int(np.bitwise_count(a ^ b).sum())


def hamming_to_all(packed_db, q):
    """Distances from one packed query to every packed database code."""
    return np.bitwise_count(packed_db ^ np.asarray(q, dtype=np.uint64)).sum(
        axis=1, dtype=np.int64
    )


@dataclass
class HashIndex:
    k: int
    codes: np.ndarray
    labels: np.ndarray
    ids: list = None
    modality: str = "unified"

    def __post_init__(self):
        self.codes = np.atleast_2d(np.asarray(self.codes, dtype=np.uint64))
        self.labels = np.asarray(self.labels, dtype=np.uint8)
        n = self.codes.shape[0]
        if self.k < 1:
            raise ShapeError(f"code length must be >= 1, got {self.k}")
        if self.codes.shape[1] != n_words(self.k):
            raise ShapeError(f"{self.codes.shape[1]} words per code, k={self.k} needs {n_words(self.k)}")
        if self.labels.ndim != 2 or self.labels.shape[1] != n:
            raise ShapeError("labels must be c x n with one column per code")
        if self.ids is None:
            self.ids = [str(i) for i in range(n)]
        if len(self.ids) != n:
            raise ShapeError("ids count does not match code count")
        if self.modality not in MODALITIES:
            raise ShapeError(f"modality must be one of {MODALITIES}")

    @property
    def n(self):
        return self.codes.shape[0]

    def __eq__(self, other):
        if not isinstance(other, HashIndex):
            return NotImplemented
        return (
            self.k == other.k
            and self.modality == other.modality
            and np.array_equal(self.codes, other.codes)
            and np.array_equal(self.labels, other.labels)
            and list(self.ids) == list(other.ids)
        )


def build_index(codes, labels, ids=None, modality="unified"):
    """Index a k x n sign matrix with its c x n labels."""
    codes = np.asarray(codes)
    return HashIndex(codes.shape[0], pack_codes(codes), labels, ids, modality)


@dataclass
class RankedResult:
    order: np.ndarray
    distances: np.ndarray

    def __iter__(self):
        return iter(zip(self.order.tolist(), self.distances.tolist()))


def _as_packed_query(index, q):
    q = np.asarray(q)
    if q.dtype == np.uint64:
        if q.shape != (n_words(index.k),):
            raise ShapeError("packed query has the wrong number of words")
        return q
    if q.shape != (index.k,):
        raise ShapeError(f"query code length {q.shape} does not match k={index.k}")
    return pack_codes(q)[0]


def rank(index, q):
    """Whole database by ascending Hamming distance, ties by position."""
    d = hamming_to_all(index.codes, _as_packed_query(index, q))
    order = np.argsort(d, kind="stable")
    return RankedResult(order, d[order])


def _relevance(index, q_label):
    return (np.asarray(q_label, dtype=np.int64) @ index.labels.astype(np.int64)) > 0


def average_precision(relevant_in_rank_order):
    """AP over a full ranking; ``None`` when nothing is relevant."""
    rel = np.asarray(relevant_in_rank_order, dtype=bool)
    R = int(rel.sum())
    if R == 0:
        return None
    hits = np.cumsum(rel)
    ranks = np.flatnonzero(rel) + 1
    return math.fsum((hits[rel] / ranks).tolist()) / R


@dataclass
class MapReport:
    map: float
    n_evaluated: int
    n_skipped: int
    per_query: list = field(repr=False, default_factory=list)


def _check_queries(index, q_codes, q_labels):
    q_codes = np.asarray(q_codes)
    q_labels = np.asarray(q_labels)
    if q_codes.ndim == 1:
        q_codes = q_codes[:, None]
    if q_labels.ndim == 1:
        q_labels = q_labels[:, None]
    if q_codes.shape[0] != index.k:
        raise ShapeError(f"query codes are {q_codes.shape[0]}-bit, index is {index.k}-bit")
    if q_labels.shape != (index.labels.shape[0], q_codes.shape[1]):
        raise ShapeError("query labels must be c x m matching the index label count")
    return pack_codes(q_codes), q_labels


def mean_average_precision(index, q_codes, q_labels):
    """Hamming-ranking mAP over the full database.

    Queries with no relevant database item are left out of the mean and
    counted in ``n_skipped``.
    """
    packed, q_labels = _check_queries(index, q_codes, q_labels)
    aps = []
    for qi in range(packed.shape[0]):
        res = rank(index, packed[qi])
        aps.append(average_precision(_relevance(index, q_labels[:, qi])[res.order]))
    valid = [a for a in aps if a is not None]
    if not valid:
        raise EvaluationError("no evaluable queries")
    return MapReport(math.fsum(valid) / len(valid), len(valid), len(aps) - len(valid), aps)


@dataclass
class PRPoint:
    radius: int
    precision: float
    recall: float
    zero_retrieval: bool


def precision_recall_by_radius(index, q_codes, q_labels):
    """Micro-averaged hash-lookup precision/recall for radius 0..k.

    At radius r every database item within distance r is retrieved.  If no
    query retrieves anything at r, precision is reported as 1.0 and the
    point is flagged.
    """
    packed, q_labels = _check_queries(index, q_codes, q_labels)
    k = index.k
    retrieved = np.zeros(k + 1, dtype=np.int64)
    hit = np.zeros(k + 1, dtype=np.int64)
    total_rel = 0
    for qi in range(packed.shape[0]):
        d = hamming_to_all(index.codes, packed[qi])
        rel = _relevance(index, q_labels[:, qi])
        retrieved += np.bincount(d, minlength=k + 1)
        hit += np.bincount(d[rel], minlength=k + 1)
        total_rel += int(rel.sum())
    if total_rel == 0:
        raise EvaluationError("no evaluable queries")
    retrieved = np.cumsum(retrieved)
    hit = np.cumsum(hit)
    points = []
    for r in range(k + 1):
        empty = retrieved[r] == 0
        precision = 1.0 if empty else hit[r] / retrieved[r]
        points.append(PRPoint(r, float(precision), float(hit[r] / total_rel), bool(empty)))
    return points


# --- index container ----------------------------------------------------------
#
# after the common header:
#   u8 modality (0 unified, 1 image, 2 text)
#   u16 k, u64 n, u16 c
#   n * ceil(k/64) u64 packed codes
#   c * ceil(n/8) bytes: label rows, bit-packed little-endian within each byte
#   n ids: u32 byte length + utf-8 bytes


def dump_index(index):
    c = index.labels.shape[0]
    parts = [
        container.header(container.KIND_INDEX),
        struct.pack("<BHQH", MODALITIES.index(index.modality), index.k, index.n, c),
        container.le_bytes(index.codes, "u8"),
        np.packbits(index.labels.astype(bool), axis=1, bitorder="little").tobytes(),
    ]
    for ident in index.ids:
        raw = str(ident).encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
    return b"".join(parts)


def parse_index(buf):
    r = Reader(buf)
    container.read_header(r, container.KIND_INDEX)
    mod, k, n, c = r.unpack("BHQH")
    if mod >= len(MODALITIES):
        raise FormatError(f"unknown modality tag {mod}")
    if k < 1:
        raise FormatError("code length 0 in index header")
    codes = r.array("u8", n * n_words(k)).reshape(n, n_words(k))
    row_bytes = (n + 7) // 8
    raw = np.frombuffer(r.take(c * row_bytes), dtype=np.uint8).reshape(c, row_bytes)
    labels = np.unpackbits(raw, axis=1, count=n, bitorder="little")
    ids = []
    for _ in range(n):
        (length,) = r.unpack("I")
        try:
            ids.append(bytes(r.take(length)).decode("utf-8"))
        except UnicodeDecodeError:
            raise FormatError("instance id is not valid utf-8") from None
    r.finish()
    return HashIndex(k, codes, labels, ids, MODALITIES[mod])


def save_index(index, path):
    with open(path, "wb") as fh:
        fh.write(dump_index(index))


def load_index(path):
    with open(path, "rb") as fh:
        return parse_index(fh.read())
