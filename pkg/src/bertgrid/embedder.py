"""Word-piece embedding functions: one-hot characters, hash vectors, skip-gram
word2vec tables, externally computed contextual vectors and a window mixer."""

from __future__ import annotations

import hashlib
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .preprocess import TokenSequence

logger = logging.getLogger(__name__)

EMBD_MAGIC = b"EMBD"
EMBD_VERSION = 1
_EMBD_HEADER = struct.Struct("<4sIII")

DEFAULT_ALPHABET = "abcdefghijklmnopqrstuvwxyz0123456789.,:;-/#$%&()'+*@!"
DEFAULT_DENSE_DIM = 32


class EmbeddingError(ValueError):
    pass


@dataclass
class EmbeddingTable:
    """Static piece-index -> vector table. ``losses`` holds per-epoch training loss when trained."""

    rows: np.ndarray
    losses: list[float] = field(default_factory=list)

    def __post_init__(self):
        self.rows = np.ascontiguousarray(self.rows, dtype=np.float32)
        if self.rows.ndim != 2 or self.rows.shape[1] == 0:
            raise EmbeddingError(f"embedding table must be 2-D with d > 0, got shape {self.rows.shape}")

    @property
    def dim(self) -> int:
        return self.rows.shape[1]

    def __len__(self) -> int:
        return self.rows.shape[0]

    def save(self, path: str | Path) -> None:
        write_matrix(path, self.rows)

    @classmethod
    def load(cls, path: str | Path) -> "EmbeddingTable":
        return cls(read_matrix(path))


def write_matrix(path: str | Path, mat: np.ndarray) -> None:
    mat = np.ascontiguousarray(mat, dtype="<f4")
    n, d = mat.shape
    with open(path, "wb") as fh:
        fh.write(_EMBD_HEADER.pack(EMBD_MAGIC, EMBD_VERSION, n, d))
        fh.write(mat.tobytes())


def read_matrix(path: str | Path) -> np.ndarray:
    """Read an EMBD binary file, or the whitespace-separated text variant."""
    data = Path(path).read_bytes()
    if not data.startswith(EMBD_MAGIC):
        try:
            rows = [line.split() for line in data.decode("utf-8").splitlines() if line.strip()]
            mat = np.array([[float(v) for v in r] for r in rows], dtype=np.float32)
        except (UnicodeDecodeError, ValueError) as exc:
            raise EmbeddingError(f"{path}: neither an EMBD file nor a text matrix ({exc})") from exc
        if mat.ndim != 2:
            raise EmbeddingError(f"{path}: text rows have unequal lengths")
        return mat
    if len(data) < _EMBD_HEADER.size:
        raise EmbeddingError(f"{path}: truncated header")
    _, version, n, d = _EMBD_HEADER.unpack_from(data)
    if version != EMBD_VERSION:
        raise EmbeddingError(f"{path}: unsupported EMBD version {version}")
    expected = _EMBD_HEADER.size + 4 * n * d
    if len(data) != expected:
        raise EmbeddingError(f"{path}: expected {expected} bytes for {n}x{d}, found {len(data)}")
    mat = np.frombuffer(data, dtype="<f4", offset=_EMBD_HEADER.size).reshape(n, d)
    return mat.astype(np.float32)


def char_onehot(ch: str, alphabet: str = DEFAULT_ALPHABET) -> np.ndarray:
    vec = np.zeros(len(alphabet) + 1, dtype=np.float32)
    pos = alphabet.find(ch) if len(ch) == 1 else -1
    vec[pos if pos >= 0 else len(alphabet)] = 1.0
    return vec


def hash_embed(piece: str, d: int, seed: int = 0) -> np.ndarray:
    if d <= 0:
        raise EmbeddingError("embedding dim must be positive")
    digest = hashlib.blake2b(piece.encode("utf-8"), digest_size=8).digest()
    rng = np.random.default_rng([int.from_bytes(digest, "little"), seed & 0xFFFFFFFF])
    vec = rng.standard_normal(d)
    return (vec / np.linalg.norm(vec)).astype(np.float32)


class Embedder(Protocol):
    dim: int

    def __call__(self, seq: TokenSequence) -> np.ndarray: ...


class HashEmbedder:
    def __init__(self, dim: int = DEFAULT_DENSE_DIM, seed: int = 0):
        self.dim = dim
        self.seed = seed
        self._cache: dict[str, np.ndarray] = {}

    def vector(self, piece: str) -> np.ndarray:
        vec = self._cache.get(piece)
        if vec is None:
            vec = self._cache[piece] = hash_embed(piece, self.dim, self.seed)
        return vec

    def __call__(self, seq: TokenSequence) -> np.ndarray:
        if not len(seq):
            return np.zeros((0, self.dim), dtype=np.float32)
        return np.stack([self.vector(p) for p in seq.texts])


class TableEmbedder:
    """Looks rows up by vocab id, e.g. a word2vec table."""

    def __init__(self, table: EmbeddingTable):
        self.table = table
        self.dim = table.dim

    def __call__(self, seq: TokenSequence) -> np.ndarray:
        ids = np.asarray(seq.ids, dtype=np.int64)
        if ids.size and ids.max() >= len(self.table):
            raise EmbeddingError(f"piece id {ids.max()} outside table of {len(self.table)} rows")
        return self.table.rows[ids]


class ExternalEmbedder:
    """Positional pass-through of vectors computed outside the toolkit (e.g. a BERT layer)."""

    def __init__(self, path: str | Path, dim: int):
        self.path = Path(path)
        self.dim = dim

    def __call__(self, seq: TokenSequence) -> np.ndarray:
        return load_external_vectors(self.path, seq, self.dim)


class ContextMixer:
    def __init__(self, base: Embedder, window: int = 2, alpha: float = 0.5):
        self.base = base
        self.window = window
        self.alpha = alpha
        self.dim = base.dim

    def __call__(self, seq: TokenSequence) -> np.ndarray:
        return context_mix(self.base(seq), self.window, self.alpha)


def load_external_vectors(path: str | Path, seq: TokenSequence, dim: int | None = None) -> np.ndarray:
    mat = read_matrix(path)
    if mat.shape[0] != len(seq):
        raise EmbeddingError(f"{path}: expected {len(seq)} rows (one per piece), found {mat.shape[0]}")
    if dim is not None and mat.shape[1] != dim:
        raise EmbeddingError(f"{path}: expected dim {dim}, found {mat.shape[1]}")
    return mat


def context_mix(static: np.ndarray, window: int, alpha: float) -> np.ndarray:
    """Blend each row with the mean of its neighbours within ``window`` (self excluded)."""
    if window < 1:
        raise EmbeddingError("window must be >= 1")
    if not 0.0 <= alpha <= 1.0:
        raise EmbeddingError("alpha must lie in [0, 1]")
    static = np.asarray(static)
    n = static.shape[0]
    if n <= 1 or alpha == 0.0:
        return static.copy()
    src = static.astype(np.float64)
    total = np.zeros_like(src)
    count = np.zeros(n)
    for k in range(1, window + 1):
        if k >= n:
            break
        total[k:] += src[:-k]
        count[k:] += 1
        total[:-k] += src[k:]
        count[:-k] += 1
    mixed = (1.0 - alpha) * src + alpha * total / count[:, None]
    return mixed.astype(static.dtype)


def embed_sequence(seq: TokenSequence, embedder: Embedder) -> np.ndarray:
    out = embedder(seq)
    if out.shape != (len(seq), embedder.dim):
        raise EmbeddingError(f"embedder returned {out.shape}, expected {(len(seq), embedder.dim)}")
    return out


def train_word2vec(
    corpus: Sequence[TokenSequence],
    vocab_size: int,
    d: int = DEFAULT_DENSE_DIM,
    window: int = 2,
    negatives: int = 5,
    epochs: int = 5,
    lr: float = 0.05,
    seed: int = 0,
    batch_size: int = 64,
) -> EmbeddingTable:
    """Skip-gram with negative sampling over serialized piece-id sequences.

    Learning rate decays linearly to ``lr * 1e-3`` over the run. Negatives come
    from the unigram distribution raised to 0.75. Returns input-side vectors.
    """
    if window < 1 or negatives < 1:
        raise EmbeddingError("window and negatives must be >= 1")
    rng = np.random.default_rng(seed)
    w_in = ((rng.random((vocab_size, d)) - 0.5) / d).astype(np.float32)
    w_out = np.zeros((vocab_size, d), dtype=np.float32)

    seqs = [np.asarray(s.ids, dtype=np.int64) for s in corpus if len(s)]
    counts = np.bincount(np.concatenate(seqs), minlength=vocab_size) if seqs else np.zeros(vocab_size)
    if not seqs or counts.sum() == 0:
        raise EmbeddingError("word2vec corpus has an empty vocabulary")
    noise = counts.astype(np.float64) ** 0.75
    noise /= noise.sum()
    noise_cdf = np.cumsum(noise)

    centers, contexts = [], []
    for ids in seqs:
        for k in range(1, window + 1):
            if k >= len(ids):
                break
            centers += [ids[:-k], ids[k:]]
            contexts += [ids[k:], ids[:-k]]
    if not centers:
        raise EmbeddingError("word2vec corpus has no (center, context) pairs")
    centers = np.concatenate(centers)
    contexts = np.concatenate(contexts)
    n_pairs = len(centers)
    total_steps = max(epochs * -(-n_pairs // batch_size), 1)
    step = 0
    losses: list[float] = []
    for epoch in range(epochs):
        perm = rng.permutation(n_pairs)
        epoch_loss = 0.0
        for start in range(0, n_pairs, batch_size):
            idx = perm[start : start + batch_size]
            c, o = centers[idx], contexts[idx]
            neg = np.searchsorted(noise_cdf, rng.random((len(idx), negatives)), side="right")
            neg = np.minimum(neg, vocab_size - 1)
            rate = np.float32(lr * max(1.0 - step / total_steps, 1e-3))
            step += 1

            vc = w_in[c]
            uo = w_out[o]
            un = w_out[neg]
            s_pos = np.einsum("bd,bd->b", vc, uo)
            s_neg = np.einsum("bd,bkd->bk", vc, un)
            sig_pos = 1.0 / (1.0 + np.exp(-s_pos))
            sig_neg = 1.0 / (1.0 + np.exp(-s_neg))
            epoch_loss -= float(np.log(sig_pos + 1e-7).sum() + np.log(1.0 - sig_neg + 1e-7).sum())

            g_pos = (sig_pos - 1.0)[:, None]
            g_neg = sig_neg[:, :, None]
            grad_c = g_pos * uo + (g_neg * un).sum(axis=1)
            np.add.at(w_out, o, -rate * g_pos * vc)
            np.add.at(w_out, neg.ravel(), (-rate * g_neg * vc[:, None, :]).reshape(-1, d))
            np.add.at(w_in, c, -rate * grad_c)
        losses.append(epoch_loss / n_pairs)
        logger.info("word2vec epoch %d loss %.4f", epoch + 1, losses[-1])
    return EmbeddingTable(w_in, losses)


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b) + 1e-12))
