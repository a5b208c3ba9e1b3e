"""Reading-order serialization and word-piece tokenization of documents."""

from __future__ import annotations

import json
import logging
import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence


from .doc_model import BBox, Document, DocumentError, FieldLabel, GroundTruth, Token

logger = logging.getLogger(__name__)

UNK = "[UNK]"
PAD = "[PAD]"
CONT = "##"
MAX_WORD_CHARS = 100
DEFAULT_MIN_OVERLAP = 0.5


class Vocab:
    """Ordered word-piece vocabulary; index = position in ``pieces``."""

    def __init__(self, pieces: Sequence[str]):
        pieces = list(pieces)
        for reserved in (PAD, UNK):
            if reserved not in pieces:
                pieces.insert(0 if reserved == PAD else 1, reserved)
        if len(set(pieces)) != len(pieces):
            dupes = [p for p, c in Counter(pieces).items() if c > 1]
            raise ValueError(f"duplicate vocab pieces: {dupes[:5]}")
        self.pieces = pieces
        self.index = {p: i for i, p in enumerate(pieces)}

    def __len__(self) -> int:
        return len(self.pieces)

    def __contains__(self, piece: str) -> bool:
        return piece in self.index

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.pieces == other.pieces

    @property
    def unk_id(self) -> int:
        return self.index[UNK]

    def id_of(self, piece: str) -> int:
        return self.index.get(piece, self.index[UNK])

    def save(self, path: str | Path) -> None:
        Path(path).write_text("".join(p + "\n" for p in self.pieces), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocab":
        text = Path(path).read_text(encoding="utf-8")
        return cls([line for line in text.split("\n") if line])

    def character_set(self) -> set[str]:
        """Characters usable both as a word start and as a continuation."""
        starts = {p for p in self.pieces if len(p) == 1}
        conts = {p[2:] for p in self.pieces if p.startswith(CONT) and len(p) == 3}
        return starts & conts


@dataclass
class TokenSequence:
    """Word-piece serialization of a document.

    ``word_index[j]`` is the index of piece j's source token in the Document;
    ``char_spans[j]`` is the piece's character range within the lowercased word.
    """

    pieces: list[Token]
    word_index: list[int]
    ids: list[int]
    char_spans: list[tuple[int, int]]
    labels: list[FieldLabel] | None = None

    def __len__(self) -> int:
        return len(self.pieces)

    @property
    def texts(self) -> list[str]:
        return [p.text for p in self.pieces]

    def to_dict(self) -> dict:
        out = {
            "pieces": self.texts,
            "boxes": [p.bbox.as_list() for p in self.pieces],
            "word_index": list(self.word_index),
            "ids": list(self.ids),
            "char_spans": [list(s) for s in self.char_spans],
        }
        if self.labels is not None:
            out["labels"] = [l.label_name for l in self.labels]
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, obj: dict) -> "TokenSequence":
        pieces = [Token(t, BBox.from_list(b)) for t, b in zip(obj["pieces"], obj["boxes"])]
        labels = obj.get("labels")
        return cls(
            pieces,
            list(obj["word_index"]),
            list(obj["ids"]),
            [tuple(s) for s in obj["char_spans"]],
            None if labels is None else [FieldLabel.from_name(l) for l in labels],
        )


def group_lines(doc: Document, min_overlap_ratio: float = DEFAULT_MIN_OVERLAP) -> list[list[int]]:
    """Cluster tokens into text lines by vertical overlap (transitive closure)."""
    n = len(doc.tokens)
    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    boxes = [t.bbox for t in doc.tokens]
    by_top = sorted(range(n), key=lambda i: boxes[i].y_min)
    # tokens sorted by top edge: once a candidate starts below our bottom edge, nothing later overlaps
    for a_pos, a in enumerate(by_top):
        ba = boxes[a]
        for b in by_top[a_pos + 1 :]:
            bb = boxes[b]
            if bb.y_min >= ba.y_max:
                break
            overlap = min(ba.y_max, bb.y_max) - max(ba.y_min, bb.y_min)
            if overlap > 0 and overlap >= min_overlap_ratio * min(ba.height, bb.height):
                ra, rb = find(a), find(b)
                if ra != rb:
                    parent[max(ra, rb)] = min(ra, rb)
    groups: dict[int, list[int]] = {}
    for i in range(n):
        groups.setdefault(find(i), []).append(i)

    def mean_center(members):
        return sum(boxes[i].center[1] for i in members) / len(members)

    return sorted(groups.values(), key=lambda g: (mean_center(g), g[0]))


def serialize(doc: Document, min_overlap_ratio: float = DEFAULT_MIN_OVERLAP) -> list[int]:
    """Line-by-line, left-to-right reading order as a permutation of token indices."""
    order = []
    for line in group_lines(doc, min_overlap_ratio):
        line = sorted(line, key=lambda i: (doc.tokens[i].bbox.x_min, doc.tokens[i].bbox.y_min, i))
        order.extend(line)
    return order


def wordpiece_tokenize(word: str, vocab: Vocab) -> list[str]:
    pieces, _ = _wordpiece_with_spans(word.lower(), vocab)
    return pieces


def _wordpiece_with_spans(word: str, vocab: Vocab) -> tuple[list[str], list[tuple[int, int]]]:
    if not word or len(word) > MAX_WORD_CHARS:
        return [UNK], [(0, len(word))]
    pieces, spans = [], []
    start = 0
    while start < len(word):
        end = len(word)
        found = None
        while end > start:
            candidate = word[start:end] if start == 0 else CONT + word[start:end]
            # a word that itself begins with "##" must not start on a continuation entry
            if candidate in vocab.index and not (start == 0 and candidate.startswith(CONT)):
                found = candidate
                break
            end -= 1
        if found is None:
            return [UNK], [(0, len(word))]
        pieces.append(found)
        spans.append((start, end))
        start = end
    return pieces, spans


def piece_char_count(piece: str) -> int:
    return len(piece[2:]) if piece.startswith(CONT) else len(piece)


def split_box(word_bbox: BBox, pieces: Sequence[str]) -> list[BBox]:
    """Partition a word box along x, proportionally to each piece's character count."""
    n = len(pieces)
    if n == 0:
        raise ValueError("split_box needs at least one piece")
    if n == 1:
        return [word_bbox]
    x0, x1 = word_bbox.x_min, word_bbox.x_max
    width = x1 - x0
    if width < n:
        logger.warning("box %s narrower than %d pieces; clamping widths to 1px", word_bbox.as_list(), n)
        edges = [min(x0 + k, x1 - 1) for k in range(n)] + [x1]
        return [
            BBox(edges[k], word_bbox.y_min, max(edges[k + 1], edges[k] + 1), word_bbox.y_max)
            for k in range(n)
        ]
    counts = [max(piece_char_count(p), 1) for p in pieces]
    total = sum(counts)
    edges = [x0]
    cum = 0
    for k in range(n - 1):
        cum += counts[k]
        edge = x0 + math.floor(width * cum / total + 0.5)
        # keep every sub-box at least 1px wide on both sides
        edge = max(edge, edges[-1] + 1)
        edge = min(edge, x1 - (n - 1 - k))
        edges.append(edge)
    edges.append(x1)
    return [BBox(edges[k], word_bbox.y_min, edges[k + 1], word_bbox.y_max) for k in range(n)]


def tokenize_document(
    doc: Document,
    vocab: Vocab,
    gt: GroundTruth | None = None,
    min_overlap_ratio: float = DEFAULT_MIN_OVERLAP,
) -> TokenSequence:
    pieces: list[Token] = []
    word_index: list[int] = []
    ids: list[int] = []
    spans: list[tuple[int, int]] = []
    labels: list[FieldLabel] | None = [] if gt is not None else None
    for w in serialize(doc, min_overlap_ratio):
        tok = doc.tokens[w]
        texts, word_spans = _wordpiece_with_spans(tok.text.lower(), vocab)
        for text, box, span in zip(texts, split_box(tok.bbox, texts), word_spans):
            pieces.append(Token(text, box))
            word_index.append(w)
            ids.append(vocab.id_of(text))
            spans.append(span)
            if labels is not None:
                labels.append(gt.token_labels[w])
    return TokenSequence(pieces, word_index, ids, spans, labels)


def build_vocab(corpus: Sequence[Document], max_size: int = 2000, min_freq: int = 2) -> Vocab:
    """Characters (start and continuation forms) plus the most frequent whole words."""
    if not corpus:
        raise DocumentError("cannot build a vocabulary from an empty corpus")
    chars: set[str] = set()
    freq: Counter[str] = Counter()
    for doc in corpus:
        for tok in doc.tokens:
            word = tok.text.lower()
            if len(word) > MAX_WORD_CHARS:
                continue
            chars.update(word)
            freq[word] += 1
    char_list = sorted(chars)
    pieces = [PAD, UNK] + char_list + [CONT + c for c in char_list]
    ranked = sorted(
        (w for w, c in freq.items() if c >= min_freq and len(w) > 1), key=lambda w: (-freq[w], w)
    )
    pieces += ranked[: max(max_size, 0)]
    return Vocab(pieces)
