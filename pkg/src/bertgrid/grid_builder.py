"""Rasterize per-piece embedding vectors into a H x W x d grid tensor.

Cell (y, x) of the tensor takes the vector of the piece whose grid-mapped box
covers it and stays exactly zero otherwise. Grid boxes are half-open integer
ranges obtained by flooring min edges and ceiling max edges.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .doc_model import BBox, Document, FieldLabel, GroundTruth, line_item_membership
from .embedder import DEFAULT_ALPHABET, Embedder, char_onehot, embed_sequence
from .preprocess import TokenSequence, Vocab, serialize, split_box, tokenize_document

GRID_MAGIC = b"GRID"
GRID_VERSION = 1
_GRID_HEADER = struct.Struct("<4sIIII")

REPRESENTATIONS = ("chargrid", "wordgrid", "bertgrid", "combined")


class GridError(ValueError):
    pass


@dataclass(frozen=True)
class GridSpec:
    grid_height: int
    grid_width: int
    depth: int

    def __post_init__(self):
        if min(self.grid_height, self.grid_width, self.depth) <= 0:
            raise GridError(f"grid dimensions must be positive: {self}")

    @property
    def hw(self) -> tuple[int, int]:
        return self.grid_height, self.grid_width


@dataclass
class GridTensor:
    spec: GridSpec
    values: np.ndarray
    collisions: int = 0

    def __post_init__(self):
        expected = (self.spec.grid_height, self.spec.grid_width, self.spec.depth)
        if self.values.shape != expected:
            raise GridError(f"values shape {self.values.shape} does not match spec {expected}")

    @classmethod
    def zeros(cls, spec: GridSpec) -> "GridTensor":
        return cls(spec, np.zeros((spec.grid_height, spec.grid_width, spec.depth), dtype=np.float32))


def map_box(bbox: BBox, page: tuple[int, int], grid: tuple[int, int]) -> tuple[int, int, int, int]:
    """Page-pixel box -> half-open grid box (x0, y0, x1, y1), at least one cell each way.

    ``page`` and ``grid`` are (width, height).
    """
    pw, ph = page
    gw, gh = grid

    def axis(lo, hi, p, g):
        a = (lo * g) // p
        b = -((-hi * g) // p)
        a = min(max(a, 0), g - 1)
        b = min(max(b, a + 1), g)
        return a, b

    x0, x1 = axis(bbox.x_min, bbox.x_max, pw, gw)
    y0, y1 = axis(bbox.y_min, bbox.y_max, ph, gh)
    return x0, y0, x1, y1


def _rasterize(
    boxes: Sequence[BBox], rows: np.ndarray, page: tuple[int, int], spec: GridSpec
) -> GridTensor:
    out = GridTensor.zeros(spec)
    covered = np.zeros(spec.hw, dtype=np.int32)
    grid = (spec.grid_width, spec.grid_height)
    for box, row in zip(boxes, rows):
        x0, y0, x1, y1 = map_box(box, page, grid)
        out.values[y0:y1, x0:x1] = row
        covered[y0:y1, x0:x1] += 1
    out.collisions = int(np.count_nonzero(covered > 1))
    return out


def build_grid(
    seq: TokenSequence, emb: np.ndarray, page: tuple[int, int], spec: GridSpec
) -> GridTensor:
    """Fill each piece's grid footprint with its embedding row; later pieces win on collisions."""
    emb = np.asarray(emb)
    if emb.shape[0] != len(seq):
        raise GridError(f"{emb.shape[0]} embedding rows for {len(seq)} pieces")
    if len(seq) and emb.shape[1] != spec.depth:
        raise GridError(f"embedding dim {emb.shape[1]} does not match grid depth {spec.depth}")
    return _rasterize([p.bbox for p in seq.pieces], emb, page, spec)


def build_chargrid(
    doc: Document, alphabet: str = DEFAULT_ALPHABET, spec: GridSpec | None = None
) -> GridTensor:
    """One-hot character grid; each word box is split evenly into per-character boxes."""
    if spec is None:
        spec = GridSpec(64, 64, len(alphabet) + 1)
    if spec.depth != len(alphabet) + 1:
        raise GridError(f"chargrid depth must be {len(alphabet) + 1}, got {spec.depth}")
    boxes, rows = [], []
    for w in serialize(doc):
        tok = doc.tokens[w]
        chars = list(tok.text.lower())
        boxes += split_box(tok.bbox, chars)
        rows += [char_onehot(ch, alphabet) for ch in chars]
    rows_arr = np.stack(rows) if rows else np.zeros((0, spec.depth), np.float32)
    return _rasterize(boxes, rows_arr, doc.page, spec)


def build_inputs(
    doc: Document,
    representation: str,
    vocab: Vocab | None = None,
    embedder: Embedder | None = None,
    spec_char: GridSpec | None = None,
    spec_dense: GridSpec | None = None,
    alphabet: str = DEFAULT_ALPHABET,
    seq: TokenSequence | None = None,
) -> list[GridTensor]:
    """Network input tensors for one document: one grid, or (chargrid, dense) for ``combined``."""
    if representation not in REPRESENTATIONS:
        raise GridError(f"unknown representation {representation!r}")
    out = []
    if representation in ("chargrid", "combined"):
        if spec_char is None:
            raise GridError(f"{representation} needs a chargrid spec")
        out.append(build_chargrid(doc, alphabet, spec_char))
    if representation != "chargrid":
        if spec_dense is None or embedder is None or (vocab is None and seq is None):
            raise GridError(f"{representation} needs a dense spec, a vocab and an embedder")
        if seq is None:
            seq = tokenize_document(doc, vocab)
        out.append(build_grid(seq, embed_sequence(seq, embedder), doc.page, spec_dense))
    if representation == "combined" and spec_char.hw != spec_dense.hw:
        raise GridError(f"combined inputs need equal spatial dims, got {spec_char.hw} and {spec_dense.hw}")
    return out


def save_grid(t: GridTensor, path: str | Path) -> None:
    h, w, d = t.values.shape
    with open(path, "wb") as fh:
        fh.write(_GRID_HEADER.pack(GRID_MAGIC, GRID_VERSION, h, w, d))
        fh.write(np.ascontiguousarray(t.values, dtype="<f4").tobytes())


def load_grid(path: str | Path) -> GridTensor:
    data = Path(path).read_bytes()
    if len(data) < _GRID_HEADER.size:
        raise GridError(f"{path}: corrupt grid file (truncated header)")
    magic, version, h, w, d = _GRID_HEADER.unpack_from(data)
    if magic != GRID_MAGIC:
        raise GridError(f"{path}: bad magic {magic!r}")
    if version != GRID_VERSION:
        raise GridError(f"{path}: unsupported grid version {version}")
    expected = _GRID_HEADER.size + 4 * h * w * d
    if len(data) != expected:
        raise GridError(f"{path}: corrupt grid file ({len(data)} bytes, expected {expected})")
    values = np.frombuffer(data, dtype="<f4", offset=_GRID_HEADER.size).reshape(h, w, d)
    return GridTensor(GridSpec(h, w, d), values.astype(np.float32))


# ---------------------------------------------------------------------------
# training targets


def encode_box(box: tuple[float, float, float, float], cx_cell: np.ndarray, cy_cell: np.ndarray, hw):
    """Grid box (x0, y0, x1, y1) -> per-cell (dcx, dcy, log w, log h), normalized by grid size."""
    gh, gw = hw
    x0, y0, x1, y1 = box
    cx, cy = (x0 + x1) / 2.0, (y0 + y1) / 2.0
    return np.stack(
        np.broadcast_arrays(
            (cx - cx_cell) / gw,
            (cy - cy_cell) / gh,
            np.log((x1 - x0) / gw),
            np.log((y1 - y0) / gh),
        ),
        axis=-1,
    )


def decode_boxes(preds: np.ndarray, ys: np.ndarray, xs: np.ndarray, hw) -> np.ndarray:
    """Inverse of ``encode_box`` for cells (ys, xs); returns (k, 4) grid boxes x0, y0, x1, y1."""
    gh, gw = hw
    p = preds[ys, xs].astype(np.float64)
    cx = p[:, 0] * gw + xs + 0.5
    cy = p[:, 1] * gh + ys + 0.5
    w = np.exp(np.clip(p[:, 2], -20, 5)) * gw
    h = np.exp(np.clip(p[:, 3], -20, 5)) * gh
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=1)


@dataclass
class Targets:
    mask: np.ndarray  # (H, W) class indices
    boxes: np.ndarray  # (H, W, 4)
    valid: np.ndarray  # (H, W) bool, cells of li_* classes


def rasterize_targets(
    seq: TokenSequence, doc: Document, gt: GroundTruth, hw: tuple[int, int]
) -> Targets:
    """Segmentation mask and line-item box targets, rasterized with the same footprints as the grid."""
    gh, gw = hw
    mask = np.zeros((gh, gw), dtype=np.int64)
    boxes = np.zeros((gh, gw, 4), dtype=np.float32)
    member = line_item_membership(gt, doc)
    grid_li = [map_box(b, doc.page, (gw, gh)) for b in gt.line_item_boxes]
    for piece, w in zip(seq.pieces, seq.word_index):
        label = gt.token_labels[w]
        x0, y0, x1, y1 = map_box(piece.bbox, doc.page, (gw, gh))
        mask[y0:y1, x0:x1] = int(label)
        if label.is_line_item and member[w] is not None:
            ys, xs = np.mgrid[y0:y1, x0:x1]
            boxes[y0:y1, x0:x1] = encode_box(grid_li[member[w]], xs + 0.5, ys + 0.5, hw)
    valid = np.isin(mask, [int(f) for f in FieldLabel if f.is_line_item])
    return Targets(mask, boxes, valid)


# ---------------------------------------------------------------------------
# visualization


def _color(key: bytes) -> tuple[int, int, int]:
    d = hashlib.md5(key).digest()
    return int(d[0]) % 200 + 20, int(d[1]) % 200 + 20, int(d[2]) % 200 + 20


def render_rgb(t: GridTensor, mode: str = "auto") -> np.ndarray:
    """Color each occupied cell by its vector: argmax channel (one-hot) or sign pattern (dense)."""
    v = t.values
    if mode == "auto":
        mode = "onehot" if np.all((v == 0) | (v == 1)) else "dense"
    img = np.full(v.shape[:2] + (3,), 255, dtype=np.uint8)
    occupied = np.any(v != 0, axis=-1)
    if mode == "onehot":
        keys = v.argmax(axis=-1)
        for k in np.unique(keys[occupied]):
            img[occupied & (keys == k)] = _color(b"c%d" % k)
    else:
        signs = np.packbits(v[..., :64] > 0, axis=-1)
        for y, x in zip(*np.nonzero(occupied)):
            img[y, x] = _color(signs[y, x].tobytes())
    return img


def save_png(t: GridTensor, path: str | Path, mode: str = "auto", scale: int = 4) -> None:
    from PIL import Image

    img = render_rgb(t, mode)
    Image.fromarray(img).resize((img.shape[1] * scale, img.shape[0] * scale), Image.NEAREST).save(path)
