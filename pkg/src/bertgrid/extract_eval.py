"""Turn segmentation/box predictions back into field strings and score them.

The score per field is ``1 - (insertions + deletions + modifications) / N``
with counts pooled over a test set and N the number of ground-truth instances.
"""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .doc_model import (
    HEADER_FIELDS,
    LINE_ITEM_FIELDS,
    Document,
    FieldLabel,
    GroundTruth,
    line_item_membership,
)
from .grid_builder import decode_boxes, map_box, rasterize_targets
from .network.layers import softmax
from .preprocess import CONT, UNK, TokenSequence, serialize

ALL_FIELDS = HEADER_FIELDS + LINE_ITEM_FIELDS
DEFAULT_IOU = 0.5


@dataclass
class LineItem:
    fields: dict[FieldLabel, str]
    box: tuple[float, float, float, float]  # grid space x0, y0, x1, y1

    def __post_init__(self):
        bad = [f for f in self.fields if not f.is_line_item]
        if bad:
            raise ValueError(f"line-item record holds non line-item fields {bad}")

    @property
    def y_center(self) -> float:
        return (self.box[1] + self.box[3]) / 2.0


@dataclass
class ExtractionResult:
    doc_id: str
    header_values: dict[FieldLabel, str] = field(default_factory=dict)
    line_items: list[LineItem] = field(default_factory=list)

    def __post_init__(self):
        bad = [f for f in self.header_values if not f.is_header]
        if bad:
            raise ValueError(f"header map holds non-header fields {bad}")

    def to_dict(self) -> dict:
        return {
            "doc_id": self.doc_id,
            "header": {f.label_name: v for f, v in sorted(self.header_values.items())},
            "line_items": [
                {"box": [round(v, 3) for v in li.box], "fields": {f.label_name: v for f, v in sorted(li.fields.items())}}
                for li in self.line_items
            ],
        }


def normalize(text: str) -> str:
    return re.sub(r"\s+", " ", text).strip()


# ---------------------------------------------------------------------------
# decoding


def _footprints(seq: TokenSequence, page: tuple[int, int], hw: tuple[int, int]):
    gh, gw = hw
    return [map_box(p.bbox, page, (gw, gh)) for p in seq.pieces]


def decode_labels(
    seg_logits: np.ndarray, seq: TokenSequence, page: tuple[int, int]
) -> list[FieldLabel]:
    """Majority argmax class over each piece's grid footprint.

    Ties go to the higher mean softmax probability, then to a field class over
    background, then to the lower class index.
    """
    if seg_logits.ndim == 4:
        seg_logits = seg_logits[0]
    hw = seg_logits.shape[:2]
    probs = softmax(seg_logits.astype(np.float64))
    argmax = probs.argmax(axis=-1)
    n_cls = seg_logits.shape[-1]
    out = []
    for x0, y0, x1, y1 in _footprints(seq, page, hw):
        votes = np.bincount(argmax[y0:y1, x0:x1].ravel(), minlength=n_cls)
        tied = np.flatnonzero(votes == votes.max())
        if len(tied) > 1:
            mean_p = probs[y0:y1, x0:x1].reshape(-1, n_cls).mean(axis=0)
            tied = sorted(tied, key=lambda c: (-mean_p[c], c == 0, c))
        out.append(FieldLabel(int(tied[0])))
    return out


def _words(indices: Iterable[int], seq: TokenSequence, doc: Document) -> list[str]:
    """Merge the given piece positions (in serialization order) back into source-cased words."""
    words: list[str] = []
    run: list[int] = []

    def flush():
        if not run:
            return
        source = doc.tokens[seq.word_index[run[0]]].text
        lower = source.lower()
        if any(seq.pieces[j].text == UNK for j in run):
            words.append(source)
        elif len(lower) == len(source):
            words.append(source[seq.char_spans[run[0]][0] : seq.char_spans[run[-1]][1]])
        else:
            words.append("".join(seq.pieces[j].text.removeprefix(CONT) for j in run))
        run.clear()

    for j in indices:
        if run and (seq.word_index[j] != seq.word_index[run[-1]] or j != run[-1] + 1):
            flush()
        run.append(j)
    flush()
    return words


def extract_header_fields(labels: Sequence[FieldLabel], seq: TokenSequence, doc: Document) -> dict[FieldLabel, str]:
    out = {}
    for f in HEADER_FIELDS:
        idx = [j for j, l in enumerate(labels) if l == f]
        if idx:
            out[f] = " ".join(_words(idx, seq, doc))
    return out


def box_iou(a, b) -> float:
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def cluster_boxes(boxes: Sequence[Sequence[float]], iou_threshold: float = DEFAULT_IOU) -> list[list[int]]:
    """Greedy clustering: largest boxes first, join the first cluster whose running mean box is close enough."""
    order = sorted(range(len(boxes)), key=lambda i: (-(boxes[i][2] - boxes[i][0]) * (boxes[i][3] - boxes[i][1]), i))
    clusters: list[list[int]] = []
    sums: list[np.ndarray] = []
    for i in order:
        b = np.asarray(boxes[i], dtype=np.float64)
        for k, members in enumerate(clusters):
            if box_iou(b, sums[k] / len(members)) >= iou_threshold:
                members.append(i)
                sums[k] += b
                break
        else:
            clusters.append([i])
            sums.append(b.copy())
    return clusters


def group_line_items(
    box_preds: np.ndarray,
    labels: Sequence[FieldLabel],
    seq: TokenSequence,
    doc: Document,
    iou_threshold: float = DEFAULT_IOU,
) -> list[LineItem]:
    if not 0 < iou_threshold < 1:
        raise ValueError("iou_threshold must lie in (0, 1)")
    if box_preds.ndim == 4:
        box_preds = box_preds[0]
    hw = box_preds.shape[:2]
    prints = _footprints(seq, doc.page, hw)
    li_idx = [j for j, l in enumerate(labels) if l.is_line_item]
    boxes = []
    for j in li_idx:
        x0, y0, x1, y1 = prints[j]
        ys, xs = np.mgrid[y0:y1, x0:x1]
        boxes.append(decode_boxes(box_preds, ys.ravel(), xs.ravel(), hw).mean(axis=0))
    records = []
    for members in cluster_boxes(boxes, iou_threshold):
        pieces = sorted(li_idx[m] for m in members)
        mean_box = tuple(float(v) for v in np.mean([boxes[m] for m in members], axis=0))
        fields = {}
        for f in LINE_ITEM_FIELDS:
            idx = [j for j in pieces if labels[j] == f]
            if idx:
                fields[f] = " ".join(_words(idx, seq, doc))
        records.append(LineItem(fields, mean_box))
    records.sort(key=lambda r: r.y_center)
    return records


def extract(
    seg_logits: np.ndarray,
    box_preds: np.ndarray,
    seq: TokenSequence,
    doc: Document,
    iou_threshold: float = DEFAULT_IOU,
) -> ExtractionResult:
    labels = decode_labels(seg_logits, seq, doc.page)
    return ExtractionResult(
        doc.doc_id,
        extract_header_fields(labels, seq, doc),
        group_line_items(box_preds, labels, seq, doc, iou_threshold),
    )


def oracle_outputs(seq: TokenSequence, doc: Document, gt: GroundTruth, hw: tuple[int, int], margin: float = 20.0):
    """Perfect network outputs rasterized from ground truth: (seg_logits, box_preds)."""
    t = rasterize_targets(seq, doc, gt, hw)
    logits = np.full(hw + (len(FieldLabel),), -margin, dtype=np.float32)
    np.put_along_axis(logits, t.mask[..., None], margin, axis=-1)
    return logits, t.boxes


def truth_result(doc: Document, gt: GroundTruth) -> ExtractionResult:
    """Ground-truth strings: tokens in reading order, line items ordered top to bottom."""
    order = serialize(doc)
    header = {}
    for f in HEADER_FIELDS:
        words = [doc.tokens[i].text for i in order if gt.token_labels[i] == f]
        if words:
            header[f] = " ".join(words)
    member = line_item_membership(gt, doc)
    items = []
    for k, box in enumerate(gt.line_item_boxes):
        fields = {}
        for f in LINE_ITEM_FIELDS:
            words = [doc.tokens[i].text for i in order if gt.token_labels[i] == f and member[i] == k]
            if words:
                fields[f] = " ".join(words)
        items.append(LineItem(fields, (box.x_min, box.y_min, box.x_max, box.y_max)))
    items.sort(key=lambda r: r.y_center)
    return ExtractionResult(doc.doc_id, header, items)


# ---------------------------------------------------------------------------
# scoring


def match_instances(predicted: Iterable[str], truth: Iterable[str]) -> tuple[int, int, int]:
    """(insertions, deletions, modifications) after removing exact matches."""
    p, t = Counter(predicted), Counter(truth)
    common = p & t
    rest_p = sum((p - common).values())
    rest_t = sum((t - common).values())
    return max(0, rest_p - rest_t), max(0, rest_t - rest_p), min(rest_p, rest_t)


@dataclass
class FieldCounts:
    n: int = 0
    insertions: int = 0
    deletions: int = 0
    modifications: int = 0

    def add(self, n: int, counts: tuple[int, int, int]) -> None:
        self.n += n
        self.insertions += counts[0]
        self.deletions += counts[1]
        self.modifications += counts[2]

    @property
    def errors(self) -> int:
        return self.insertions + self.deletions + self.modifications

    @property
    def measure(self) -> float | None:
        if self.n == 0:
            return None
        return 1.0 - self.errors / self.n


def measure(insertions: int, deletions: int, modifications: int, n: int) -> float:
    return 1.0 - (insertions + deletions + modifications) / n


@dataclass
class EvalReport:
    fields: dict[FieldLabel, FieldCounts]

    def _mean(self, which) -> float | None:
        vals = [c.measure for f, c in self.fields.items() if f in which and c.measure is not None]
        return sum(vals) / len(vals) if vals else None

    @property
    def mean(self) -> float | None:
        return self._mean(ALL_FIELDS)

    @property
    def line_item_mean(self) -> float | None:
        return self._mean(LINE_ITEM_FIELDS)

    def to_dict(self) -> dict:
        return {
            "mean": self.mean,
            "line_item_mean": self.line_item_mean,
            "fields": {
                f.label_name: {
                    "n": c.n,
                    "insertions": c.insertions,
                    "deletions": c.deletions,
                    "modifications": c.modifications,
                    "measure": c.measure,
                }
                for f, c in self.fields.items()
            },
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def table(self) -> str:
        fmt = lambda v: "n/a" if v is None else f"{100 * v:.2f}%"
        lines = [f"{'field':<16} {'N':>6} {'ins':>6} {'del':>6} {'mod':>6} {'measure':>9}"]
        for f, c in self.fields.items():
            lines.append(
                f"{f.label_name:<16} {c.n:>6} {c.insertions:>6} {c.deletions:>6} {c.modifications:>6} {fmt(c.measure):>9}"
            )
        lines.append(f"{'LI mean':<16} {'':>27} {fmt(self.line_item_mean):>9}")
        lines.append(f"{'mean':<16} {'':>27} {fmt(self.mean):>9}")
        return "\n".join(lines)


def _as_set(value: str | None) -> list[str]:
    return [normalize(value)] if value is not None and normalize(value) else []


def document_counts(pred: ExtractionResult, truth: ExtractionResult) -> dict[FieldLabel, FieldCounts]:
    counts = {f: FieldCounts() for f in ALL_FIELDS}
    for f in HEADER_FIELDS:
        t = _as_set(truth.header_values.get(f))
        counts[f].add(len(t), match_instances(_as_set(pred.header_values.get(f)), t))
    p_items = sorted(pred.line_items, key=lambda r: r.y_center)
    t_items = sorted(truth.line_items, key=lambda r: r.y_center)
    for k in range(max(len(p_items), len(t_items))):
        p_rec = p_items[k].fields if k < len(p_items) else {}
        t_rec = t_items[k].fields if k < len(t_items) else {}
        for f in LINE_ITEM_FIELDS:
            t = _as_set(t_rec.get(f))
            counts[f].add(len(t), match_instances(_as_set(p_rec.get(f)), t))
    return counts


def evaluate(results: Sequence[ExtractionResult], truths: Sequence) -> EvalReport:
    """Pool per-field edit counts over aligned (result, truth) lists.

    ``truths`` holds ExtractionResults or (Document, GroundTruth) pairs.
    """
    if len(results) != len(truths):
        raise ValueError(f"{len(results)} results for {len(truths)} ground truths")
    total = {f: FieldCounts() for f in ALL_FIELDS}
    for pred, truth in zip(results, truths):
        if not isinstance(truth, ExtractionResult):
            truth = truth_result(*truth)
        for f, c in document_counts(pred, truth).items():
            total[f].add(c.n, (c.insertions, c.deletions, c.modifications))
    return EvalReport(total)
