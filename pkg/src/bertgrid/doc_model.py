"""Document data model: tokens with pixel boxes, ground-truth annotations, ingestion."""

from __future__ import annotations

import enum
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

logger = logging.getLogger(__name__)


class DocumentError(ValueError):
    """Raised when a document or ground-truth file cannot be accepted.

    ``violations`` carries the individual records when the failure comes from
    invariant checking rather than from JSON decoding or schema shape.
    """

    def __init__(self, message: str, violations: Sequence["Violation"] = ()):
        super().__init__(message)
        self.violations = list(violations)


@dataclass(frozen=True)
class BBox:
    x_min: int
    y_min: int
    x_max: int
    y_max: int

    @property
    def width(self) -> int:
        return self.x_max - self.x_min

    @property
    def height(self) -> int:
        return self.y_max - self.y_min

    @property
    def center(self) -> tuple[float, float]:
        return (self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0

    def as_list(self) -> list[int]:
        return [self.x_min, self.y_min, self.x_max, self.y_max]

    def intersection_area(self, other: "BBox") -> int:
        w = min(self.x_max, other.x_max) - max(self.x_min, other.x_min)
        h = min(self.y_max, other.y_max) - max(self.y_min, other.y_min)
        if w <= 0 or h <= 0:
            return 0
        return w * h

    def contains_point(self, x: float, y: float) -> bool:
        return self.x_min <= x <= self.x_max and self.y_min <= y <= self.y_max

    @classmethod
    def from_list(cls, values: Sequence[int]) -> "BBox":
        x0, y0, x1, y1 = values
        return cls(int(x0), int(y0), int(x1), int(y1))


@dataclass(frozen=True)
class Token:
    text: str
    bbox: BBox


@dataclass(frozen=True)
class Document:
    doc_id: str
    page_width: int
    page_height: int
    tokens: tuple[Token, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def page(self) -> tuple[int, int]:
        return self.page_width, self.page_height


class FieldLabel(enum.IntEnum):
    BACKGROUND = 0
    INVOICE_AMOUNT = 1
    INVOICE_NUMBER = 2
    INVOICE_DATE = 3
    VENDOR_NAME = 4
    VENDOR_ADDRESS = 5
    LI_QUANTITY = 6
    LI_DESCRIPTION = 7
    LI_VAT = 8
    LI_TOTAL_PRICE = 9

    @property
    def label_name(self) -> str:
        return self.name.lower()

    @property
    def is_line_item(self) -> bool:
        return self.name.startswith("LI_")

    @property
    def is_header(self) -> bool:
        return self is not FieldLabel.BACKGROUND and not self.is_line_item

    @classmethod
    def from_name(cls, name: str) -> "FieldLabel":
        try:
            return cls[name.upper()]
        except KeyError:
            raise DocumentError(f"unknown label name {name!r}") from None


HEADER_FIELDS = tuple(f for f in FieldLabel if f.is_header)
LINE_ITEM_FIELDS = tuple(f for f in FieldLabel if f.is_line_item)
NUM_CLASSES = len(FieldLabel)


@dataclass(frozen=True)
class GroundTruth:
    token_labels: tuple[FieldLabel, ...]
    line_item_boxes: tuple[BBox, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "token_labels", tuple(FieldLabel(l) for l in self.token_labels))
        object.__setattr__(self, "line_item_boxes", tuple(self.line_item_boxes))


@dataclass(frozen=True)
class Violation:
    kind: str
    tokens: tuple[int, ...]
    message: str

    def __str__(self) -> str:
        return f"{self.kind}: {self.message}"


def validate(doc: Document) -> list[Violation]:
    """Check every Document invariant and return the violations found.

    Never raises. Boxes that merely share an edge are not overlaps.
    """
    out: list[Violation] = []
    if doc.page_width <= 0 or doc.page_height <= 0:
        out.append(Violation("page", (), f"page size {doc.page_width}x{doc.page_height} must be positive"))
    for i, tok in enumerate(doc.tokens):
        b = tok.bbox
        if not tok.text:
            out.append(Violation("empty_text", (i,), f"token {i} has empty text"))
        elif any(ch.isspace() for ch in tok.text):
            out.append(Violation("whitespace", (i,), f"token {i} text {tok.text!r} contains whitespace"))
        if b.x_min >= b.x_max or b.y_min >= b.y_max:
            out.append(Violation("degenerate", (i,), f"token {i} box {b.as_list()} is degenerate"))
        if min(b.x_min, b.y_min) < 0 or b.x_max > doc.page_width or b.y_max > doc.page_height:
            out.append(
                Violation(
                    "out_of_bounds",
                    (i,),
                    f"token {i} box {b.as_list()} exceeds page {doc.page_width}x{doc.page_height}",
                )
            )
    # sweep over x_min keeps this near-linear for typical OCR output
    order = sorted(range(len(doc.tokens)), key=lambda k: doc.tokens[k].bbox.x_min)
    active: list[int] = []
    for i in order:
        bi = doc.tokens[i].bbox
        active = [j for j in active if doc.tokens[j].bbox.x_max > bi.x_min]
        for j in active:
            if bi.intersection_area(doc.tokens[j].bbox) > 0:
                a, b = sorted((i, j))
                out.append(Violation("overlap", (a, b), f"tokens {a} and {b} overlap"))
        active.append(i)
    return out


def _require(obj: dict, key: str, typ, where: str):
    if key not in obj:
        raise DocumentError(f"{where}: missing field {key!r}")
    value = obj[key]
    if typ is int and isinstance(value, bool) or not isinstance(value, typ):
        raise DocumentError(f"{where}: field {key!r} has wrong type {type(value).__name__}")
    return value


def _parse_box(value, where: str) -> BBox:
    if (
        not isinstance(value, list)
        or len(value) != 4
        or not all(isinstance(v, int) and not isinstance(v, bool) for v in value)
    ):
        raise DocumentError(f"{where}: bbox must be a list of 4 integers, got {value!r}")
    return BBox.from_list(value)


def document_from_dict(obj) -> Document:
    if not isinstance(obj, dict):
        raise DocumentError("document must be a JSON object")
    doc_id = _require(obj, "doc_id", str, "document")
    width = _require(obj, "page_width", int, "document")
    height = _require(obj, "page_height", int, "document")
    raw_tokens = _require(obj, "tokens", list, "document")
    tokens = []
    for i, raw in enumerate(raw_tokens):
        where = f"token {i}"
        if not isinstance(raw, dict):
            raise DocumentError(f"{where}: must be an object")
        text = _require(raw, "text", str, where)
        if not text:
            raise DocumentError(f"{where}: text must be non-empty")
        tokens.append(Token(text, _parse_box(_require(raw, "bbox", list, where), where)))
    doc = Document(doc_id, width, height, tokens)
    violations = validate(doc)
    if violations:
        raise DocumentError(
            f"document {doc_id!r} violates invariants: " + "; ".join(map(str, violations)), violations
        )
    return doc


def parse_document(data: bytes | str) -> Document:
    """Parse one document from UTF-8 JSON bytes and validate it."""
    try:
        obj = json.loads(data)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise DocumentError(f"malformed JSON: {exc}") from exc
    return document_from_dict(obj)


def document_to_dict(doc: Document) -> dict:
    return {
        "doc_id": doc.doc_id,
        "page_width": doc.page_width,
        "page_height": doc.page_height,
        "tokens": [{"text": t.text, "bbox": t.bbox.as_list()} for t in doc.tokens],
    }


def serialize_document(doc: Document) -> bytes:
    return json.dumps(document_to_dict(doc), ensure_ascii=False, sort_keys=True).encode("utf-8")


def parse_ground_truth(data: bytes | str, doc: Document) -> GroundTruth:
    try:
        obj = json.loads(data)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise DocumentError(f"malformed JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise DocumentError("ground truth must be a JSON object")
    names = _require(obj, "labels", list, "ground truth")
    raw_boxes = obj.get("line_item_boxes", [])
    if not isinstance(raw_boxes, list):
        raise DocumentError("ground truth: line_item_boxes must be a list")
    if len(names) != len(doc.tokens):
        raise DocumentError(
            f"label count {len(names)} does not match token count {len(doc.tokens)} of {doc.doc_id!r}"
        )
    labels = []
    for name in names:
        if not isinstance(name, str):
            raise DocumentError(f"label {name!r} is not a string")
        labels.append(FieldLabel.from_name(name))
    boxes = [_parse_box(b, f"line_item_box {k}") for k, b in enumerate(raw_boxes)]
    gt = GroundTruth(tuple(labels), tuple(boxes))
    check_ground_truth(gt, doc)
    return gt


def line_item_membership(gt: GroundTruth, doc: Document) -> list[int | None]:
    """For each token, the index of the line-item box containing its center, if exactly one does."""
    out: list[int | None] = []
    for tok in doc.tokens:
        cx, cy = tok.bbox.center
        hits = [k for k, box in enumerate(gt.line_item_boxes) if box.contains_point(cx, cy)]
        out.append(hits[0] if len(hits) == 1 else None)
    return out


def check_ground_truth(gt: GroundTruth, doc: Document) -> None:
    if len(gt.token_labels) != len(doc.tokens):
        raise DocumentError(
            f"label count {len(gt.token_labels)} does not match token count {len(doc.tokens)}"
        )
    for i, (tok, label) in enumerate(zip(doc.tokens, gt.token_labels)):
        if not label.is_line_item:
            continue
        cx, cy = tok.bbox.center
        hits = sum(box.contains_point(cx, cy) for box in gt.line_item_boxes)
        if hits != 1:
            raise DocumentError(
                f"token {i} labeled {label.label_name} has its center inside {hits} line-item boxes (need 1)"
            )
    for warning in lint_ground_truth(gt, doc):
        logger.warning("%s: %s", doc.doc_id, warning)


def lint_ground_truth(gt: GroundTruth, doc: Document, order: Iterable[int] | None = None) -> list[str]:
    """Warn about header fields that appear as more than one instance.

    An instance is a maximal run of same-labeled tokens in reading order
    (token index order unless ``order`` is given).
    """
    order = list(range(len(doc.tokens))) if order is None else list(order)
    runs: dict[FieldLabel, int] = {}
    prev = None
    for i in order:
        label = gt.token_labels[i]
        if label.is_header and label is not prev:
            runs[label] = runs.get(label, 0) + 1
        prev = label
    return [
        f"header field {label.label_name} appears as {n} separate instances"
        for label, n in runs.items()
        if n > 1
    ]


def ground_truth_to_dict(gt: GroundTruth) -> dict:
    return {
        "labels": [l.label_name for l in gt.token_labels],
        "line_item_boxes": [b.as_list() for b in gt.line_item_boxes],
    }


def serialize_ground_truth(gt: GroundTruth) -> bytes:
    return json.dumps(ground_truth_to_dict(gt), sort_keys=True).encode("utf-8")


def load_document(path: str | Path) -> Document:
    return parse_document(Path(path).read_bytes())


def load_corpus(path: str | Path) -> list[Document]:
    """Load documents from a directory of ``*.json`` files or a JSON-Lines file."""
    path = Path(path)
    if path.is_dir():
        return [load_document(p) for p in sorted(path.glob("*.json"))]
    docs = []
    with path.open("rb") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                docs.append(parse_document(line))
            except DocumentError as exc:
                raise DocumentError(f"{path}:{lineno}: {exc}", exc.violations) from exc
    return docs
