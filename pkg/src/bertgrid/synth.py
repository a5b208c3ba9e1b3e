"""Deterministic generator of invoice-like documents with field annotations."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .doc_model import (
    BBox,
    Document,
    FieldLabel,
    GroundTruth,
    Token,
    serialize_document,
    serialize_ground_truth,
)

VENDOR_WORDS = [
    "acme", "globex", "initech", "umbrella", "stark", "wayne", "wonka", "hooli", "vandelay", "soylent",
    "tyrell", "cyberdyne", "gringotts", "oceanic", "monarch", "zenith", "apex", "summit", "nordic", "atlas",
    "pioneer", "sterling", "harbor", "crescent", "evergreen", "granite", "falcon", "meridian", "orbit", "quantum",
]
VENDOR_KINDS = ["trading", "supplies", "logistics", "industries", "systems", "partners", "services", "labs"]
VENDOR_SUFFIX = ["GmbH", "Ltd", "Inc", "LLC", "AG", "Corp", "SA", "BV"]
STREETS = ["main", "oak", "maple", "cedar", "elm", "pine", "lake", "hill", "river", "park", "king", "mill"]
STREET_TYPES = ["street", "avenue", "road", "drive", "lane", "way", "blvd"]
CITIES = ["springfield", "riverton", "lakeside", "fairview", "brookfield", "kingston", "milton", "ashford"]
ADJECTIVES = ["steel", "blue", "large", "small", "premium", "office", "copper", "plastic", "wooden", "red"]
PRODUCTS = ["bolt", "chair", "paper", "cable", "desk", "lamp", "toner", "screw", "valve", "panel", "hinge", "filter"]
NUMBER_KEYWORDS = [["Invoice", "No:"], ["Invoice", "#"], ["Inv.", "No."], ["Bill", "No:"]]
DATE_KEYWORDS = [["Date:"], ["Invoice", "Date:"], ["Dated"]]
TOTAL_KEYWORDS = [["Total:"], ["Amount", "Due:"], ["Grand", "Total"], ["Total", "EUR"]]
TABLE_HEADERS = [["Qty", "Description", "VAT", "Total"], ["Qty", "Item", "Tax", "Amount"], ["Units", "Article", "VAT", "Price"]]
NOISE_LINES = [
    ["Thank", "you", "for", "your", "business"],
    ["Page", "1", "of", "1"],
    ["Payment", "due", "within", "30", "days"],
    ["Phone", "+49", "555", "0134"],
    ["Reference:", "see", "order"],
]
DATE_FORMATS = ["{d:02d}.{m:02d}.{y}", "{y}-{m:02d}-{d:02d}", "{d:02d}/{m:02d}/{y}"]
NUMBER_FORMATS = ["INV-{n:05d}", "{n:08d}", "A{n:04d}/{y}"]

MARGIN = 16
WORD_GAP_CHARS = 1


class GenerationError(ValueError):
    pass


@dataclass
class SynthConfig:
    seed: int = 0
    page_width: int = 512
    page_height: int = 512
    header_zone: tuple[int, int] = (16, 176)  # y range
    table_zone: tuple[int, int] = (184, 440)
    footer_zone: tuple[int, int] = (448, 504)
    rows: tuple[int, int] = (1, 5)  # line items per doc, inclusive
    field_prob: float = 0.9  # per header field
    noise_rate: float = 0.3  # probability per noise line
    decorations: bool = True  # keyword and table-header tokens
    two_column_prob: float = 0.5
    docs_per_vendor: int = 2
    column_jitter: int = 8

    def __post_init__(self):
        for name in ("header_zone", "table_zone", "footer_zone", "rows"):
            setattr(self, name, tuple(getattr(self, name)))
        zones = [self.header_zone, self.table_zone, self.footer_zone]
        for lo, hi in zones:
            if not 0 <= lo < hi <= self.page_height:
                raise GenerationError(f"zone {(lo, hi)} outside page height {self.page_height}")
        if self.header_zone[1] > self.table_zone[0] or self.table_zone[1] > self.footer_zone[0]:
            raise GenerationError("header/footer zones overlap the table zone")
        if not 0 <= self.rows[0] <= self.rows[1]:
            raise GenerationError(f"bad line-item row range {self.rows}")
        if self.docs_per_vendor < 1:
            raise GenerationError("docs_per_vendor must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        return cls(**d)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


@dataclass
class VendorStyle:
    vendor_id: int
    name: list[str]
    address: list[str]
    name_height: int
    body_height: int
    two_column: bool
    meta_x: int
    number_keyword: list[str]
    date_keyword: list[str]
    total_keyword: list[str]
    table_header: list[str]
    date_format: str
    number_format: str
    columns: tuple[int, int, int, int]  # x of qty, description, vat, total
    vat_as_rate: bool
    date_first: bool


def vendor_style(cfg: SynthConfig, vendor_id: int) -> VendorStyle:
    rng = np.random.default_rng([cfg.seed, 1_000_003, vendor_id])
    pick = lambda seq: seq[int(rng.integers(len(seq)))]
    name = [pick(VENDOR_WORDS).title(), pick(VENDOR_KINDS).title(), pick(VENDOR_SUFFIX)]
    address = [str(int(rng.integers(1, 200))), pick(STREETS).title(), pick(STREET_TYPES).title(), pick(CITIES).title()]
    body = int(rng.integers(11, 14))
    columns = (
        int(rng.integers(20, 36)),
        int(rng.integers(64, 90)),
        int(rng.integers(300, 324)),
        int(rng.integers(392, 412)),
    )
    return VendorStyle(
        vendor_id=vendor_id,
        name=name,
        address=address,
        name_height=int(rng.integers(14, 18)),
        body_height=body,
        two_column=bool(rng.random() < cfg.two_column_prob),
        meta_x=int(rng.integers(256, 284)),
        number_keyword=pick(NUMBER_KEYWORDS),
        date_keyword=pick(DATE_KEYWORDS),
        total_keyword=pick(TOTAL_KEYWORDS),
        table_header=pick(TABLE_HEADERS),
        date_format=pick(DATE_FORMATS),
        number_format=pick(NUMBER_FORMATS),
        columns=columns,
        vat_as_rate=bool(rng.random() < 0.5),
        date_first=bool(rng.random() < 0.3),
    )


class _Page:
    """Collects tokens, placing words left to right on a line."""

    def __init__(self, cfg: SynthConfig):
        self.cfg = cfg
        self.tokens: list[Token] = []
        self.labels: list[FieldLabel] = []

    def line(self, x: int, y: int, words: Sequence[str], height: int, label=FieldLabel.BACKGROUND) -> int:
        """Place words starting at (x, y); returns the x after the last word."""
        cw = max(int(round(0.6 * height)), 1)
        for w in words:
            x1 = x + cw * len(w)
            if x1 > self.cfg.page_width - MARGIN // 2 or y + height > self.cfg.page_height:
                raise GenerationError(f"word {w!r} at ({x},{y}) does not fit on the page")
            self.tokens.append(Token(w, BBox(x, y, x1, y + height)))
            self.labels.append(label)
            x = x1 + cw * WORD_GAP_CHARS
        return x


def _amount(rng, lo, hi) -> str:
    return f"{rng.uniform(lo, hi):.2f}"


def generate_one(cfg: SynthConfig, index: int) -> tuple[Document, GroundTruth]:
    vendor = index // cfg.docs_per_vendor
    style = vendor_style(cfg, vendor)
    rng = np.random.default_rng([cfg.seed, index])
    page = _Page(cfg)
    present = {f: bool(rng.random() < cfg.field_prob) for f in FieldLabel if f.is_header}
    jitter = lambda: int(rng.integers(-cfg.column_jitter, cfg.column_jitter + 1))
    bh = style.body_height
    pitch = bh + 8

    # vendor block
    x0 = MARGIN + 8 + jitter()
    y = cfg.header_zone[0] + 8 + abs(jitter())
    vendor_right = x0
    if present[FieldLabel.VENDOR_NAME]:
        vendor_right = page.line(x0, y, style.name, style.name_height, FieldLabel.VENDOR_NAME)
        y += style.name_height + 8
    if present[FieldLabel.VENDOR_ADDRESS]:
        vendor_right = max(vendor_right, page.line(x0, y, style.address, bh, FieldLabel.VENDOR_ADDRESS))
        y += pitch
    vendor_bottom = y

    # invoice number / date block
    n = int(rng.integers(1, 99999))
    year = int(rng.integers(2015, 2024))
    number = style.number_format.format(n=n, y=year)
    date = style.date_format.format(d=int(rng.integers(1, 29)), m=int(rng.integers(1, 13)), y=year)
    meta = [(FieldLabel.INVOICE_NUMBER, style.number_keyword, number), (FieldLabel.INVOICE_DATE, style.date_keyword, date)]
    if style.date_first:
        meta.reverse()
    if style.two_column:
        mx, y = max(style.meta_x + jitter(), vendor_right + 16), cfg.header_zone[0] + 8 + abs(jitter())
    else:
        mx, y = x0, vendor_bottom + 4
    for label, keyword, value in meta:
        if not present[label]:
            continue
        x = mx
        if cfg.decorations:
            x = page.line(x, y, keyword, bh) + 4
        page.line(x, y, [value], bh, label)
        y += pitch
    header_bottom = max(y, vendor_bottom)
    if rng.random() < cfg.noise_rate:
        page.line(x0, header_bottom, NOISE_LINES[3], bh)
        header_bottom += pitch
    if header_bottom > cfg.header_zone[1]:
        raise GenerationError(f"header content ends at y={header_bottom}, beyond zone {cfg.header_zone}")

    # line-item table
    cols = [c + jitter() for c in style.columns]
    y = max(cfg.table_zone[0], header_bottom + 8)
    if cfg.decorations:
        x = 0
        for c, word in zip(cols, style.table_header):
            x = page.line(max(c, x), y, [word], bh)
        y += pitch + 4
    k = int(rng.integers(cfg.rows[0], cfg.rows[1] + 1))
    li_boxes = []
    totals = 0.0
    for _ in range(k):
        qty = int(rng.integers(1, 25))
        desc = [ADJECTIVES[int(rng.integers(len(ADJECTIVES)))] for _ in range(int(rng.integers(0, 2)))]
        desc.append(PRODUCTS[int(rng.integers(len(PRODUCTS)))])
        desc[0] = desc[0].title()
        price = float(_amount(rng, 1, 400))
        totals += price
        vat = f"{int(rng.choice([7, 19]))}%" if style.vat_as_rate else f"{price * 0.19:.2f}"
        row_start = len(page.tokens)
        page.line(cols[0], y, [str(qty)], bh, FieldLabel.LI_QUANTITY)
        end = page.line(cols[1], y, desc, bh, FieldLabel.LI_DESCRIPTION)
        if end > cols[2]:
            raise GenerationError("description column too narrow")
        page.line(cols[2], y, [vat], bh, FieldLabel.LI_VAT)
        page.line(cols[3], y, [f"{price:.2f}"], bh, FieldLabel.LI_TOTAL_PRICE)
        row = [t.bbox for t in page.tokens[row_start:]]
        li_boxes.append(
            BBox(
                min(b.x_min for b in row) - 2,
                y - 2,
                min(max(b.x_max for b in row) + 2, cfg.page_width),
                y + bh + 2,
            )
        )
        y += pitch + 4
    if present[FieldLabel.INVOICE_AMOUNT]:
        y += 4
        amount = f"{totals * (1.0 if style.vat_as_rate else 1.19):.2f}"
        cw = max(int(round(0.6 * bh)), 1)
        kw = style.total_keyword if cfg.decorations else []
        kw_width = sum(len(w) + WORD_GAP_CHARS for w in kw) * cw + 4 * bool(kw)
        x = max(cols[3] - kw_width, cols[2])
        if kw:
            x = page.line(x, y, kw, bh) + 4
        page.line(x, y, [amount], bh, FieldLabel.INVOICE_AMOUNT)
        y += pitch
    if y > cfg.table_zone[1]:
        raise GenerationError(f"table content ends at y={y}, beyond zone {cfg.table_zone}")

    # footer noise
    fy = cfg.footer_zone[0]
    for words in (NOISE_LINES[0], NOISE_LINES[2], NOISE_LINES[1]):
        if rng.random() < cfg.noise_rate:
            if fy + bh > cfg.footer_zone[1]:
                break
            page.line(MARGIN + 8, fy, words, bh)
            fy += pitch

    doc = Document(f"doc{index:06d}_v{vendor:05d}", cfg.page_width, cfg.page_height, page.tokens)
    return doc, GroundTruth(tuple(page.labels), tuple(li_boxes))


def generate(cfg: SynthConfig, count: int, start: int = 0) -> list[tuple[Document, GroundTruth]]:
    """``count`` documents with ground truth; document i depends only on (cfg, i)."""
    if count < 0:
        raise GenerationError("count must be non-negative")
    return [generate_one(cfg, i) for i in range(start, start + count)]


def vendor_of(doc: Document) -> int:
    return int(doc.doc_id.rsplit("_v", 1)[1])


def split(corpus: Sequence, fractions: Sequence[float] = (0.8, 0.1, 0.1), seed: int = 0):
    """Partition into (train, val, test) with vendors disjoint across parts.

    Items are Documents or (Document, GroundTruth) pairs. Sizes hit
    round(fraction * N) whenever the vendor group sizes allow it.
    """
    if len(corpus) < 3:
        raise GenerationError("need at least 3 documents to split")
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
        raise GenerationError(f"fractions must be three non-negative values summing to 1, got {fractions}")
    n = len(corpus)
    targets = [int(math.floor(f * n + 0.5)) for f in fractions[:2]]
    targets.append(n - sum(targets))
    groups: dict[int, list[int]] = {}
    for i, item in enumerate(corpus):
        doc = item[0] if isinstance(item, tuple) else item
        groups.setdefault(vendor_of(doc), []).append(i)
    keys = sorted(groups)
    rng = np.random.default_rng(seed)
    keys = [keys[i] for i in rng.permutation(len(keys))]
    parts: list[list[int]] = [[], [], []]
    for key in keys:
        members = groups[key]
        deficits = [t - len(p) for t, p in zip(targets, parts)]
        fitting = [k for k in range(3) if deficits[k] >= len(members)]
        choice = max(fitting or range(3), key=lambda k: (deficits[k], -k))
        parts[choice].extend(members)
    return tuple([corpus[i] for i in sorted(p)] for p in parts)


def audit_split(*parts) -> list[int]:
    """Vendor ids appearing in more than one part (empty when the split is clean)."""
    seen: dict[int, int] = {}
    shared = set()
    for k, part in enumerate(parts):
        for item in part:
            doc = item[0] if isinstance(item, tuple) else item
            v = vendor_of(doc)
            if seen.setdefault(v, k) != k:
                shared.add(v)
    return sorted(shared)


def write_corpus(
    out_dir: str | Path, samples: Sequence[tuple[Document, GroundTruth]], cfg: SynthConfig, fractions=(0.8, 0.1, 0.1)
) -> dict:
    """Write docs/, labels/ and manifest.json; returns the manifest."""
    out = Path(out_dir)
    (out / "docs").mkdir(parents=True, exist_ok=True)
    (out / "labels").mkdir(parents=True, exist_ok=True)
    files = []
    for doc, gt in samples:
        (out / "docs" / f"{doc.doc_id}.json").write_bytes(serialize_document(doc))
        (out / "labels" / f"{doc.doc_id}.json").write_bytes(serialize_ground_truth(gt))
        files.append(
            {"doc_id": doc.doc_id, "doc": f"docs/{doc.doc_id}.json", "labels": f"labels/{doc.doc_id}.json", "vendor": vendor_of(doc)}
        )
    train, val, test = split(list(samples), fractions, cfg.seed)
    manifest = {
        "seed": cfg.seed,
        "count": len(samples),
        "config": cfg.to_dict(),
        "files": files,
        "splits": {name: [d.doc_id for d, _ in part] for name, part in zip(("train", "val", "test"), (train, val, test))},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return manifest


def planted_synonym_corpus(seed: int = 0, sentences: int = 400, pairs=(("net", "gross"), ("street", "avenue"), ("invoice", "bill"))):
    """One-line documents in which each planted pair is interchangeable in identical contexts."""
    rng = np.random.default_rng(seed)
    contexts = {
        pair: [[f"c{k}x{j}" for j in range(4)] for k in range(3)] for pair in pairs
    }
    fillers = [f"w{k}" for k in range(60)]
    docs = []
    for s in range(sentences):
        pair = pairs[s % len(pairs)]
        word = pair[int(rng.integers(2))]
        ctx = contexts[pair][int(rng.integers(3))]
        words = [fillers[int(i)] for i in rng.integers(len(fillers), size=3)] + ctx[:2] + [word] + ctx[2:]
        words += [fillers[int(i)] for i in rng.integers(len(fillers), size=3)]
        toks = [Token(w, BBox(10 * i + 1, 10, 10 * i + 9, 20)) for i, w in enumerate(words)]
        docs.append(Document(f"syn{s:05d}", 10 * len(words) + 10, 40, toks))
    return docs
