from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bertgrid.doc_model import BBox, Document, FieldLabel, GroundTruth, Token
from bertgrid.embedder import HashEmbedder, embed_sequence
from bertgrid.grid_builder import (
    GridError,
    GridSpec,
    GridTensor,
    build_chargrid,
    build_grid,
    build_inputs,
    decode_boxes,
    encode_box,
    load_grid,
    map_box,
    rasterize_targets,
    render_rgb,
    save_grid,
    save_png,
)
from bertgrid.preprocess import Vocab, build_vocab, tokenize_document


def brute_force_grid(boxes, rows, page, spec):
    """Per-cell scan of all pieces; a cell is covered when its page-space area meets the box."""
    pw, ph = page
    out = np.zeros((spec.grid_height, spec.grid_width, spec.depth), dtype=np.float32)
    for y in range(spec.grid_height):
        cy0, cy1 = Fraction(y * ph, spec.grid_height), Fraction((y + 1) * ph, spec.grid_height)
        for x in range(spec.grid_width):
            cx0, cx1 = Fraction(x * pw, spec.grid_width), Fraction((x + 1) * pw, spec.grid_width)
            for b, row in zip(boxes, rows):
                if b.x_min < cx1 and cx0 < b.x_max and b.y_min < cy1 and cy0 < b.y_max:
                    out[y, x] = row
    return out


def test_map_box_examples():
    assert map_box(BBox(10, 20, 30, 40), (100, 100), (100, 100)) == (10, 20, 30, 40)
    assert map_box(BBox(10, 10, 30, 30), (200, 200), (100, 100)) == (5, 5, 15, 15)
    x0, _, x1, _ = map_box(BBox(17, 0, 18, 8), (64, 64), (8, 8))
    assert x1 - x0 >= 1


@given(
    st.integers(8, 300), st.integers(8, 300), st.integers(1, 64), st.integers(1, 64), st.data()
)
@settings(max_examples=200, deadline=None)
def test_map_box_monotone(pw, ph, gw, gh, data):
    x0 = data.draw(st.integers(0, pw - 1))
    x1 = data.draw(st.integers(x0 + 1, pw))
    y0 = data.draw(st.integers(0, ph - 1))
    y1 = data.draw(st.integers(y0 + 1, ph))
    outer = map_box(BBox(x0, y0, x1, y1), (pw, ph), (gw, gh))
    ix0 = data.draw(st.integers(x0, x1 - 1))
    ix1 = data.draw(st.integers(ix0 + 1, x1))
    iy0 = data.draw(st.integers(y0, y1 - 1))
    iy1 = data.draw(st.integers(iy0 + 1, y1))
    inner = map_box(BBox(ix0, iy0, ix1, iy1), (pw, ph), (gw, gh))
    assert outer[0] <= inner[0] and outer[1] <= inner[1] and inner[2] <= outer[2] and inner[3] <= outer[3]
    assert 0 <= outer[0] < outer[2] <= gw and 0 <= outer[1] < outer[3] <= gh


def test_build_grid_empty_and_single():
    spec = GridSpec(4, 4, 2)
    empty = tokenize_document(Document("e", 4, 4, []), Vocab([]))
    assert not build_grid(empty, np.zeros((0, 2)), (4, 4), spec).values.any()
    doc = Document("d", 4, 4, [Token("a", BBox(0, 0, 2, 2))])
    seq = tokenize_document(doc, Vocab(["a"]))
    t = build_grid(seq, np.array([[0.3, 0.7]], dtype=np.float32), (4, 4), spec)
    assert np.array_equal(t.values[:2, :2], np.tile(np.float32([0.3, 0.7]), (2, 2, 1)))
    t.values[:2, :2] = 0
    assert not t.values.any()


def test_build_grid_dim_mismatch():
    doc = Document("d", 4, 4, [Token("a", BBox(0, 0, 2, 2))])
    seq = tokenize_document(doc, Vocab(["a"]))
    with pytest.raises(GridError):
        build_grid(seq, np.zeros((1, 3)), (4, 4), GridSpec(4, 4, 2))
    with pytest.raises(GridError):
        build_grid(seq, np.zeros((2, 2)), (4, 4), GridSpec(4, 4, 2))


def random_word_doc(rng, page, scale=1):
    """Words on separated lines whose boxes stay separated after dividing by ``scale``."""
    pw, ph = page
    tokens = []
    y = int(rng.integers(0, 2)) * scale
    while y + 2 * scale <= ph:
        h = int(rng.integers(1, 3)) * scale
        x = int(rng.integers(0, 2)) * scale
        while True:
            w = int(rng.integers(1, 5)) * scale
            if x + w > pw:
                break
            tokens.append(Token("".join(rng.choice(list("abcxyz"), size=int(rng.integers(1, 4)))), BBox(x, y, x + w, y + h)))
            x += w + int(rng.integers(1, 3)) * scale
        y += h + int(rng.integers(1, 3)) * scale
    return Document("r", pw, ph, tokens)


@pytest.mark.parametrize("scale", [1, 2])
def test_build_grid_matches_brute_force(scale):
    rng = np.random.default_rng(scale)
    for _ in range(20):
        gw, gh = int(rng.integers(4, 17)), int(rng.integers(4, 17))
        doc = random_word_doc(rng, (gw * scale, gh * scale), scale)
        vocab = build_vocab([doc], 0, 1) if doc.tokens else Vocab([])
        seq = tokenize_document(doc, vocab)
        d = int(rng.integers(1, 6))
        emb = rng.standard_normal((len(seq), d)).astype(np.float32)
        spec = GridSpec(gh, gw, d)
        t = build_grid(seq, emb, doc.page, spec)
        assert np.array_equal(t.values, brute_force_grid([p.bbox for p in seq.pieces], emb, doc.page, spec))


def test_coverage_equals_union_of_boxes():
    rng = np.random.default_rng(9)
    doc = random_word_doc(rng, (32, 32))
    seq = tokenize_document(doc, Vocab([]))
    emb = embed_sequence(seq, HashEmbedder(6))
    t = build_grid(seq, emb, doc.page, GridSpec(32, 32, 6))
    union = np.zeros((32, 32), bool)
    for p in seq.pieces:
        x0, y0, x1, y1 = map_box(p.bbox, doc.page, (32, 32))
        union[y0:y1, x0:x1] = True
    assert np.array_equal(np.any(t.values != 0, axis=-1), union)
    assert t.collisions == 0


def test_collisions_last_writer_wins():
    doc = Document("d", 8, 8, [Token("a", BBox(0, 0, 3, 2)), Token("b", BBox(3, 0, 6, 2))])
    seq = tokenize_document(doc, Vocab(["a", "b"]))
    t = build_grid(seq, np.array([[1.0], [2.0]], np.float32), doc.page, GridSpec(2, 2, 1))
    # both map onto grid column 0 partly; piece b (later) wins shared cells
    assert t.values[0, 0, 0] == 2.0 and t.collisions == 1


def test_chargrid_example():
    doc = Document("d", 10, 10, [Token("ab", BBox(0, 0, 10, 10))])
    t = build_chargrid(doc, "ab", GridSpec(10, 10, 3))
    assert np.all(t.values[:, :5] == [1, 0, 0]) and np.all(t.values[:, 5:] == [0, 1, 0])
    assert not build_chargrid(Document("e", 10, 10, []), "ab", GridSpec(10, 10, 3)).values.any()


def test_chargrid_cells_sum_to_zero_or_one():
    rng = np.random.default_rng(3)
    doc = random_word_doc(rng, (48, 48), 2)
    t = build_chargrid(doc, "abc", GridSpec(24, 24, 4))
    assert set(np.unique(t.values.sum(axis=-1))) <= {0.0, 1.0}


def test_build_inputs_variants():
    doc = Document("d", 64, 64, [Token("total", BBox(0, 0, 30, 8)), Token("5.00", BBox(40, 0, 60, 8))])
    vocab = build_vocab([doc], 10, 1)
    emb = HashEmbedder(8)
    char, dense = GridSpec(16, 16, 54), GridSpec(16, 16, 8)
    (bg,) = build_inputs(doc, "bertgrid", vocab, emb, char, dense)
    assert bg.spec == dense
    pair = build_inputs(doc, "combined", vocab, emb, char, dense)
    assert [g.spec for g in pair] == [char, dense]
    with pytest.raises(GridError):
        build_inputs(doc, "combined", vocab, emb, char, GridSpec(8, 16, 8))
    with pytest.raises(GridError):
        build_inputs(doc, "pixels", vocab, emb, char, dense)


def test_save_load_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    t = GridTensor(GridSpec(5, 7, 3), rng.standard_normal((5, 7, 3)).astype(np.float32))
    save_grid(t, tmp_path / "g.grid")
    back = load_grid(tmp_path / "g.grid")
    assert back.spec == t.spec and back.values.tobytes() == t.values.tobytes()


def test_load_grid_errors(tmp_path):
    t = GridTensor.zeros(GridSpec(2, 2, 2))
    save_grid(t, tmp_path / "g.grid")
    raw = (tmp_path / "g.grid").read_bytes()
    (tmp_path / "t.grid").write_bytes(raw[:-1])
    with pytest.raises(GridError, match="corrupt"):
        load_grid(tmp_path / "t.grid")
    (tmp_path / "v.grid").write_bytes(raw[:4] + (2).to_bytes(4, "little") + raw[8:])
    with pytest.raises(GridError, match="unsupported"):
        load_grid(tmp_path / "v.grid")
    (tmp_path / "m.grid").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(GridError, match="magic"):
        load_grid(tmp_path / "m.grid")


def test_box_encoding_round_trip():
    hw = (16, 20)
    ys, xs = np.mgrid[2:5, 3:9]
    enc = encode_box((1.0, 2.0, 15.0, 6.0), xs + 0.5, ys + 0.5, hw)
    grid = np.zeros(hw + (4,))
    grid[2:5, 3:9] = enc
    dec = decode_boxes(grid, ys.ravel(), xs.ravel(), hw)
    np.testing.assert_allclose(dec, np.tile([1.0, 2.0, 15.0, 6.0], (len(dec), 1)), atol=1e-9)


def test_rasterize_targets():
    doc = Document("d", 64, 64, [Token("Acme", BBox(0, 0, 16, 8)), Token("3", BBox(0, 32, 8, 40)), Token("bolt", BBox(16, 32, 40, 40))])
    gt = GroundTruth(
        (FieldLabel.VENDOR_NAME, FieldLabel.LI_QUANTITY, FieldLabel.LI_DESCRIPTION), (BBox(0, 30, 48, 42),)
    )
    seq = tokenize_document(doc, Vocab([]), gt)
    t = rasterize_targets(seq, doc, gt, (8, 8))
    assert t.mask[0, 0] == FieldLabel.VENDOR_NAME and t.mask[4, 2] == FieldLabel.LI_DESCRIPTION
    assert t.valid.sum() == 4 and not t.valid[0].any()
    dec = decode_boxes(t.boxes, *np.nonzero(t.valid), (8, 8))
    np.testing.assert_allclose(dec, np.tile(map_box(BBox(0, 30, 48, 42), (64, 64), (8, 8)), (4, 1)), atol=1e-6)


def test_render(tmp_path):
    t = build_chargrid(Document("d", 16, 16, [Token("ab", BBox(0, 0, 8, 4))]), "ab", GridSpec(16, 16, 3))
    img = render_rgb(t)
    assert img.shape == (16, 16, 3) and (img[10, 10] == 255).all() and not (img[0, 0] == img[0, 6]).all()
    save_png(t, tmp_path / "g.png")
    assert (tmp_path / "g.png").stat().st_size > 0
