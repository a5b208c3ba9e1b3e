import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bertgrid.doc_model import BBox, Document, DocumentError, FieldLabel, GroundTruth, Token
from bertgrid.preprocess import (
    UNK,
    TokenSequence,
    Vocab,
    build_vocab,
    group_lines,
    serialize,
    split_box,
    tokenize_document,
    wordpiece_tokenize,
)


def tok(text, x0, y0, x1, y1):
    return Token(text, BBox(x0, y0, x1, y1))


def lines_oracle(doc, ratio):
    """Connected components of the pairwise overlap graph via BFS."""
    n = len(doc.tokens)
    adj = [[] for _ in range(n)]
    for i in range(n):
        for j in range(n):
            a, b = doc.tokens[i].bbox, doc.tokens[j].bbox
            ov = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
            if i != j and ov > 0 and ov >= ratio * min(a.height, b.height):
                adj[i].append(j)
    seen, comps = set(), []
    for s in range(n):
        if s in seen:
            continue
        comp, stack = [], [s]
        seen.add(s)
        while stack:
            u = stack.pop()
            comp.append(u)
            for v in adj[u]:
                if v not in seen:
                    seen.add(v)
                    stack.append(v)
        comps.append(sorted(comp))
    return sorted(comps)


def test_group_lines_examples():
    same = Document("d", 100, 100, [tok("a", 0, 0, 5, 10), tok("b", 10, 0, 15, 10), tok("c", 20, 0, 25, 10)])
    assert group_lines(same) == [[0, 1, 2]]
    two = Document("d", 100, 100, [tok("low", 0, 50, 5, 60), tok("top", 0, 0, 5, 10)])
    assert group_lines(two) == [[1], [0]]
    # A-B overlap 6/10, B-C overlap 6/10, A-C disjoint
    chain = Document("d", 100, 100, [tok("a", 0, 0, 5, 10), tok("b", 10, 4, 15, 14), tok("c", 20, 8, 25, 18)])
    assert lines_oracle(chain, 0.5) == [[0, 1, 2]]
    assert group_lines(chain) == [[0, 1, 2]]


@st.composite
def random_docs(draw):
    n = draw(st.integers(1, 15))
    toks = []
    for i in range(n):
        y0 = draw(st.integers(0, 80))
        toks.append(tok("w", 30 * i, y0, 30 * i + 20, y0 + draw(st.integers(2, 20))))
    return Document("r", 30 * n + 10, 120, toks)


@given(random_docs(), st.sampled_from([0.1, 0.5, 0.9]))
@settings(max_examples=200, deadline=None)
def test_group_lines_matches_closure_oracle(doc, ratio):
    assert sorted(sorted(g) for g in group_lines(doc, ratio)) == lines_oracle(doc, ratio)


@given(random_docs())
@settings(max_examples=100, deadline=None)
def test_serialize_is_permutation(doc):
    assert sorted(serialize(doc)) == list(range(len(doc.tokens)))


def test_serialize_examples():
    one_line = Document("d", 100, 20, [tok("c", 40, 0, 45, 10), tok("a", 10, 0, 15, 10), tok("b", 25, 0, 30, 10)])
    assert serialize(one_line) == [1, 2, 0]
    two = Document("d", 100, 100, [tok("x", 0, 50, 5, 60), tok("y", 50, 0, 55, 10), tok("z", 10, 0, 15, 10)])
    assert serialize(two) == [2, 1, 0]


def test_serialize_stacked_column():
    # touching boxes with equal x_min never share a line; order follows vertical centers
    doc = Document("d", 100, 100, [tok("a", 0, 2, 5, 12), tok("b", 0, 0, 5, 1), tok("c", 0, 12, 5, 14)])
    assert serialize(doc) == [1, 0, 2]


def test_wordpiece_examples():
    assert wordpiece_tokenize("Total", Vocab(["total"])) == ["total"]
    assert wordpiece_tokenize("unaffable", Vocab(["un", "##aff", "##able"])) == ["un", "##aff", "##able"]
    assert wordpiece_tokenize("zzz", Vocab(["a", "##a"])) == [UNK]
    assert wordpiece_tokenize("x" * 101, Vocab(["x", "##x"])) == [UNK]
    # a leading "##" in the word is text, not a continuation marker
    assert wordpiece_tokenize("##x", Vocab(["#", "###", "##x"])) == ["#", "###", "##x"]


def test_wordpiece_prefers_longest():
    vocab = Vocab(["u", "un", "una", "##f", "##ff", "##affable", "##a"])
    # greedy takes "una" first, then "##ff", "##a"... and fails on "b" -> [UNK]
    assert wordpiece_tokenize("unaffable", vocab) == [UNK]
    assert wordpiece_tokenize("unaff", vocab) == ["una", "##ff"]


def test_split_box_examples():
    assert split_box(BBox(0, 0, 30, 10), ["a", "##bc"]) == [BBox(0, 0, 10, 10), BBox(10, 0, 30, 10)]
    assert split_box(BBox(3, 4, 9, 8), ["word"]) == [BBox(3, 4, 9, 8)]
    assert split_box(BBox(0, 0, 3, 5), ["a", "##b", "##c"]) == [BBox(0, 0, 1, 5), BBox(1, 0, 2, 5), BBox(2, 0, 3, 5)]


def test_split_box_too_narrow_shares_last_column():
    boxes = split_box(BBox(0, 0, 2, 5), ["a", "##b", "##c", "##d"])
    assert all(b.width == 1 for b in boxes)
    assert boxes[-1] == boxes[-2] == BBox(1, 0, 2, 5)


@given(
    st.integers(0, 50),
    st.integers(1, 200),
    st.lists(st.integers(1, 12), min_size=1, max_size=10),
)
def test_split_box_partition(x0, width, lengths):
    if width < len(lengths):
        width = len(lengths)
    pieces = ["a" * lengths[0]] + ["##" + "b" * k for k in lengths[1:]]
    boxes = split_box(BBox(x0, 0, x0 + width, 7), pieces)
    assert sum(b.width for b in boxes) == width
    assert boxes[0].x_min == x0 and boxes[-1].x_max == x0 + width
    for a, b in zip(boxes, boxes[1:]):
        assert a.x_max == b.x_min
    assert all(b.width >= 1 and (b.y_min, b.y_max) == (0, 7) for b in boxes)


def test_tokenize_document_word_index():
    doc = Document("d", 200, 20, [tok("Total", 0, 0, 50, 10), tok("net", 60, 0, 90, 10)])
    vocab = Vocab(["to", "##tal", "net"])
    seq = tokenize_document(doc, vocab)
    assert seq.texts == ["to", "##tal", "net"]
    assert seq.word_index == [0, 0, 1]
    assert [p.bbox for p in seq.pieces[:2]] == [BBox(0, 0, 20, 10), BBox(20, 0, 50, 10)]
    single = tokenize_document(Document("d", 200, 20, [tok("net", 0, 0, 30, 10)]), vocab)
    assert len(single) == 1


def test_tokenize_document_labels_and_unk():
    doc = Document("d", 200, 20, [tok("ab", 0, 0, 20, 10), tok("cd", 30, 0, 50, 10)])
    gt = GroundTruth((FieldLabel.VENDOR_NAME, FieldLabel.BACKGROUND))
    seq = tokenize_document(doc, Vocab([]), gt)
    assert seq.texts == [UNK, UNK]
    assert seq.labels == [FieldLabel.VENDOR_NAME, FieldLabel.BACKGROUND]
    assert TokenSequence.from_dict(seq.to_dict()) == seq


def test_build_vocab():
    doc = Document("d", 300, 20, [tok("total", 0, 0, 50, 10), tok("Total", 60, 0, 110, 10), tok("net", 120, 0, 150, 10)])
    vocab = build_vocab([doc], max_size=10, min_freq=2)
    assert "total" in vocab and "net" not in vocab
    assert {"n", "##n", "e", "##e"} <= set(vocab.pieces)
    chars_only = build_vocab([doc], max_size=0, min_freq=1)
    assert wordpiece_tokenize("total", chars_only) == ["t", "##o", "##t", "##a", "##l"]
    assert build_vocab([doc, doc]) == build_vocab([doc, doc])
    with pytest.raises(DocumentError):
        build_vocab([])


def test_build_vocab_frequency_ties_are_lexicographic():
    words = ["bb", "aa", "cc", "aa", "bb", "cc"]
    doc = Document("d", 1000, 20, [tok(w, 20 * i, 0, 20 * i + 10, 10) for i, w in enumerate(words)])
    vocab = build_vocab([doc], max_size=2, min_freq=1)
    assert vocab.pieces[-2:] == ["aa", "bb"]


def test_vocab_file_round_trip(tmp_path):
    vocab = Vocab(["a", "##a", "hello"])
    vocab.save(tmp_path / "v.txt")
    assert Vocab.load(tmp_path / "v.txt") == vocab
    assert vocab.pieces.count(UNK) == 1
