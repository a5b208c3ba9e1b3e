import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bertgrid.doc_model import BBox, Document, Token
from bertgrid.embedder import (
    DEFAULT_ALPHABET,
    ContextMixer,
    EmbeddingError,
    EmbeddingTable,
    ExternalEmbedder,
    HashEmbedder,
    TableEmbedder,
    char_onehot,
    context_mix,
    cosine,
    embed_sequence,
    hash_embed,
    load_external_vectors,
    read_matrix,
    train_word2vec,
    write_matrix,
)
from bertgrid.preprocess import Vocab, build_vocab, tokenize_document


def seq_of(words, vocab=None):
    doc = Document("s", 20 * len(words) + 10, 20, [Token(w, BBox(20 * i, 0, 20 * i + 15, 10)) for i, w in enumerate(words)])
    vocab = vocab or Vocab(sorted(set(words)))
    return tokenize_document(doc, vocab)


def test_char_onehot():
    assert char_onehot("b", "abc").tolist() == [0, 1, 0, 0]
    assert char_onehot("€", "abc").tolist() == [0, 0, 0, 1]
    assert len(DEFAULT_ALPHABET) + 1 == 54


@given(st.characters())
def test_char_onehot_sums_to_one(ch):
    assert char_onehot(ch).sum() == 1


def test_hash_embed_properties():
    a1 = hash_embed("total", 32, seed=3)
    assert np.array_equal(a1, hash_embed("total", 32, seed=3))
    assert not np.array_equal(a1, hash_embed("total", 32, seed=4))
    assert abs(np.linalg.norm(a1) - 1) < 1e-6
    assert abs(cosine(hash_embed("a", 64), hash_embed("b", 64))) < 0.5


@given(st.text(min_size=1, max_size=10), st.integers(1, 128), st.integers(0, 2**31))
@settings(max_examples=50)
def test_hash_embed_unit_norm(piece, d, seed):
    assert abs(np.linalg.norm(hash_embed(piece, d, seed)) - 1) < 1e-6


def test_hash_cosines_are_small_on_average():
    rng = np.random.default_rng(0)
    words = [f"w{i}" for i in range(200)]
    vals = [abs(cosine(hash_embed(words[i], 64), hash_embed(words[j], 64))) for i, j in rng.integers(200, size=(300, 2)) if i != j]
    # |cos| of random unit vectors in 64-d has std ~ 1/8
    assert np.mean(np.array(vals) < 0.5) > 0.99


def test_static_embedder_repeats_and_permutation():
    seq = seq_of(["total", "net", "total"])
    emb = embed_sequence(seq, HashEmbedder(16, seed=1))
    assert np.array_equal(emb[0], emb[2])
    rev = embed_sequence(seq_of(["total", "total", "net"]), HashEmbedder(16, seed=1))
    # permuting the sequence permutes the rows the same way
    assert np.array_equal(rev, emb[[0, 2, 1]])


def test_context_mix_examples():
    rng = np.random.default_rng(0)
    rows = rng.standard_normal((3, 4)).astype(np.float32)
    assert np.array_equal(context_mix(rows, 1, 0.0), rows)
    assert np.array_equal(context_mix(rows[:1], 2, 0.7), rows[:1])
    mixed = context_mix(rows, 1, 1.0)
    np.testing.assert_allclose(mixed[1], (rows[0] + rows[2]) / 2, rtol=1e-6)
    np.testing.assert_allclose(mixed[0], rows[1], rtol=1e-6)


def test_context_mix_matches_direct_formula():
    rng = np.random.default_rng(1)
    rows = rng.standard_normal((9, 5))
    window, alpha = 2, 0.3
    out = context_mix(rows, window, alpha)
    for j in range(9):
        nb = [rows[k] for k in range(max(0, j - window), min(9, j + window + 1)) if k != j]
        np.testing.assert_allclose(out[j], (1 - alpha) * rows[j] + alpha * np.mean(nb, axis=0), atol=1e-12)


def test_context_mixer_is_contextual():
    seq = seq_of(["a", "total", "b", "c", "total", "d"])
    emb = embed_sequence(seq, ContextMixer(HashEmbedder(16), window=1, alpha=0.5))
    assert not np.allclose(emb[1], emb[4])
    static = embed_sequence(seq, HashEmbedder(16))
    np.testing.assert_allclose(emb[1], 0.5 * static[1] + 0.25 * (static[0] + static[2]), rtol=1e-5)


def test_context_mix_rejects_bad_args():
    with pytest.raises(EmbeddingError):
        context_mix(np.zeros((3, 2)), 0, 0.5)
    with pytest.raises(EmbeddingError):
        context_mix(np.zeros((3, 2)), 1, 1.5)


def test_external_vectors(tmp_path):
    seq = seq_of(["a", "b", "c"])
    mat = np.arange(12, dtype=np.float32).reshape(3, 4) / 7
    write_matrix(tmp_path / "v.embd", mat)
    got = load_external_vectors(tmp_path / "v.embd", seq, 4)
    assert got.shape == (3, 4) and np.array_equal(got, mat)
    assert np.array_equal(embed_sequence(seq, ExternalEmbedder(tmp_path / "v.embd", 4)), mat)
    write_matrix(tmp_path / "short.embd", mat[:2])
    with pytest.raises(EmbeddingError, match="expected 3 rows"):
        load_external_vectors(tmp_path / "short.embd", seq, 4)
    with pytest.raises(EmbeddingError, match="expected dim 5"):
        load_external_vectors(tmp_path / "v.embd", seq, 5)


def test_text_matrix_variant(tmp_path):
    (tmp_path / "v.txt").write_text("1 2 3\n4 5 6\n")
    assert read_matrix(tmp_path / "v.txt").tolist() == [[1, 2, 3], [4, 5, 6]]


def test_embd_file_errors(tmp_path):
    mat = np.ones((2, 3), dtype=np.float32)
    write_matrix(tmp_path / "m.embd", mat)
    raw = (tmp_path / "m.embd").read_bytes()
    (tmp_path / "trunc.embd").write_bytes(raw[:-4])
    with pytest.raises(EmbeddingError):
        read_matrix(tmp_path / "trunc.embd")
    (tmp_path / "ver.embd").write_bytes(raw[:4] + (2).to_bytes(4, "little") + raw[8:])
    with pytest.raises(EmbeddingError, match="version"):
        read_matrix(tmp_path / "ver.embd")


def test_table_embedder_uses_ids():
    vocab = Vocab(["a", "b"])
    table = EmbeddingTable(np.arange(len(vocab) * 2, dtype=np.float32).reshape(-1, 2))
    seq = seq_of(["b", "a"], vocab)
    assert embed_sequence(seq, TableEmbedder(table)).tolist() == [table.rows[vocab.index["b"]].tolist(), table.rows[vocab.index["a"]].tolist()]


def _w2v_corpus():
    from bertgrid.synth import planted_synonym_corpus

    docs = planted_synonym_corpus(seed=0, sentences=300)
    vocab = build_vocab(docs, max_size=500, min_freq=1)
    return vocab, [tokenize_document(d, vocab) for d in docs]


def test_word2vec_epochs_zero_is_init_and_deterministic():
    vocab, seqs = _w2v_corpus()
    a = train_word2vec(seqs, len(vocab), d=8, epochs=0, seed=5)
    b = train_word2vec(seqs, len(vocab), d=8, epochs=0, seed=5)
    rng = np.random.default_rng(5)
    init = ((rng.random((len(vocab), 8)) - 0.5) / 8).astype(np.float32)
    assert np.array_equal(a.rows, init) and np.array_equal(a.rows, b.rows)
    c = train_word2vec(seqs, len(vocab), d=8, epochs=2, seed=5)
    d = train_word2vec(seqs, len(vocab), d=8, epochs=2, seed=5)
    assert np.array_equal(c.rows, d.rows)


def test_word2vec_loss_mostly_decreases():
    vocab, seqs = _w2v_corpus()
    table = train_word2vec(seqs, len(vocab), d=16, epochs=6, seed=0)
    losses = table.losses
    assert len(losses) == 6
    for prev, cur in zip(losses, losses[1:]):
        assert cur <= prev * 1.05
    assert losses[-1] < losses[0]


def test_word2vec_planted_pair_beats_random_pairs():
    vocab, seqs = _w2v_corpus()
    table = train_word2vec(seqs, len(vocab), d=16, epochs=8, seed=0)
    vec = lambda w: table.rows[vocab.index[w]]
    rng = np.random.default_rng(1)
    ids = [vocab.index[p] for p in vocab.pieces[2:]]
    rand = np.mean([cosine(table.rows[a], table.rows[b]) for a, b in rng.choice(ids, size=(300, 2)) if a != b])
    assert cosine(vec("net"), vec("gross")) > rand


def test_word2vec_rejects_empty():
    with pytest.raises(EmbeddingError):
        train_word2vec([], 10)
