import numpy as np
import pytest

from graphmem.corpus import (
    ByteTokenizer,
    SplitSpec,
    TokenWindowStream,
    get_window,
    load_stream,
    load_tokenizer,
    read_documents,
    save_stream,
    split_documents,
    tokenize_documents,
    window_count,
)
from graphmem.errors import ConfigurationError, DomainError


def test_byte_tokenizer_basics():
    tok = ByteTokenizer()
    stream = tokenize_documents(["A"], tok)
    assert stream.ids.tolist() == [65, 256]
    assert tokenize_documents(["", ""], tok).ids.tolist() == [256, 256]
    assert tokenize_documents(["ab", "c"], tok).ids.tolist() == [97, 98, 256, 99, 256]


def test_byte_roundtrip():
    tok = ByteTokenizer()
    for doc in ("hello world", "caffè", "", "line\nbreaks\tand spaces"):
        assert tok.decode(tok.encode(doc)) == doc


def test_tokenizer_id_overflow_rejected():
    class Wide:
        name = "wide"
        vocab_size = 2 ** 16 + 1
        eot_id = 2 ** 16

        def encode(self, text):
            return [0]

        def decode(self, ids):
            return ""

    with pytest.raises(ConfigurationError):
        tokenize_documents(["x"], Wide())


def test_load_tokenizer_spec():
    assert load_tokenizer("byte").name == "byte"
    with pytest.raises(ConfigurationError):
        load_tokenizer("nonsense")


def test_split_rules():
    docs = [f"d{i}" for i in range(100)]
    train, val = split_documents(docs, SplitSpec(0.95))
    assert (len(train), len(val)) == (95, 5)
    train, val = split_documents(["a", "b"], SplitSpec(0.5))
    assert (len(train), len(val)) == (1, 1)
    train, val = split_documents([f"d{i}" for i in range(21)], SplitSpec(0.95))
    assert (len(train), len(val)) == (19, 2)


def test_split_preserves_order_deterministically():
    docs = [f"doc {i}" for i in range(10)]
    train, val = split_documents(docs, SplitSpec(0.8))
    assert train == docs[:8] and val == docs[8:]


def test_split_empty_side_rejected():
    with pytest.raises(ConfigurationError):
        split_documents(["a", "b"], SplitSpec(0.4999999))  # floor -> 0
    with pytest.raises(ConfigurationError):
        split_documents(["a"], SplitSpec(0.5))


def test_window_count_formula():
    def stream_of(n):
        return TokenWindowStream(ids=np.zeros(n, dtype=np.uint16), vocab_size=257,
                                 eot_id=256, tokenizer_name="byte")

    assert window_count(stream_of(2049), 1024) == 2
    assert window_count(stream_of(1024), 1024) == 0
    assert window_count(stream_of(1), 7) == 0


def test_get_window_shift_and_nonoverlap():
    stream = TokenWindowStream(ids=np.arange(10, dtype=np.uint16), vocab_size=257,
                               eot_id=256, tokenizer_name="byte")
    x0, y0 = get_window(stream, 0, 4)
    assert x0.tolist() == [0, 1, 2, 3] and y0.tolist() == [1, 2, 3, 4]
    x1, y1 = get_window(stream, 1, 4)
    assert x1.tolist() == [4, 5, 6, 7] and y1.tolist() == [5, 6, 7, 8]
    assert set(x0.tolist()).isdisjoint(x1.tolist())
    with pytest.raises(DomainError):
        get_window(stream, 2, 4)


def test_target_is_shifted_input_property(rng):
    ids = rng.integers(0, 257, size=300).astype(np.uint16)
    stream = TokenWindowStream(ids=ids, vocab_size=257, eot_id=256,
                               tokenizer_name="byte")
    t = 16
    for i in range(window_count(stream, t)):
        x, y = get_window(stream, i, t)
        np.testing.assert_array_equal(y[:-1], x[1:])
        assert y[-1] == ids[i * t + t]


def test_stream_file_roundtrip(tmp_path, rng):
    ids = rng.integers(0, 257, size=513).astype(np.uint16)
    stream = TokenWindowStream(ids=ids, vocab_size=257, eot_id=256,
                               tokenizer_name="byte")
    base = tmp_path / "corpus.train"
    save_stream(stream, base)
    loaded = load_stream(base)
    np.testing.assert_array_equal(loaded.ids, ids)
    assert loaded.vocab_size == 257 and loaded.eot_id == 256
    assert loaded.tokenizer_name == "byte"
    # manifest disagreement is an error
    (tmp_path / "corpus.train.json").write_text(
        '{"vocab_size": 257, "eot_id": 256, "token_count": 1, "tokenizer_name": "byte"}')
    with pytest.raises(ConfigurationError):
        load_stream(base)


def test_stream_rejects_out_of_vocab():
    with pytest.raises(ConfigurationError):
        TokenWindowStream(ids=np.array([300], dtype=np.uint16), vocab_size=257,
                          eot_id=256, tokenizer_name="byte")


def test_read_documents_modes(tmp_path):
    (tmp_path / "b.txt").write_text("second file")
    (tmp_path / "a.txt").write_text("first block\n\nsecond block\n\n")
    by_file = read_documents(tmp_path, doc_mode="file")
    assert by_file == ["first block\n\nsecond block\n\n", "second file"]
    by_block = read_documents(tmp_path, doc_mode="block")
    assert by_block == ["first block", "second block", "second file"]
    with pytest.raises(ConfigurationError):
        read_documents(tmp_path / "missing")
