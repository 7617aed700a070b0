import pytest
from hypothesis import given, settings, strategies as st

from radgen.exceptions import ConfigError, DataError, VocabRangeError
from radgen.text import BOS, EOS, PAD, UNK, Vocab, build_vocab, decode, encode, normalize, pad, tokenize


@pytest.mark.parametrize("raw, expected", [
    ("The cat, sat.", "the cat sat"),
    ("X-ray  shows 2 nodules", "x-ray shows num nodules"),
    ("", ""),
    ("T12-L1 level", "t num l num level"),
    ("  -- dash -leading trailing- ", "dash leading trailing"),
    ("size 3.5cm", "size num num cm"),
])
def test_normalize(raw, expected):
    assert normalize(raw) == expected


def test_threshold_maps_rare_to_unk():
    vocab = build_vocab(["a b", "a"], min_freq=2)
    assert vocab.tokens == ["a"]
    assert vocab.id_of("b") == UNK


def test_count_then_lexicographic_order():
    vocab = build_vocab(["a b", "a b"], min_freq=1)
    assert (vocab.id_of("a"), vocab.id_of("b")) == (4, 5)
    vocab = build_vocab(["z y y x x x"], min_freq=1)
    assert vocab.tokens == ["x", "y", "z"]


def test_empty_corpus_is_valid():
    assert len(build_vocab([], 1)) == 4


def test_bad_min_freq():
    with pytest.raises(ConfigError):
        build_vocab(["a"], 0)


def test_encode_decode_examples():
    vocab = Vocab(["a"])
    assert encode("a", vocab, 8) == [BOS, 4, EOS]
    assert decode([BOS, 4, EOS], vocab) == "a"


def test_truncation_keeps_max_len_minus_two():
    vocab = Vocab(["w"])
    ids = encode(" ".join(["w"] * 100), vocab, 10)
    assert len(ids) == 10 and ids[0] == BOS and ids[-1] == EOS and ids[1:-1] == [4] * 8


def test_encode_needs_room():
    with pytest.raises(ConfigError):
        encode("a", Vocab(["a"]), 1)


def test_decode_unknown_id():
    with pytest.raises(VocabRangeError):
        decode([BOS, 99, EOS], Vocab(["a"]))


def test_decode_stops_at_eos_and_drops_padding():
    vocab = Vocab(["a", "b"])
    assert decode([BOS, 4, PAD, EOS, 5], vocab) == "a"


def test_pad():
    assert pad([1, 4, 2], 5) == [1, 4, 2, 0, 0]
    with pytest.raises(ConfigError):
        pad([1, 2, 3], 2)


def test_vocab_file_round_trip(tmp_path):
    vocab = build_vocab(["the lungs are clear", "the heart is normal"], 1)
    path = tmp_path / "vocab.txt"
    vocab.save(path)
    lines = path.read_text().splitlines()
    assert lines[0] == vocab.token_of(4)  # line number = id - 4
    assert Vocab.load(path) == vocab
    assert Vocab.load(path).digest() == vocab.digest()


def test_malformed_vocab_file(tmp_path):
    path = tmp_path / "vocab.txt"
    path.write_text("a\n\nb\n")
    with pytest.raises(DataError):
        Vocab.load(path)


words = st.text(alphabet="abcdefgh -,.0123", max_size=40)


@settings(max_examples=100, deadline=None)
@given(st.lists(words, min_size=1, max_size=5))
def test_round_trip_with_min_freq_one(corpus):
    vocab = build_vocab(corpus, 1)
    for text in corpus:
        n = len(tokenize(text))
        assert decode(encode(text, vocab, n + 2), vocab) == normalize(text)


@settings(max_examples=50, deadline=None)
@given(st.lists(words, max_size=6))
def test_build_is_deterministic(corpus):
    assert build_vocab(corpus, 1).itos == build_vocab(list(corpus), 1).itos


@settings(max_examples=50, deadline=None)
@given(words, st.integers(2, 12))
def test_sequences_are_wrapped(text, max_len):
    ids = encode(text, build_vocab([text], 1), max_len)
    assert ids[0] == BOS and ids[-1] == EOS and len(ids) <= max_len
    assert PAD not in ids
