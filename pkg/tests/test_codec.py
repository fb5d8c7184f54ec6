import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vqarch.codec import (
    ParseError,
    Vocabulary,
    build_corpus,
    make_fill_example,
    mask_sequence,
    merge_fill,
    parse_sequence,
    read_corpus,
    sentinel_index,
    to_sentence,
    write_corpus,
)


def test_to_sentence_example():
    assert to_sentence([81, 19, 44, 283, 8, 4, 232]) == "81 19 44 283 8 4 232"
    assert to_sentence([0] * 7) == "0 0 0 0 0 0 0"


def test_parse_examples():
    assert parse_sequence("81 19 44 283 8 4 232", 7, 512) == (81, 19, 44, 283, 8, 4, 232)
    err = parse_sequence("81 19 44", 7, 512)
    assert isinstance(err, ParseError) and err.kind == "wrong_length"
    err = parse_sequence("81 19 44 283 8 4 900", 7, 512)
    assert isinstance(err, ParseError) and err.kind == "out_of_range"
    err = parse_sequence("81 19 44 [tok-0] 8 4 2", 7, 512)
    assert err.kind == "non_numeric"
    assert parse_sequence("81 -1 44 3 8 4 2", 7, 512).kind == "non_numeric"
    assert parse_sequence("", 7, 512).kind == "wrong_length"


def test_fill_example_from_text():
    ex = mask_sequence([81, 36, 71, 36, 70, 465, 150], [3, 5])
    assert ex.input_text == "fill: 81 36 71 [tok-0] 70 [tok-1] 150"
    assert ex.target_text == "[tok-0] 36 [tok-1] 465"
    assert merge_fill(ex.input_text, ex.target_text, 7, 512) == (81, 36, 71, 36, 70, 465, 150)


def test_merge_missing_sentinel():
    res = merge_fill("fill: 81 36 71 [tok-0] 70 [tok-1] 150", "[tok-0] 36", 7, 512)
    assert isinstance(res, ParseError)


def test_merge_reordered_sentinels_rejected():
    res = merge_fill("fill: 81 36 71 [tok-0] 70 [tok-1] 150", "[tok-1] 465 [tok-0] 36", 7, 512)
    assert isinstance(res, ParseError)


def test_merge_degenerate():
    assert merge_fill("fill: 1 2 3 4 5 6 7", "", 7, 512) == (1, 2, 3, 4, 5, 6, 7)


def test_mask_count_upper_bound():
    class Forced:
        def integers(self, lo, hi):
            return hi - 1

        def choice(self, n, size, replace):
            return np.random.default_rng(0).choice(n, size=size, replace=replace)

    ex = make_fill_example([5, 6, 7, 8, 9, 10, 11], Forced())
    body = ex.input_text.split()[1:]
    assert sum(sentinel_index(t) is None for t in body) == 1
    assert len(ex.mask_positions) == 6


def test_mask_count_distribution_covers_range():
    rng = np.random.default_rng(0)
    counts = {len(make_fill_example(list(range(8)), rng).mask_positions) for _ in range(500)}
    assert counts == set(range(1, 8))


def test_sentence_round_trip_random():
    rng = np.random.default_rng(1)
    for _ in range(1000):
        s = tuple(int(v) for v in rng.integers(0, 512, size=7))
        assert parse_sequence(to_sentence(s), 7, 512) == s


def test_fill_round_trip_random():
    rng = np.random.default_rng(2)
    for _ in range(1000):
        s = tuple(int(v) for v in rng.integers(0, 512, size=8))
        ex = make_fill_example(s, rng)
        assert merge_fill(ex.input_text, ex.target_text, 8, 512) == s


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(0, 511), min_size=2, max_size=8), st.integers(0, 2**32 - 1))
def test_sentinels_gapless_ascending(seq, seed):
    ex = make_fill_example(seq, np.random.default_rng(seed))
    found = [sentinel_index(t) for t in ex.input_text.split() if sentinel_index(t) is not None]
    assert found == list(range(len(ex.mask_positions)))
    tgt = ex.target_text.split()
    assert [sentinel_index(t) for t in tgt[::2]] == found
    assert ex.input_text.startswith("fill: ")


def test_corpus_io(tmp_path):
    corpus = build_corpus([(1, 2, 3), (4, 5, 6)], seed=0, fills_per_sequence=2)
    assert [ex.task for ex in corpus] == ["generate", "fill", "fill"] * 2
    assert corpus[0].input == "generate: " and corpus[0].target == "1 2 3"
    path = tmp_path / "corpus.jsonl"
    write_corpus(path, corpus)
    assert read_corpus(path) == corpus


def test_vocabulary():
    vocab = Vocabulary(512, 7)
    assert len(vocab) == 512 + 7 + 2 + 2
    ids = vocab.encode("fill: 81 [tok-0] 3", add_eos=True)
    assert vocab.decode(ids) == "fill: 81 [tok-0] 3"
    with pytest.raises(ValueError):
        vocab.encode("81 512")
