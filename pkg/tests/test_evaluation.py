import itertools
from functools import lru_cache

import pytest

from diffnam.errors import ContractError
from diffnam.evaluation import (cer, corpus_error_rates, edit_distance, normalize_transcript,
                                utterance_error_rates, wer)


def levenshtein(a, b):
    @lru_cache(maxsize=None)
    def go(i, j):
        if i == 0 or j == 0:
            return i + j
        return min(go(i - 1, j) + 1, go(i, j - 1) + 1, go(i - 1, j - 1) + (a[i - 1] != b[j - 1]))
    return go(len(a), len(b))


def test_identical_sequences():
    assert edit_distance("abc", "abc") == (0, 0, 0, 0)


def test_single_substitution():
    assert edit_distance("a b c".split(), "a x c".split()) == (1, 1, 0, 0)


def test_matches_recursive_definition(rng):
    for _ in range(300):
        a = list(rng.integers(0, 3, size=int(rng.integers(0, 7))))
        b = list(rng.integers(0, 3, size=int(rng.integers(0, 7))))
        dist, subs, ins, dels = edit_distance(a, b)
        assert dist == levenshtein(tuple(a), tuple(b))
        assert subs + ins + dels == dist


def test_operation_counts():
    assert edit_distance("ab", "") == (2, 0, 0, 2)
    assert edit_distance("", "ab") == (2, 0, 2, 0)


def test_metric_properties(rng):
    words = [list(rng.integers(0, 3, size=int(rng.integers(0, 6)))) for _ in range(12)]
    for a, b, c in itertools.product(words[:6], words[3:9], words[6:]):
        ab, ba = edit_distance(a, b)[0], edit_distance(b, a)[0]
        assert ab == ba
        assert edit_distance(a, c)[0] <= ab + edit_distance(b, c)[0]


def test_word_error_rates():
    assert wer("the cat sat down", "the cat sat down") == 0.0
    assert wer("the cat sat down", "") == 100.0
    assert wer("the cat sat down", "the cat sat down " + "x " * 8) == 200.0
    assert wer("a b c d", "a x c d") == 25.0


def test_character_error_rate():
    assert cer("ab cd", "abcd") == 0.0
    assert cer("abcd", "abed") == 25.0


def test_normalisation():
    assert normalize_transcript("  Hello,   WORLD!  ") == "hello world"
    assert wer("Hello, world.", "hello world") == 0.0


def test_empty_reference_rejected():
    with pytest.raises(ContractError):
        wer("", "a")
    with pytest.raises(ContractError):
        cer("...", "a")


def test_utterance_record():
    rates = utterance_error_rates("a b", "a c", utt_id="u1")
    assert (rates.wer, rates.n, rates.utt_id) == (50.0, 1, "u1")


def test_corpus_rates_pool_over_reference_length():
    rates = corpus_error_rates([("a b c d", "a b c d"), ("e f", "")])
    assert rates.wer == pytest.approx(100.0 * 2 / 6)
    assert rates.n == 2
    with pytest.raises(ContractError):
        corpus_error_rates([])
