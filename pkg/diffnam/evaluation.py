"""Word and character error rates over decoded transcripts."""

import re
import string
from typing import List, Sequence, Tuple

import numpy as np
import structlog

from .errors import ContractError
from .models import ErrorRates

logger = structlog.get_logger()

_PUNCTUATION = re.compile(f"[{re.escape(string.punctuation)}]")


def normalize_transcript(text: str) -> str:
    """Lowercase, strip punctuation, collapse whitespace."""
    return " ".join(_PUNCTUATION.sub(" ", text.lower()).split())


def edit_distance(a: Sequence, b: Sequence) -> Tuple[int, int, int, int]:
    """Levenshtein distance turning reference `a` into hypothesis `b`.

    Returns (distance, substitutions, insertions, deletions); the counts come
    from one minimal alignment and always sum to the distance.
    """
    n, m = len(a), len(b)
    cost = np.zeros((n + 1, m + 1), dtype=np.int64)
    cost[:, 0] = np.arange(n + 1)
    cost[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            cost[i, j] = min(
                cost[i - 1, j - 1] + (a[i - 1] != b[j - 1]),
                cost[i - 1, j] + 1,
                cost[i, j - 1] + 1,
            )

    subs = ins = dels = 0
    i, j = n, m
    while i or j:
        if i and j and cost[i, j] == cost[i - 1, j - 1] + (a[i - 1] != b[j - 1]):
            subs += int(a[i - 1] != b[j - 1])
            i, j = i - 1, j - 1
        elif i and cost[i, j] == cost[i - 1, j] + 1:
            dels += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return int(cost[n, m]), subs, ins, dels


def _rate(ref: List, hyp: List, unit: str) -> float:
    if not ref:
        raise ContractError(f"{unit} error rate needs a non-empty reference")
    return 100.0 * edit_distance(ref, hyp)[0] / len(ref)


def words(text: str) -> List[str]:
    return normalize_transcript(text).split()


def characters(text: str) -> List[str]:
    return list(normalize_transcript(text).replace(" ", ""))


def wer(ref: str, hyp: str) -> float:
    """Word error rate in percent; may exceed 100."""
    return _rate(words(ref), words(hyp), "word")


def cer(ref: str, hyp: str) -> float:
    return _rate(characters(ref), characters(hyp), "character")


def utterance_error_rates(ref: str, hyp: str, utt_id: str = "") -> ErrorRates:
    return ErrorRates(wer=wer(ref, hyp), cer=cer(ref, hyp), n=1, utt_id=utt_id or None)


def corpus_error_rates(pairs: Sequence[Tuple[str, str]]) -> ErrorRates:
    """Pooled rates: summed distances over summed reference lengths."""
    if not pairs:
        raise ContractError("corpus error rates need at least one utterance")
    word_err = word_len = char_err = char_len = 0
    for ref, hyp in pairs:
        ref_words, ref_chars = words(ref), characters(ref)
        if not ref_words:
            raise ContractError("corpus contains an empty reference transcript")
        word_err += edit_distance(ref_words, words(hyp))[0]
        char_err += edit_distance(ref_chars, characters(hyp))[0]
        word_len += len(ref_words)
        char_len += len(ref_chars)
    rates = ErrorRates(wer=100.0 * word_err / word_len, cer=100.0 * char_err / char_len, n=len(pairs))
    logger.info("error_rates", wer=rates.wer, cer=rates.cer, n=rates.n)
    return rates
