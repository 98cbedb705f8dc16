import json

import numpy as np
import pytest

from diffnam.align import (MonophoneHMM, PhonemeTTS, dtw, durations_from_json, durations_to_json,
                           length_regulate, segmentation_loglik, train_aligner, upsample_durations,
                           viterbi_align, viterbi_segment)
from diffnam.errors import ContractError, DimensionError
from diffnam.models import Durations, PhonemeSeq
from diffnam.settings import load_config
from diffnam.synthdata import gen_corpus


def _random_hmm(rng, n_phonemes=3, dim=2):
    p_self = rng.uniform(0.2, 0.9, n_phonemes)
    return MonophoneHMM(
        means=rng.normal(size=(n_phonemes, dim)),
        variances=rng.uniform(0.5, 2.0, (n_phonemes, dim)),
        self_logp=np.log(p_self),
        exit_logp=np.log1p(-p_self),
    )


def _items(corpus, channel="whisper"):
    return [(utt.channel(channel), utt.phonemes) for utt in corpus]


def test_single_phoneme_mean_is_frame_mean(rng):
    features = rng.normal(size=(9, 3))
    hmm = train_aligner([(features, PhonemeSeq(ids=(0,), inventory_size=1))], iterations=3)
    assert np.allclose(hmm.means[0], features.mean(axis=0))
    assert viterbi_align(hmm, features, PhonemeSeq(ids=(0,), inventory_size=1)).frames == (9,)


def test_planted_means_recovered():
    config = load_config(overrides={"n_speakers": "1"})
    corpus = gen_corpus(11, 50, config=config)
    hmm = train_aligner(_items(corpus), iterations=config.aligner_iterations)
    rms = np.sqrt(((hmm.means - corpus.inventory.templates) ** 2).mean(axis=1))
    assert np.all(rms < 0.2 * config.sigma_w)


def test_planted_durations_recovered(default_corpus, config):
    items = _items(default_corpus)
    hmm = train_aligner(items, iterations=config.aligner_iterations)
    hits = total = 0
    for (features, phonemes), utt in zip(items, default_corpus):
        found = np.asarray(viterbi_align(hmm, features, phonemes).frames)
        planted = np.asarray(utt.durations.frames)
        hits += int(np.sum(np.abs(np.cumsum(found) - np.cumsum(planted)) <= 1))
        total += planted.size
    assert hits / total >= 0.9


def test_training_loglik_never_decreases(small_corpus):
    hmm = train_aligner(_items(small_corpus), iterations=8)
    history = hmm.log_likelihoods
    assert history
    assert all(b >= a - 1e-9 * max(1.0, abs(a)) for a, b in zip(history, history[1:]))


def test_training_is_deterministic(small_corpus):
    a = train_aligner(_items(small_corpus), iterations=4)
    b = train_aligner(_items(small_corpus), iterations=4)
    assert np.array_equal(a.means, b.means)
    assert np.array_equal(a.variances, b.variances)
    assert np.all(a.variances >= 1e-3)
    assert np.allclose(np.exp(a.self_logp) + np.exp(a.exit_logp), 1.0)


def test_training_contracts(rng):
    with pytest.raises(ContractError):
        train_aligner([])
    with pytest.raises(ContractError):
        train_aligner([(rng.normal(size=(1, 2)), PhonemeSeq(ids=(0, 1), inventory_size=2))])


def test_viterbi_matches_exhaustive_segmentations(rng):
    for _ in range(20):
        hmm = _random_hmm(rng, n_phonemes=2)
        features = rng.normal(size=(6, 2))
        phonemes = PhonemeSeq(ids=(0, 1), inventory_size=2)
        candidates = [Durations(frames=(d, 6 - d)) for d in range(1, 6)]
        scores = [segmentation_loglik(hmm, features, phonemes, c) for c in candidates]
        durations, total = viterbi_segment(hmm, features, phonemes)
        assert total == pytest.approx(max(scores), abs=1e-9)
        assert durations == candidates[int(np.argmax(scores))]


def test_viterbi_output_is_always_valid(rng):
    for _ in range(1000):
        hmm = _random_hmm(rng)
        n = int(rng.integers(1, 5))
        phonemes = PhonemeSeq(ids=tuple(int(i) for i in rng.integers(0, 3, n)), inventory_size=3)
        features = rng.normal(size=(n + int(rng.integers(0, 8)), 2))
        durations = viterbi_align(hmm, features, phonemes)
        assert len(durations) == n
        assert durations.total == features.shape[0]
        assert min(durations.frames) >= 1


def test_viterbi_rejects_too_few_frames(rng):
    with pytest.raises(ContractError):
        viterbi_align(_random_hmm(rng), rng.normal(size=(2, 2)), PhonemeSeq(ids=(0, 1, 2), inventory_size=3))


def test_hmm_checkpoint_round_trip(rng, tmp_path):
    hmm = _random_hmm(rng)
    hmm.save(tmp_path / "aligner.namc", {"channel": "nam"})
    loaded = MonophoneHMM.load(tmp_path / "aligner.namc")
    assert np.array_equal(loaded.means, hmm.means)
    assert np.array_equal(loaded.exit_logp, hmm.exit_logp)


def _all_paths(rows, cols):
    def walk(i, j):
        if (i, j) == (rows - 1, cols - 1):
            yield [(i, j)]
            return
        for di, dj in ((1, 0), (0, 1), (1, 1)):
            if i + di < rows and j + dj < cols:
                for rest in walk(i + di, j + dj):
                    yield [(i, j)] + rest
    return list(walk(0, 0))


def test_dtw_matches_exhaustive_paths(rng):
    for _ in range(30):
        a = rng.normal(size=(int(rng.integers(1, 6)), 2))
        b = rng.normal(size=(int(rng.integers(1, 6)), 2))
        local = np.linalg.norm(a[:, None] - b[None], axis=2)
        best = min(sum(local[i, j] for i, j in path) for path in _all_paths(len(a), len(b)))
        result = dtw(a, b)
        assert result.cost == pytest.approx(best, abs=1e-12)
        assert result.pairs[-1] == (len(a) - 1, len(b) - 1)
        assert sum(local[i, j] for i, j in result.pairs) == pytest.approx(result.cost, abs=1e-12)


def test_dtw_identical_sequences_walk_the_diagonal(rng):
    a = rng.normal(size=(7, 3))
    result = dtw(a, a)
    assert result.cost == 0.0
    assert result.pairs == tuple((i, i) for i in range(7))


def test_dtw_is_symmetric_and_beats_diagonal(rng):
    a, b = rng.normal(size=(6, 3)), rng.normal(size=(6, 3))
    assert dtw(a, b).cost == pytest.approx(dtw(b, a).cost)
    assert dtw(a, b).cost <= np.linalg.norm(a - b, axis=1).sum() + 1e-12


def test_dtw_rejects_dimension_mismatch(rng):
    with pytest.raises(DimensionError):
        dtw(rng.normal(size=(3, 2)), rng.normal(size=(3, 4)))


def test_dtw_uses_the_requested_distance(rng):
    for _ in range(10):
        a = rng.normal(size=(int(rng.integers(1, 5)), 3))
        b = rng.normal(size=(int(rng.integers(1, 5)), 3))
        local = np.abs(a[:, None] - b[None]).sum(axis=2)
        best = min(sum(local[i, j] for i, j in path) for path in _all_paths(len(a), len(b)))
        assert dtw(a, b, distance="cityblock").cost == pytest.approx(best, abs=1e-12)
    with pytest.raises(ContractError):
        dtw(rng.normal(size=(3, 2)), rng.normal(size=(3, 2)), distance="nonsense")


def test_upsample_durations(rng):
    assert upsample_durations(Durations(frames=(3, 1, 4))).frames == (6, 2, 8)
    assert upsample_durations(Durations(frames=(3, 1, 4)), 1).frames == (3, 1, 4)
    d = Durations(frames=tuple(int(x) for x in rng.integers(1, 9, 20)))
    assert upsample_durations(d, 3).total == 3 * d.total
    assert upsample_durations(d).frame_rate == 100.0
    with pytest.raises(ContractError):
        upsample_durations(d, 0)


def test_length_regulate():
    e = np.array([[1.0, 0.0], [0.0, 1.0]])
    out = length_regulate(e, Durations(frames=(2, 3)))
    assert np.array_equal(out, e[[0, 0, 1, 1, 1]])
    assert np.array_equal(length_regulate(e, Durations(frames=(1, 1))), e)
    with pytest.raises(DimensionError):
        length_regulate(e, Durations(frames=(1, 1, 1)))


def test_length_regulate_inverts_by_group_average(rng):
    x = rng.normal(size=(5, 3))
    d = Durations(frames=(2, 1, 4, 3, 1))
    out = length_regulate(x, d)
    bounds = np.cumsum((0,) + d.frames)
    recovered = np.array([out[s:e].mean(axis=0) for s, e in zip(bounds, bounds[1:])])
    assert np.allclose(recovered, x)


def test_durations_json_round_trip():
    phonemes = PhonemeSeq(ids=(2, 0, 1), inventory_size=3)
    durations = Durations(frames=(4, 5, 6))
    text = durations_to_json(phonemes, durations)
    assert json.loads(text) == {"phonemes": [2, 0, 1], "durations": [4, 5, 6], "frame_rate": 50.0}
    assert durations_from_json(text, 3) == (phonemes, durations)
    with pytest.raises(ContractError):
        durations_from_json(json.dumps({"phonemes": [0], "durations": [1, 2]}), 3)


def test_phoneme_tts_reproduces_planted_frames(rng):
    table = rng.normal(size=(4, 6))
    phonemes = PhonemeSeq(ids=(0, 2, 1, 3), inventory_size=4)
    durations = Durations(frames=(3, 2, 5, 1))
    frames = length_regulate(table[list(phonemes.ids)], durations)
    tts = PhonemeTTS.fit([(frames, phonemes, durations)], n_phonemes=4)
    assert np.allclose(tts.table, table)
    assert np.allclose(tts.synthesize(phonemes, durations), frames)
    with pytest.raises(DimensionError):
        PhonemeTTS.fit([(frames[:-1], phonemes, durations)], n_phonemes=4)
