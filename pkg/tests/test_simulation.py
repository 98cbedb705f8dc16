import numpy as np
import pytest

from diffnam.errors import ContractError, DimensionError
from diffnam.models import Durations, DtwPath, PhonemeSeq, SimulationMethod
from diffnam.settings import load_config
from diffnam.simulation import (UnitVocoder, durations_for, lip_upsampler, reference_durations, simulate,
                                studio_corpus, studio_reference, train_cross_attention, warp_onto)
from diffnam.synthdata import Corpus


@pytest.fixture(scope="module")
def subset(default_corpus):
    return Corpus(default_corpus.inventory, default_corpus.utterances[:10])


def _mean_frame_l1(corpus):
    mean = np.concatenate([u.mel for u in corpus]).mean(axis=0)
    return float(np.mean([np.abs(u.mel - mean).mean() for u in corpus]))


def test_studio_corpus_is_fresh_and_reproducible(small_corpus, fast_config):
    a = studio_corpus(small_corpus.inventory, fast_config, seed=3, n_utts=4)
    b = studio_corpus(small_corpus.inventory, fast_config, seed=3, n_utts=4)
    assert len(a) == 4 and a.inventory is small_corpus.inventory
    assert all(np.array_equal(x.whisper, y.whisper) for x, y in zip(a, b))
    assert not any(x.whisper.shape == y.whisper.shape and np.allclose(x.whisper, y.whisper)
                   for x, y in zip(a, small_corpus))
    with pytest.raises(ContractError):
        studio_corpus(small_corpus.inventory, fast_config, n_utts=0)


def test_unit_vocoder_table_holds_unit_means(rng):
    whisper = np.concatenate([rng.normal(0.0, 0.1, (20, 2)), rng.normal(5.0, 0.1, (20, 2))])
    mel = np.concatenate([np.full((20, 3), -2.0), np.full((20, 3), -8.0)])
    vocoder = UnitVocoder.fit([(whisper, mel)], n_units=2, seed=0)
    out = vocoder.synthesize(whisper)
    assert np.allclose(out, mel)
    with pytest.raises(DimensionError):
        UnitVocoder.fit([(whisper, mel[:-1])], n_units=2)


@pytest.mark.slow
def test_units_route_beats_the_mean_frame(subset, config):
    result = simulate(SimulationMethod.UNITS, subset, config, seed=1)
    assert set(result.mels) == {u.utt_id for u in subset}
    assert all(result.mels[u.utt_id].shape == u.mel.shape for u in subset)
    assert result.mean_l1(subset) < 0.5 * _mean_frame_l1(subset)


def test_reference_is_paced_evenly(subset, config):
    utt = subset[0]
    assert reference_durations(utt.phonemes, config).frames == (7,) * len(utt.phonemes)
    features, mel = studio_reference(subset.inventory, utt.phonemes, config)
    assert features.shape == (7 * len(utt.phonemes), config.feature_dim)
    assert np.array_equal(mel[0], subset.inventory.mel_means()[utt.phonemes.ids[0]])


def test_warp_onto_averages_many_to_one():
    path = DtwPath(pairs=((0, 0), (0, 1), (1, 2)), cost=0.0)
    warped = warp_onto(path, np.array([[0.0], [2.0], [4.0]]), n_source=2)
    assert warped.tolist() == [[1.0], [4.0]]
    with pytest.raises(ContractError):
        warp_onto(DtwPath(pairs=((0, 0), (0, 1)), cost=0.0), np.zeros((2, 1)), n_source=2)


def test_dtw_route_follows_the_whisper_timeline(subset, config):
    result = simulate(SimulationMethod.DTW, subset, config)
    assert all(result.mels[u.utt_id].shape == u.mel.shape for u in subset)
    assert result.mean_l1(subset) < 0.5 * _mean_frame_l1(subset)


def test_lip_upsampler_reads_every_other_frame():
    matrix = lip_upsampler(5, 3)
    assert matrix.argmax(axis=1).tolist() == [0, 0, 1, 1, 2]
    assert np.all(matrix.sum(axis=1) == 1.0)
    with pytest.raises(DimensionError):
        lip_upsampler(5, 2)


def test_cross_attention_training_reduces_loss(small_corpus):
    config = load_config(overrides={
        "model_dim": "16", "conv_hidden": "16", "n_units": "8", "kmeans_iterations": "5",
        "min_len": "4", "max_len": "6", "learning_rate": "0.01", "batch_size": "2",
    })
    studio = studio_corpus(small_corpus.inventory, config, seed=3, n_utts=6)
    predictor = train_cross_attention(studio, config, seed=3, epochs=15)
    assert predictor.history[-1] < predictor.history[0]

    utt = small_corpus[0]
    mel = predictor.synthesize(utt.lip, utt.phonemes, utt.n_frames)
    assert mel.shape == utt.mel.shape
    centroids = predictor.mel_codebook.centroids
    assert all(any(np.array_equal(row, c) for c in centroids) for row in mel)
    with pytest.raises(DimensionError):
        predictor.logits(utt.lip[:, :3], utt.phonemes, utt.n_frames)


def test_tts_route_is_floored(small_corpus, fast_config):
    result = simulate("tts", small_corpus, fast_config)
    assert result.method is SimulationMethod.TTS
    for utt in small_corpus:
        assert result.mels[utt.utt_id].shape == utt.mel.shape
        assert result.mels[utt.utt_id].min() >= np.log(fast_config.log_floor)


def test_simulate_contracts(small_corpus, fast_config):
    with pytest.raises(ContractError, match="diffusion"):
        simulate(SimulationMethod.DIFFUSION, small_corpus, fast_config)
    with pytest.raises(ContractError):
        simulate(SimulationMethod.TTS, Corpus(small_corpus.inventory, []), fast_config)


def test_aligned_durations_must_cover_the_utterance(small_corpus):
    utt = small_corpus[0]
    assert durations_for(utt, {}) == utt.durations
    short = Durations(frames=(1,) * len(utt.phonemes))
    with pytest.raises(ContractError):
        durations_for(utt, {utt.utt_id: (utt.phonemes, short)})
    with pytest.raises(ContractError):
        durations_for(utt, {"other": (PhonemeSeq(ids=(0,), inventory_size=12), short)})
