import wave

import numpy as np
import pytest

from rawnet2cm.data import (ParseError, ProtocolEntry, ScoreRecord, SynthSpec, WavFormatError, Waveform,
                            batch_iter, fix_length, format_protocol, format_scores, holdout_split,
                            load_wav, parse_protocol, parse_scores, read_corpus, repartition, save_wav,
                            synth_corpus, write_corpus)


def test_wav_round_trip(tmp_path):
    x = np.random.default_rng(0).uniform(-0.9, 0.9, 1600)
    save_wav(tmp_path / "a.wav", x)
    w = load_wav(tmp_path / "a.wav")
    assert w.sample_rate == 16000 and len(w) == 1600
    assert np.max(np.abs(w.samples - x)) <= 0.5 / 32768 + 1e-12
    save_wav(tmp_path / "b.wav", w)
    np.testing.assert_array_equal(load_wav(tmp_path / "b.wav").samples, w.samples)


def _write_raw(path, channels=1, width=2, rate=16000, frames=b"\x00\x00" * 10):
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(channels)
        fh.setsampwidth(width)
        fh.setframerate(rate)
        fh.writeframes(frames)


def test_stereo_rejected(tmp_path):
    _write_raw(tmp_path / "s.wav", channels=2)
    with pytest.raises(WavFormatError, match="channels"):
        load_wav(tmp_path / "s.wav")


def test_wrong_width_and_rate_rejected(tmp_path):
    _write_raw(tmp_path / "w.wav", width=1, frames=b"\x80" * 10)
    with pytest.raises(WavFormatError, match="width"):
        load_wav(tmp_path / "w.wav")
    _write_raw(tmp_path / "r.wav", rate=8000)
    with pytest.raises(WavFormatError, match="rate"):
        load_wav(tmp_path / "r.wav")


def test_garbage_and_empty_rejected(tmp_path):
    (tmp_path / "g.wav").write_bytes(b"not a wav file at all")
    with pytest.raises(WavFormatError):
        load_wav(tmp_path / "g.wav")
    _write_raw(tmp_path / "e.wav", frames=b"")
    with pytest.raises(WavFormatError, match="length"):
        load_wav(tmp_path / "e.wav")


def test_waveform_validation():
    with pytest.raises(ValueError):
        Waveform(np.zeros(0))
    with pytest.raises(ValueError):
        Waveform(np.array([0.0, np.nan]))


def test_fix_length_crop_and_tile():
    x = np.arange(10.0)
    np.testing.assert_array_equal(fix_length(x, 4), [0, 1, 2, 3])
    np.testing.assert_array_equal(fix_length(x, 25), np.concatenate([x, x, x[:5]]))
    np.testing.assert_array_equal(fix_length(x, 10), x)
    assert fix_length(np.ones(70000)).shape == (64000,)
    crop = fix_length(x, 4, random_crop=True, rng=np.random.default_rng(1))
    assert crop.size == 4 and np.all(np.diff(crop) == 1)
    with pytest.raises(ValueError):
        fix_length(np.zeros(0), 4)


def test_parse_protocol_examples():
    text = "# header\nLA_0001 - bonafide train\nLA_0002 A17 spoof\n\n"
    entries = parse_protocol(text)
    assert entries == [ProtocolEntry("LA_0001", "-", "bonafide", "train"),
                       ProtocolEntry("LA_0002", "A17", "spoof", "eval")]
    assert parse_protocol(format_protocol(entries)) == entries


@pytest.mark.parametrize("text,line", [
    ("a - bonafide\nb A17 fake\n", 2),
    ("a - bonafide eval extra\n", 1),
    ("a A17 bonafide\n", 1),
    ("a - spoof\n", 1),
    ("a - bonafide test\n", 1),
])
def test_parse_protocol_errors(text, line):
    with pytest.raises(ParseError) as exc:
        parse_protocol(text)
    assert exc.value.lineno == line


def test_scores_round_trip_exact():
    recs = [ScoreRecord("u1", "-", "bonafide", 0.1 + 0.2), ScoreRecord("u2", "A17", "spoof", -1e-300)]
    assert parse_scores(format_scores(recs)) == recs


@pytest.mark.parametrize("text", ["u - bonafide\n", "u - bonafide abc\n", "u - bonafide nan\n",
                                  "u - maybe 1.0\n"])
def test_parse_scores_errors(text):
    with pytest.raises(ParseError):
        parse_scores(text)


def test_synth_determinism_and_balance():
    spec = SynthSpec(counts={"train": (5, 7), "eval": (3, 3)}, duration=0.25, seed=2)
    a, b = synth_corpus(spec), synth_corpus(spec)
    assert [u.entry for u in a.utterances] == [u.entry for u in b.utterances]
    for u, v in zip(a.utterances, b.utterances):
        np.testing.assert_array_equal(u.samples, v.samples)
    train = a.split("train")
    assert sum(u.entry.key == "bonafide" for u in train) == 5
    assert sum(u.entry.key == "spoof" for u in train) == 7
    assert all(u.samples.size == 4000 for u in a.utterances)
    other = synth_corpus(SynthSpec(counts={"train": (5, 7), "eval": (3, 3)}, duration=0.25, seed=3))
    assert not np.array_equal(other.utterances[0].samples, a.utterances[0].samples)


def test_default_spec_sizes():
    spec = SynthSpec()
    assert spec.counts["train"] == (100, 100) and spec.counts["eval"] == (50, 50)
    assert spec.attacks == {"A17": "click"}


def _hf_ratio(utts):
    ratios = []
    for u in utts:
        p = np.abs(np.fft.rfft(u.samples)) ** 2
        f = np.fft.rfftfreq(u.samples.size, 1 / 16000)
        ratios.append(p[f > 6000].sum())
    return np.mean(ratios)


def test_click_artifact_adds_high_frequency_energy(small_corpus):
    bona = [u for u in small_corpus.utterances if u.entry.key == "bonafide"]
    spoof = [u for u in small_corpus.utterances if u.entry.key == "spoof"]
    assert _hf_ratio(spoof) >= 10 * _hf_ratio(bona)


@pytest.mark.parametrize("kind", ["phase", "bandgap", "hum"])
def test_other_artifacts_generate(kind):
    c = synth_corpus(SynthSpec(counts={"eval": (1, 2)}, attacks={"AX": kind}, duration=0.2))
    assert all(np.all(np.abs(u.samples) < 1) for u in c.utterances)


def test_spec_validation():
    with pytest.raises(ValueError):
        SynthSpec(attacks={"A1": "laser"})
    with pytest.raises(ValueError):
        SynthSpec(counts={"train": (0, 3)})


def test_corpus_disk_round_trip(tmp_path, small_corpus):
    write_corpus(small_corpus, tmp_path)
    back = read_corpus(tmp_path)
    assert back.protocol == small_corpus.protocol
    for u, v in zip(back.utterances, small_corpus.utterances):
        np.testing.assert_array_equal(u.samples, v.samples)
    assert len(read_corpus(tmp_path, splits=["eval"]).utterances) == 12
    assert (tmp_path / "manifest.tsv").read_text().splitlines()[0].startswith("utterance_id\t")


def test_batch_iter_sizes_and_determinism():
    batches = batch_iter(100, 32, shuffle_seed=0, epoch=0)
    assert [len(b) for b in batches] == [32, 32, 32, 4]
    assert sorted(np.concatenate(batches).tolist()) == list(range(100))
    again = batch_iter(100, 32, shuffle_seed=0, epoch=0)
    assert all(np.array_equal(a, b) for a, b in zip(batches, again))
    other = batch_iter(100, 32, shuffle_seed=0, epoch=1)
    assert not all(np.array_equal(a, b) for a, b in zip(batches, other))
    np.testing.assert_array_equal(batch_iter(5, 2, shuffle_seed=None)[0], [0, 1])
    with pytest.raises(ValueError):
        batch_iter(0)


def test_holdout_split_disjoint_and_stratified(small_corpus):
    train = small_corpus.split("train")
    kept, held = holdout_split(train, 0.25, seed=0)
    ids_k = {u.entry.utterance_id for u in kept}
    ids_h = {u.entry.utterance_id for u in held}
    assert not ids_k & ids_h and len(ids_k | ids_h) == len(train)
    assert sum(u.entry.key == "bonafide" for u in held) == 3
    assert sum(u.entry.key == "spoof" for u in held) == 3


def test_repartition_moves_dev_into_training(small_corpus):
    train, dev = small_corpus.split("train"), small_corpus.split("dev")
    new_train, val = repartition(train, dev, dev_fraction=0.5, seed=0)
    assert len(new_train) == len(train) + 4 and len(val) == 4
