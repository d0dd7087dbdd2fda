import wave

import numpy as np
import pytest
from scipy.signal import resample_poly, welch

from uvector.audio import (AudioBuffer, AudioDecodeError, SpeakerProfile, gen_noise, load_profiles,
                           load_wav, random_profiles, resample, save_profiles, save_wav,
                           synth_utterance, synth_with_mask)

from conftest import tone


def write_pcm16(path, data, sr=16_000, channels=1):
    pcm = np.round(np.asarray(data) * 32767).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(channels)
        wf.setsampwidth(2)
        wf.setframerate(sr)
        wf.writeframes(pcm.tobytes())


def peak_freq(x, sr, lo=0.0, hi=None):
    spec = np.abs(np.fft.rfft(x * np.hanning(len(x))))
    f = np.fft.rfftfreq(len(x), 1 / sr)
    band = (f >= lo) & (f <= (hi or sr / 2))
    k = np.flatnonzero(band)[np.argmax(spec[band])]
    # parabolic refinement on the log magnitude
    a, b, c = np.log(spec[k - 1:k + 2])
    return f[k] + 0.5 * (a - c) / (a - 2 * b + c) * (f[1] - f[0])


def test_load_one_second_mono(tmp_path):
    write_pcm16(tmp_path / "a.wav", tone(440))
    audio = load_wav(tmp_path / "a.wav")
    assert len(audio) == 16000
    assert audio.sample_rate == 16000
    assert np.max(np.abs(audio.samples)) == pytest.approx(1.0)


def test_stereo_downmix_is_channel_mean(tmp_path):
    left, right = tone(300, amp=0.6), tone(500, amp=0.2)
    inter = np.stack([left, right], axis=1).ravel()
    write_pcm16(tmp_path / "s.wav", inter, channels=2)
    audio = load_wav(tmp_path / "s.wav", normalize=False)
    assert len(audio) == 16000
    expect = (np.round(left * 32767) + np.round(right * 32767)) / 2 / 32768
    np.testing.assert_allclose(audio.samples, expect, atol=1e-12)


def test_8khz_input_is_resampled_preserving_tone(tmp_path):
    write_pcm16(tmp_path / "lo.wav", tone(440, sr=8000), sr=8000)
    audio = load_wav(tmp_path / "lo.wav", normalize=False)
    assert len(audio) == 16000
    assert abs(peak_freq(audio.samples, 16000) - 440.0) < 1.0
    # independent polyphase oracle agrees away from the edges
    oracle = resample_poly(np.round(tone(440, sr=8000) * 32767) / 32768, 2, 1)
    np.testing.assert_allclose(audio.samples[400:-400], oracle[400:-400], atol=2e-3)


def test_resample_matches_analytic_tone():
    x = np.sin(2 * np.pi * 1000.0 * np.arange(8000) / 8000.0 * 1.0)
    y = resample(x, 8000, 16000)
    t = np.arange(len(y)) / 16000
    np.testing.assert_allclose(y[500:-500], np.sin(2 * np.pi * 1000.0 * t[500:-500]), atol=2e-3)


def test_downsampling_removes_content_above_new_nyquist():
    t = np.arange(32000) / 32000
    x = np.sin(2 * np.pi * 300 * t) + np.sin(2 * np.pi * 12000 * t)
    y = resample(x, 32000, 16000)
    ref = np.sin(2 * np.pi * 300 * np.arange(16000) / 16000)
    np.testing.assert_allclose(y[500:-500], ref[500:-500], atol=1e-2)


def test_wav_round_trip_within_one_quantization_step(tmp_path, rng):
    x = rng.uniform(-0.9, 0.9, 4000)
    save_wav(tmp_path / "r.wav", AudioBuffer(x))
    once = load_wav(tmp_path / "r.wav", normalize=False)
    assert np.max(np.abs(once.samples - x)) <= 1 / 32768
    save_wav(tmp_path / "r2.wav", once)
    twice = load_wav(tmp_path / "r2.wav", normalize=False)
    np.testing.assert_array_equal(once.samples, twice.samples)


def test_float_wav_is_a_decode_error(tmp_path):
    data = np.zeros(100, dtype="<f4").tobytes()
    fmt = (b"fmt " + (16).to_bytes(4, "little") + (3).to_bytes(2, "little") + (1).to_bytes(2, "little")
           + (16000).to_bytes(4, "little") + (64000).to_bytes(4, "little") + (4).to_bytes(2, "little")
           + (32).to_bytes(2, "little"))
    body = b"WAVE" + fmt + b"data" + len(data).to_bytes(4, "little") + data
    (tmp_path / "f.wav").write_bytes(b"RIFF" + len(body).to_bytes(4, "little") + body)
    with pytest.raises(AudioDecodeError):
        load_wav(tmp_path / "f.wav")


def test_garbage_file_is_a_decode_error(tmp_path):
    (tmp_path / "g.wav").write_bytes(b"not a wav file at all")
    with pytest.raises(AudioDecodeError):
        load_wav(tmp_path / "g.wav")


def test_buffer_rejects_non_finite():
    with pytest.raises(ValueError):
        AudioBuffer(np.array([0.0, np.nan]))
    with pytest.raises(ValueError):
        AudioBuffer(np.zeros(3), sample_rate=0)


@pytest.mark.parametrize("kwargs", [
    dict(pitch_hz=50.0, formants=((500, 80),)),
    dict(pitch_hz=120.0, formants=((1500, 80), (500, 80))),
    dict(pitch_hz=120.0, formants=()),
])
def test_profile_invariants(kwargs):
    with pytest.raises(ValueError):
        SpeakerProfile(**kwargs)


def test_synth_is_deterministic(profile):
    a = synth_utterance(profile, 10.0, seed=7)
    b = synth_utterance(profile, 10.0, seed=7)
    np.testing.assert_array_equal(a.samples, b.samples)
    assert not np.array_equal(a.samples, synth_utterance(profile, 10.0, seed=8).samples)


def test_synth_length_and_range(profile):
    a = synth_utterance(profile, 1.0, seed=1)
    assert len(a) == 16000
    assert np.max(np.abs(a.samples)) == pytest.approx(1.0)


def test_synth_pitch_sets_low_band_peak():
    # formants placed high so the glottal tilt makes F0 the strongest low partial
    high = ((1000, 100), (2000, 120), (3000, 150))
    peaks = []
    for pitch in (110.0, 220.0):
        p = SpeakerProfile(pitch_hz=pitch, formants=high, jitter=0.005, seed=3)
        audio, voiced = synth_with_mask(p, 10.0, seed=0)
        peaks.append(peak_freq(audio.samples[voiced], 16000, lo=60, hi=400))
    assert peaks[0] == pytest.approx(110.0, rel=0.1)
    assert peaks[1] == pytest.approx(220.0, rel=0.1)


def test_voiced_exceeds_silence_by_20_db(profile):
    audio, voiced = synth_with_mask(profile, 10.0, seed=2)
    rms = lambda x: np.sqrt(np.mean(x**2))
    assert voiced.any() and (~voiced).any()
    assert 20 * np.log10(rms(audio.samples[voiced]) / rms(audio.samples[~voiced])) >= 20.0


def test_random_profiles_are_valid_and_seeded():
    a, b = random_profiles(8, seed=4), random_profiles(8, seed=4)
    assert a == b
    assert all(60 <= p.pitch_hz <= 400 for p in a)


def test_profiles_yaml_round_trip(tmp_path):
    ps = random_profiles(3, seed=1)
    save_profiles(tmp_path / "p.yaml", ps)
    assert load_profiles(tmp_path / "p.yaml") == ps


def test_white_noise_mean_near_zero():
    n = gen_noise("white", 1.0, seed=3)
    assert len(n) == 16000
    assert abs(n.samples.mean()) <= 0.01
    assert np.max(np.abs(n.samples)) == pytest.approx(1.0)


@pytest.mark.parametrize("kind", ["white", "pink", "babble", "babble-like"])
def test_noise_is_deterministic(kind):
    np.testing.assert_array_equal(gen_noise(kind, 0.5, 9).samples, gen_noise(kind, 0.5, 9).samples)


def test_pink_noise_slope_is_minus_3db_per_octave():
    n = gen_noise("pink", 10.0, seed=5)
    f, p = welch(n.samples, fs=16000, nperseg=4096)
    band = (f >= 50) & (f <= 6000)
    slope = np.polyfit(np.log2(f[band]), 10 * np.log10(p[band]), 1)[0]
    assert -4.0 <= slope <= -2.0


def test_unknown_noise_kind():
    with pytest.raises(ValueError):
        gen_noise("brown", 1.0, 0)
