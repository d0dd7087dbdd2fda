"""Energy VAD, segment/frame windowing and segment-length statistics."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .audio import AudioBuffer

VAD_WINDOW = 0.025
VAD_HOP = 0.010
SEGMENT_LEN = 1.0
FRAME_LEN = 0.2

MANIFEST_FIELDS = ("file", "segment_id", "start", "duration", "pseudo_label", "ground_speaker")


@dataclass
class Segment:
    samples: np.ndarray
    start: float
    duration: float
    segment_id: int
    pseudo_label: int
    ground_speaker: int | None = None
    sample_rate: int = 16_000
    source: str = ""


@dataclass
class Frame:
    samples: np.ndarray
    parent_segment: int
    index_in_segment: int


@dataclass(frozen=True)
class SegmentStats:
    mean: float
    median: float
    std: float


@dataclass(frozen=True)
class ExchangeStats:
    """Mean and spread of the time after which the speaker changes."""

    mean: float
    std: float

    def __post_init__(self):
        if self.mean <= 0:
            raise ValueError("exchange time mean must be positive")
        if self.std < 0:
            raise ValueError("exchange time std must be non-negative")


def seconds_to_samples(seconds: float, sample_rate: int) -> int:
    """Exact sample count for a duration; raises if it is fractional."""
    n = seconds * sample_rate
    k = int(round(n))
    if abs(n - k) > 1e-6:
        raise ValueError(f"{seconds} s is not a whole number of samples at {sample_rate} Hz")
    return k


def short_time_rms(x: np.ndarray, win: int, hop: int) -> np.ndarray:
    if len(x) < win:
        return np.sqrt(np.mean(x**2, keepdims=True)) if len(x) else np.zeros(0)
    frames = np.lib.stride_tricks.sliding_window_view(x, win)[::hop]
    return np.sqrt(np.mean(frames**2, axis=1))


def voiced_runs(audio: AudioBuffer, threshold_db: float = 16.0,
                win: float = VAD_WINDOW, hop: float = VAD_HOP) -> list[tuple[int, int]]:
    """Sample spans ``[lo, hi)`` of consecutive windows within ``threshold_db``
    of the loudest window."""
    if threshold_db <= 0:
        raise ValueError(f"threshold_db must be positive, got {threshold_db}")
    sr = audio.sample_rate
    w, h = int(round(win * sr)), int(round(hop * sr))
    rms = short_time_rms(audio.samples, w, h)
    if rms.size == 0 or rms.max() == 0:
        return []
    active = rms > rms.max() * 10.0 ** (-threshold_db / 20.0)
    edges = np.diff(np.concatenate([[0], active.astype(np.int8), [0]]))
    starts = np.flatnonzero(edges == 1)
    stops = np.flatnonzero(edges == -1) - 1  # last active window, inclusive
    n = len(audio.samples)
    last = len(rms) - 1
    # a run reaching the final window extends to the end of the audio
    return [(int(i * h), n if j == last else int(min(j * h + w, n))) for i, j in zip(starts, stops)]


def vad_segment(audio: AudioBuffer, threshold_db: float = 16.0, target_len: float = SEGMENT_LEN,
                frame_len: float = FRAME_LEN, first_id: int = 0,
                ground_speaker: int | None = None, source: str = "") -> list[Segment]:
    """Cut the voiced runs of ``audio`` into fixed-length segments.

    Runs shorter than ``target_len`` are dropped; longer runs are chopped from
    their start and the remainder discarded. Segment ids count up from
    ``first_id`` and each segment starts as its own pseudo cluster.
    """
    sr = audio.sample_rate
    seg_n = seconds_to_samples(target_len, sr)
    frame_n = seconds_to_samples(frame_len, sr)
    if seg_n % frame_n:
        raise ValueError(f"target_len {target_len} is not a multiple of frame_len {frame_len}")
    segments = []
    sid = first_id
    for lo, hi in voiced_runs(audio, threshold_db):
        for k in range((hi - lo) // seg_n):
            a = lo + k * seg_n
            segments.append(Segment(
                samples=audio.samples[a:a + seg_n].copy(),
                start=a / sr,
                duration=seg_n / sr,
                segment_id=sid,
                pseudo_label=sid,
                ground_speaker=ground_speaker,
                sample_rate=sr,
                source=source,
            ))
            sid += 1
    return segments


def frame_segment(segment: Segment, frame_len: float = FRAME_LEN) -> list[Frame]:
    """Split a segment into contiguous, non-overlapping frames."""
    frame_n = seconds_to_samples(frame_len, segment.sample_rate)
    n = len(segment.samples)
    if n == 0 or n % frame_n:
        raise ValueError(f"segment of {n} samples is not divisible into {frame_n}-sample frames")
    return [Frame(segment.samples[i * frame_n:(i + 1) * frame_n], segment.segment_id, i)
            for i in range(n // frame_n)]


def segment_stats(durations) -> SegmentStats:
    d = np.asarray(list(durations), dtype=np.float64)
    if d.size == 0:
        raise ValueError("segment_stats needs at least one duration")
    return SegmentStats(float(d.mean()), float(np.median(d)), float(d.std()))


def purity_condition(seg_len: float, L: SegmentStats, J: ExchangeStats) -> bool:
    """True when ``seg_len < L.mean - L.std < J.mean - J.std``.

    Segments shorter than the typical minimal speech run, which in turn is
    shorter than the typical speaker turn, should never straddle a speaker
    change.
    """
    lower = L.mean - L.std
    return seg_len < lower and lower < J.mean - J.std


# ---------------------------------------------------------------------------
# Manifests


def write_manifest(path, segments) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_FIELDS)
        for s in segments:
            w.writerow([s.source, s.segment_id, f"{s.start:.6f}", f"{s.duration:.6f}", s.pseudo_label,
                        "" if s.ground_speaker is None else s.ground_speaker])


def read_manifest(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        r["segment_id"] = int(r["segment_id"])
        r["start"] = float(r["start"])
        r["duration"] = float(r["duration"])
        r["pseudo_label"] = int(r["pseudo_label"])
        r["ground_speaker"] = int(r["ground_speaker"]) if r["ground_speaker"] != "" else None
    return rows


def segments_from_manifest(rows, loader) -> list[Segment]:
    """Rebuild segments from manifest rows; ``loader(file)`` returns an AudioBuffer."""
    cache: dict[str, AudioBuffer] = {}
    out = []
    for r in rows:
        if r["file"] not in cache:
            cache[r["file"]] = loader(r["file"])
        audio = cache[r["file"]]
        sr = audio.sample_rate
        a = int(round(r["start"] * sr))
        n = seconds_to_samples(r["duration"], sr)
        if a + n > len(audio):
            raise ValueError(f"segment {r['segment_id']} runs past the end of {r['file']}")
        out.append(Segment(audio.samples[a:a + n].copy(), a / sr, n / sr, r["segment_id"],
                           r["pseudo_label"], r["ground_speaker"], sr, r["file"]))
    return out
