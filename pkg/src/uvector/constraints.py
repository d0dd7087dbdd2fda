"""Pseudo-labelled cluster network, pair/triplet sampling and noise mixing.

Every frame inherits the id of the segment it was cut from as its pseudo
label: frames of one segment must link, frames of different segments cannot.
Ground-truth speakers ride along for evaluation and auditing only; nothing
in the samplers reads them.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .segmentation import FRAME_LEN, frame_segment

MAX_REDRAWS = 100
UNKNOWN_SPEAKER = -1


class SamplingError(RuntimeError):
    """No valid partner could be drawn within the redraw budget."""


def _rng(seed):
    return np.random.default_rng(seed)


def frozen_array(a, dtype=None):
    a = np.array(a, dtype=dtype)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class ClusterSet:
    """Frames of all segments with per-frame pseudo and ground labels.

    ``audio`` is (n_frames, frame_samples). ``segment`` maps each frame to its
    parent segment id; ``relabels`` records (segment_id, old, new) triples from
    impurity injection.
    """

    audio: np.ndarray
    segment: np.ndarray
    pseudo_label: np.ndarray
    ground_speaker: np.ndarray
    relabels: tuple = field(default_factory=tuple)

    def __len__(self):
        return len(self.pseudo_label)

    @property
    def segment_ids(self) -> np.ndarray:
        return np.unique(self.segment)

    @property
    def n_segments(self) -> int:
        return len(self.segment_ids)

    @property
    def n_clusters(self) -> int:
        return len(np.unique(self.pseudo_label))

    @property
    def n_true_speakers(self) -> int:
        g = self.ground_speaker[self.ground_speaker != UNKNOWN_SPEAKER]
        return len(np.unique(g))

    def members(self) -> dict[int, np.ndarray]:
        """Frame indices per pseudo label."""
        order = np.argsort(self.pseudo_label, kind="stable")
        labels, starts = np.unique(self.pseudo_label[order], return_index=True)
        return {int(l): order[s:e] for l, s, e in zip(labels, starts, list(starts[1:]) + [len(order)])}


def build_cluster_set(segments, frame_len: float = FRAME_LEN) -> ClusterSet:
    audio, seg, pseudo, ground = [], [], [], []
    for s in segments:
        for f in frame_segment(s, frame_len):
            audio.append(f.samples)
            seg.append(s.segment_id)
            pseudo.append(s.pseudo_label)
            ground.append(UNKNOWN_SPEAKER if s.ground_speaker is None else s.ground_speaker)
    if not audio:
        raise ValueError("no frames: the segment list is empty")
    return ClusterSet(frozen_array(np.stack(audio)), frozen_array(seg, np.int64), frozen_array(pseudo, np.int64),
                      frozen_array(ground, np.int64))


def pairwise_target(label_i: int, label_j: int, alpha: float = 1.0) -> float:
    """Distance target for a frame pair: 0 for same cluster, ``alpha`` otherwise."""
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    return 0.0 if label_i == label_j else float(alpha)


def n_relabeled(ratio: float, n_segments: int) -> int:
    """round(ratio * n_segments), halves rounded up."""
    return int(np.floor(ratio * n_segments + 0.5))


def inject_impurity(cs: ClusterSet, ratio: float, seed) -> ClusterSet:
    """Scramble the pseudo labels of a random ``ratio`` of the segments.

    Each chosen segment takes the label of another, uniformly chosen segment
    whose label differs from its own. All frames of a segment move together and
    ground labels are untouched.
    """
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"impurity ratio must lie in [0, 1], got {ratio}")
    seg_ids = cs.segment_ids
    k = n_relabeled(ratio, len(seg_ids))
    if k == 0:
        return cs
    first = {int(s): int(np.flatnonzero(cs.segment == s)[0]) for s in seg_ids}
    label_of = {s: int(cs.pseudo_label[i]) for s, i in first.items()}
    if len(set(label_of.values())) < 2:
        raise ValueError("impurity needs at least two distinct pseudo labels")
    rng = _rng(seed)
    chosen = rng.choice(seg_ids, size=k, replace=False)
    pseudo = cs.pseudo_label.copy()
    relabels = []
    for s in chosen:
        s = int(s)
        old = label_of[s]
        donors = [t for t in seg_ids if label_of[int(t)] != old]
        new = label_of[int(donors[rng.integers(len(donors))])]
        pseudo[cs.segment == s] = new
        relabels.append((s, old, new))
    return replace(cs, pseudo_label=frozen_array(pseudo), relabels=cs.relabels + tuple(relabels))


def constraint_error_rates(cs: ClusterSet) -> tuple[float, float]:
    """(must-link impurity, cannot-link error) over all unordered frame pairs.

    Must-link impurity is the share of same-pseudo-label pairs spoken by
    different speakers; cannot-link error the share of different-label pairs
    spoken by the same speaker.
    """
    def pairs(counts):
        counts = np.asarray(counts, dtype=np.float64)
        return float(np.sum(counts * (counts - 1) / 2))

    _, c_counts = np.unique(cs.pseudo_label, return_counts=True)
    _, g_counts = np.unique(cs.ground_speaker, return_counts=True)
    joint = cs.pseudo_label * (cs.ground_speaker.max() + 2) + (cs.ground_speaker + 1)
    _, cg_counts = np.unique(joint, return_counts=True)
    n = len(cs)
    same_c, same_g, same_both = pairs(c_counts), pairs(g_counts), pairs(cg_counts)
    total = n * (n - 1) / 2
    must = 1.0 - same_both / same_c if same_c else 0.0
    cannot = (same_g - same_both) / (total - same_c) if total > same_c else 0.0
    return must, cannot


def write_relabels(path, cs: ClusterSet) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["segment_id", "old_label", "new_label", "ground_speaker"])
        for s, old, new in cs.relabels:
            g = int(cs.ground_speaker[np.flatnonzero(cs.segment == s)[0]])
            w.writerow([s, old, new, g])


# ---------------------------------------------------------------------------
# Batch sampling


@dataclass(frozen=True)
class PairBatch:
    """Frame indices into a ClusterSet plus distance targets (0 or alpha)."""

    left: np.ndarray
    right: np.ndarray
    target: np.ndarray

    def __len__(self):
        return len(self.target)


@dataclass(frozen=True)
class TripletBatch:
    anchor: np.ndarray
    positive: np.ndarray
    negative: np.ndarray

    def __len__(self):
        return len(self.anchor)


class _Sampler:
    def __init__(self, cs: ClusterSet, rng):
        self.labels = cs.pseudo_label
        self.members = cs.members()
        self.n = len(cs)
        self.rng = rng
        if len(self.members) < 2:
            raise SamplingError("sampling needs at least two pseudo clusters")
        if max(len(m) for m in self.members.values()) < 2:
            raise SamplingError("sampling needs a pseudo cluster with at least two frames")

    def anchor_with_partner(self) -> tuple[int, int]:
        for _ in range(MAX_REDRAWS):
            a = int(self.rng.integers(self.n))
            group = self.members[int(self.labels[a])]
            if len(group) >= 2:
                j = int(self.rng.integers(len(group) - 1))
                pos = int(np.flatnonzero(group == a)[0])
                return a, int(group[j + (j >= pos)])
        raise SamplingError(f"no can-link partner found in {MAX_REDRAWS} draws")

    def other(self, a: int) -> int:
        la = self.labels[a]
        for _ in range(MAX_REDRAWS):
            j = int(self.rng.integers(self.n))
            if self.labels[j] != la:
                return j
        raise SamplingError(f"no cannot-link partner found in {MAX_REDRAWS} draws")


def sample_pair_batch(cs: ClusterSet, batch_size: int, seed, alpha: float = 1.0) -> PairBatch:
    """Balanced pair batch: the first half can-link (target 0), the second
    half cannot-link (target ``alpha``), partners drawn from the whole set."""
    if batch_size < 2 or batch_size % 2:
        raise ValueError(f"batch_size must be even and >= 2, got {batch_size}")
    s = _Sampler(cs, _rng(seed))
    half = batch_size // 2
    left, right = [], []
    for _ in range(half):
        a, b = s.anchor_with_partner()
        left.append(a)
        right.append(b)
    for _ in range(half):
        a = int(s.rng.integers(s.n))
        left.append(a)
        right.append(s.other(a))
    target = np.concatenate([np.zeros(half), np.full(half, float(alpha))])
    return PairBatch(np.array(left), np.array(right), target)


def sample_triplet_batch(cs: ClusterSet, batch_size: int, seed) -> TripletBatch:
    if batch_size < 1:
        raise ValueError("batch_size must be positive")
    s = _Sampler(cs, _rng(seed))
    a, p, n = [], [], []
    for _ in range(batch_size):
        i, j = s.anchor_with_partner()
        a.append(i)
        p.append(j)
        n.append(s.other(i))
    return TripletBatch(np.array(a), np.array(p), np.array(n))


# ---------------------------------------------------------------------------
# Augmentation


def augment(x, noise, thres: float) -> np.ndarray:
    """Mix noise into a frame: ``x * (1 - thres) + noise * thres``."""
    x = np.asarray(x, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if x.shape != noise.shape:
        raise ValueError(f"frame and noise lengths differ: {x.shape} vs {noise.shape}")
    if not 0.0 <= thres <= 1.0:
        raise ValueError(f"thres must lie in [0, 1], got {thres}")
    return x * (1.0 - thres) + noise * thres


def augment_half_batch(frames, noise_pool, thres_range=(0.0, 0.07), seed=None):
    """Augment a uniformly chosen half of ``frames`` (rows of an array).

    Each chosen frame is mixed with a crop of a random pool buffer at a random
    offset, using a mixing ratio drawn from ``thres_range``. Returns the new
    array and the sorted indices that were augmented.
    """
    lo, hi = thres_range
    if not 0.0 <= lo <= hi <= 1.0:
        raise ValueError(f"thres_range must be a sub-interval of [0, 1], got {thres_range}")
    rng = _rng(seed)
    frames = np.asarray(frames, dtype=np.float64)
    out = frames.copy()
    n, length = frames.shape
    chosen = np.sort(rng.choice(n, size=n // 2, replace=False))
    pool = [np.asarray(getattr(b, "samples", b), dtype=np.float64) for b in noise_pool]
    for i in chosen:
        src = pool[rng.integers(len(pool))]
        if len(src) < length:
            raise ValueError("noise buffers must be at least one frame long")
        off = int(rng.integers(len(src) - length + 1))
        out[i] = augment(frames[i], src[off:off + length], float(rng.uniform(lo, hi)))
    return out, chosen
