"""Data preparation and the training loop shared by the CLI and the tests."""

from __future__ import annotations

import copy
import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .audio import AudioBuffer, load_wav, noise_pool, random_profiles, save_wav, synth_utterance
from .constraints import (ClusterSet, frozen_array, augment_half_batch, build_cluster_set, constraint_error_rates,
                          inject_impurity, sample_pair_batch, sample_triplet_batch)
from .embedder import (NetConfig, TrainConfig, init_net, init_optimizer, pairwise_step, triplet_step)
from .evaluation import MetricsReport, evaluate
from .features import FeatureConfig, Featurizer
from .segmentation import FRAME_LEN, SEGMENT_LEN, Segment, vad_segment

HISTORY_FIELDS = ("epoch", "train_loss", "train_acc", "train_nmi", "train_ari",
                  "ground_acc", "ground_nmi", "ground_ari")


@dataclass
class SplitSegments:
    """Per-speaker train/test segments, speakers indexed 0..N-1."""

    train: list = field(default_factory=list)
    test: list = field(default_factory=list)

    def subset(self, n_speakers: int) -> "SplitSegments":
        keep = lambda segs: [s for s in segs if s.ground_speaker is not None and s.ground_speaker < n_speakers]
        return SplitSegments(keep(self.train), keep(self.test))


def split_speaker_segments(segments_by_speaker, train_seconds: float, test_seconds: float,
                           seg_len: float, seed) -> SplitSegments:
    """Randomly pick ``train_seconds`` and, from the rest, ``test_seconds``
    of segments per speaker, then renumber segment ids densely (train first)."""
    n_train = int(round(train_seconds / seg_len))
    n_test = int(round(test_seconds / seg_len))
    rng = np.random.default_rng(seed)
    train, test = [], []
    for spk, segs in enumerate(segments_by_speaker):
        if len(segs) < n_train + n_test:
            raise ValueError(f"speaker {spk} has {len(segs)} segments, needs {n_train + n_test}")
        order = rng.permutation(len(segs))
        train += [segs[i] for i in sorted(order[:n_train])]
        test += [segs[i] for i in sorted(order[n_train:n_train + n_test])]
    for sid, s in enumerate(train + test):
        s.segment_id = s.pseudo_label = sid
    return SplitSegments(train, test)


def synth_speaker_audio(n_speakers: int, seconds_needed: float, seed: int = 0,
                        seg_len: float = SEGMENT_LEN, threshold_db: float = 16.0):
    """Yield ``(speaker, profile, audio)`` with enough voiced audio for
    ``seconds_needed`` of segments per speaker."""
    for spk, profile in enumerate(random_profiles(n_speakers, seed)):
        duration = max(4.0, 2.5 * seconds_needed)
        while True:
            audio = synth_utterance(profile, duration, seed=spk)
            n = len(vad_segment(audio, threshold_db, seg_len))
            if n * seg_len >= seconds_needed:
                break
            duration *= 1.5
        yield spk, profile, audio


def synthetic_segments(n_speakers: int, train_seconds: float = 10.0, test_seconds: float = 2.0,
                       seed: int = 0, seg_len: float = SEGMENT_LEN, frame_len: float = FRAME_LEN,
                       threshold_db: float = 16.0, wav_dir=None) -> SplitSegments:
    """Synthesize speakers, segment them with the VAD and split train/test.

    With ``wav_dir`` every utterance is written as 16-bit WAV and segmented
    from the re-read file, so a manifest can point at it.
    """
    per_speaker = []
    for spk, _, audio in synth_speaker_audio(n_speakers, train_seconds + test_seconds, seed, seg_len, threshold_db):
        source = ""
        if wav_dir is not None:
            path = Path(wav_dir) / f"spk{spk:03d}.wav"
            save_wav(path, audio)
            audio = load_wav(path)
            source = str(path)
        per_speaker.append(vad_segment(audio, threshold_db, seg_len, frame_len, ground_speaker=spk, source=source))
    return split_speaker_segments(per_speaker, train_seconds, test_seconds, seg_len, seed)


def wav_dir_segments(root, train_seconds: float = 10.0, test_seconds: float = 2.0, seed: int = 0,
                     seg_len: float = SEGMENT_LEN, frame_len: float = FRAME_LEN,
                     threshold_db: float = 16.0, max_speakers: int | None = None) -> SplitSegments:
    """Segment a directory of WAV files, one speaker per sub-directory (or per
    file when the directory is flat). Speakers are numbered in sorted order."""
    root = Path(root)
    files = sorted(root.rglob("*.wav"))
    if not files:
        raise ValueError(f"no .wav files under {root}")
    nested = any(f.parent != root for f in files)
    speaker_key = (lambda f: str(f.parent.relative_to(root))) if nested else (lambda f: f.stem)
    keys = sorted({speaker_key(f) for f in files})
    if max_speakers is not None:
        keys = keys[:max_speakers]
    per_speaker = []
    for spk, key in enumerate(keys):
        segs = []
        for f in files:
            if speaker_key(f) == key:
                segs += vad_segment(load_wav(f), threshold_db, seg_len, frame_len, ground_speaker=spk, source=str(f))
        per_speaker.append(segs)
    return split_speaker_segments(per_speaker, train_seconds, test_seconds, seg_len, seed)


# ---------------------------------------------------------------------------
# Training


@dataclass
class TrainResult:
    net: object
    opt: object
    report: MetricsReport  # at the best Ground ACC evaluation
    final_report: MetricsReport  # at the last evaluation before stopping
    best_epoch: int
    stopped_epoch: int
    history: list
    constraint_errors: tuple


def _render(cs: ClusterSet, idx, clean, noise, thres_range, rng, feat: Featurizer) -> np.ndarray:
    """Feature maps for frames ``idx`` with a random half noise-augmented.

    Untouched frames reuse the precomputed ``clean`` maps.
    """
    audio, chosen = augment_half_batch(cs.audio[idx], noise, thres_range, rng)
    out = clean[idx]
    if len(chosen):
        out[chosen] = feat(audio[chosen])
    return out


def train_model(train_set: ClusterSet, test_set: ClusterSet, cfg: TrainConfig,
                feature_cfg: FeatureConfig = FeatureConfig(), seed: int = 0, noise=None,
                net_cfg: NetConfig | None = None, on_epoch=None) -> TrainResult:
    """Train until the Ground ACC has not improved for ``patience_epochs``.

    One epoch draws ``ceil(frames / batch_size)`` batches. Every
    ``eval_every`` epochs both partitions are scored; the weights with the
    best Ground ACC are kept. ``on_epoch(row)`` receives each history row.
    """
    feat = Featurizer(feature_cfg, np.float32)
    noise = noise_pool(10.0, seed) if noise is None else noise
    frame_n = train_set.audio.shape[1]
    net_cfg = NetConfig() if net_cfg is None else net_cfg
    net = init_net(seed, net_cfg.embed_dim, input_shape=feature_cfg.output_shape(frame_n),
                   normalize=cfg.mode == "triplet", channels=net_cfg.channels,
                   first_stride=net_cfg.first_stride, head_gain=net_cfg.head_gain)
    opt = init_optimizer(net)
    rng = np.random.default_rng([seed, 1])
    train_feats = feat(train_set.audio)
    test_feats = feat(test_set.audio)
    per_epoch = max(1, math.ceil(len(train_set) / cfg.batch_size))

    best = None
    last = None
    since_best = 0
    history = []
    epoch = 0
    for epoch in range(1, cfg.max_epochs + 1):
        losses = []
        for _ in range(per_epoch):
            if cfg.mode == "pairwise":
                b = sample_pair_batch(train_set, cfg.batch_size, rng, cfg.alpha)
                xl = _render(train_set, b.left, train_feats, noise, cfg.thres_range, rng, feat)
                xr = _render(train_set, b.right, train_feats, noise, cfg.thres_range, rng, feat)
                _, _, loss = pairwise_step(net, opt, xl, xr, b.target, cfg)
            else:
                b = sample_triplet_batch(train_set, cfg.batch_size, rng)
                xs = [_render(train_set, i, train_feats, noise, cfg.thres_range, rng, feat)
                      for i in (b.anchor, b.positive, b.negative)]
                labels = [train_set.pseudo_label[i] for i in (b.anchor, b.positive, b.negative)]
                _, _, loss = triplet_step(net, opt, *xs, labels, cfg)
            losses.append(loss)
        row = {"epoch": epoch, "train_loss": float(np.mean(losses))}
        stop = False
        if epoch % cfg.eval_every == 0:
            rep = last = evaluate(net, train_set, test_set, feature_cfg, seed=seed,
                                  train_features=train_feats, test_features=test_feats)
            row.update({"train_acc": rep.train_acc, "train_nmi": rep.train_nmi, "train_ari": rep.train_ari,
                        "ground_acc": rep.ground_acc, "ground_nmi": rep.ground_nmi, "ground_ari": rep.ground_ari})
            if best is None or rep.ground_acc > best[1].ground_acc:
                best = (epoch, rep, copy.deepcopy(net.state_dict()), copy.deepcopy(opt))
                since_best = 0
            else:
                since_best += cfg.eval_every
            stop = since_best >= cfg.patience_epochs
        history.append(row)
        if on_epoch is not None:
            on_epoch(row)
        if stop:
            break

    if last is None or history[-1].get("ground_acc") is None:  # no evaluation at the final epoch
        last = evaluate(net, train_set, test_set, feature_cfg, seed=seed,
                        train_features=train_feats, test_features=test_feats)
        if best is None or last.ground_acc > best[1].ground_acc:
            best = (epoch, last, copy.deepcopy(net.state_dict()), copy.deepcopy(opt))
    net.load_state_dict(best[2])
    return TrainResult(net, best[3], best[1], last, best[0], epoch, history, constraint_error_rates(train_set))


def prepare_cell(segments: SplitSegments, n_speakers: int, impurity: float, seed: int,
                 frame_len: float = FRAME_LEN) -> tuple[ClusterSet, ClusterSet]:
    """Cluster sets for one (speakers, impurity) cell: scrambled train, clean test."""
    sub = segments.subset(n_speakers)
    train = inject_impurity(build_cluster_set(sub.train, frame_len), impurity, seed)
    return train, build_cluster_set(sub.test, frame_len)


def poison_ground(cs: ClusterSet, seed: int) -> ClusterSet:
    """Replace ground labels with seeded garbage, for the information-barrier audit."""
    rng = np.random.default_rng([seed, 99])
    return replace(cs, ground_speaker=frozen_array(rng.integers(1000, 2000, len(cs))))


def write_history_csv(path, history) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HISTORY_FIELDS)
        for row in history:
            w.writerow([_fmt(row.get(f)) for f in HISTORY_FIELDS])


def _fmt(v):
    if v is None:
        return ""
    return f"{v:.8f}" if isinstance(v, float) else str(v)
