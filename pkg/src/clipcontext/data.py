"""Dataset records, on-disk format, window building, sampling, synthesis.

On disk a dataset is a directory of three files:

  manifest.json    format_version, dims, splits with per-clip row pointers,
                   sha256 checksums of both blobs
  clip_feats.bin   one row of d_v little-endian float32 per clip
  token_feats.bin  one row of d_w little-endian float32 per caption token

The loader verifies checksums and every row pointer before returning, and
write->load round-trips are bit exact.

The synthetic generator builds videos from a topic/step grid. Captions name
(topic, step) cleanly. Clip features mix a (topic, step) signal with a
topic-shared per-step confuser, weighted by the ambiguity knob: at high
ambiguity a single clip reveals its step but not its topic. Each topic walks
the step cycle with a distinct stride, so the steps of neighbouring clips
identify the topic and a context window disambiguates what the centre clip
alone cannot.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError, DataFormatError

FORMAT_VERSION = 1


@dataclass
class ClipRecord:
    clip_id: str
    caption: str
    clip_feature: np.ndarray      # (d_v,) float32
    token_features: np.ndarray    # (n_tokens, d_w) float32
    t_start: float | None = None
    t_end: float | None = None


@dataclass
class VideoRecord:
    video_id: str
    clips: list[ClipRecord]


@dataclass
class FeatureDataset:
    d_v: int
    d_w: int
    L_max: int
    splits: dict[str, list[VideoRecord]]

    def split(self, name: str) -> list[VideoRecord]:
        if name not in self.splits:
            raise DataFormatError(f"unknown split {name!r}, have {sorted(self.splits)}")
        return self.splits[name]


@dataclass
class ContextWindow:
    """2m+1 clip features centred on one clip, boundary slots duplicated."""

    video_id: str
    centre_index: int
    m: int
    features: np.ndarray        # (2m+1, d_v)
    source_indices: np.ndarray  # (2m+1,) clip index each slot was read from
    padded: np.ndarray          # (2m+1,) True where clamping duplicated a boundary clip


@dataclass
class BatchPair:
    video: VideoRecord
    clip_index: int
    window: ContextWindow

    @property
    def clip(self) -> ClipRecord:
        return self.video.clips[self.clip_index]


@dataclass
class Batch:
    pairs: list[BatchPair]
    # Per pair: clip indices (same video) usable as neighbour negatives.
    neighbour_indices: list[list[int]] = field(default_factory=list)


# ---------------------------------------------------------------------------
# windows and sampling


def window_source_indices(n_clips: int, centre: int, m: int) -> list[int]:
    """Indices feeding each of the 2m+1 slots; out-of-range offsets clamp."""
    if not 0 <= centre < n_clips:
        raise ContractError(f"centre {centre} out of range for {n_clips} clips")
    if m < 0:
        raise ContractError(f"window radius must be >= 0, got {m}")
    return [min(max(centre + a, 0), n_clips - 1) for a in range(-m, m + 1)]


def build_context_window(video: VideoRecord, centre: int, m: int) -> ContextWindow:
    src = window_source_indices(len(video.clips), centre, m)
    feats = np.stack([video.clips[i].clip_feature for i in src])
    padded = np.array([i != centre + a for a, i in zip(range(-m, m + 1), src)])
    return ContextWindow(video.video_id, centre, m, feats, np.array(src), padded)


def neighbour_candidates(video: VideoRecord, centre: int, m: int) -> list[int]:
    """Valid neighbour clip indices for (video, centre) at radius m.

    Candidate offsets exclude zero; out-of-range candidates clamp to the video
    extent and collapse onto existing indices, so duplicates (and the centre
    itself) are dropped. Neighbours whose caption text equals the centre's
    are excluded.
    """
    if m < 1:
        raise ContractError(f"neighbour sampling needs radius >= 1, got {m}")
    n = len(video.clips)
    out: list[int] = []
    seen = {centre}
    for a in list(range(-m, 0)) + list(range(1, m + 1)):
        idx = min(max(centre + a, 0), n - 1)
        if idx in seen:
            continue
        seen.add(idx)
        if video.clips[idx].caption != video.clips[centre].caption:
            out.append(idx)
    return out


def sample_neighbour(video: VideoRecord, centre: int, m: int, rng: np.random.Generator) -> int | None:
    """Uniform draw from neighbour_candidates; None when no candidate exists."""
    picks = sample_neighbours(video, centre, m, 1, rng)
    return picks[0] if picks else None


def sample_neighbours(
    video: VideoRecord, centre: int, m: int, k: int, rng: np.random.Generator
) -> list[int]:
    """Up to k distinct neighbour indices, uniformly ordered."""
    cands = neighbour_candidates(video, centre, m)
    if not cands or k < 1:
        return []
    perm = rng.permutation(len(cands))
    return [cands[int(i)] for i in perm[:k]]


def sample_batch(
    videos: list[VideoRecord],
    batch_size: int,
    m: int,
    k_neg: int,
    rng: np.random.Generator,
    window_radius: int | None = None,
) -> Batch:
    """Draw batch_size clip-caption pairs from the global clip pool.

    Sampling is uniform without replacement; if the pool is smaller than the
    batch it falls back to uniform with replacement. `m` governs neighbour
    sampling, `window_radius` (default m) the clip windows that get built.
    """
    if batch_size < 1:
        raise ContractError(f"batch_size must be >= 1, got {batch_size}")
    pool = [(vi, ci) for vi, v in enumerate(videos) for ci in range(len(v.clips))]
    if not pool:
        raise ContractError("cannot sample from an empty clip pool")
    if batch_size <= len(pool):
        chosen = rng.permutation(len(pool))[:batch_size]
    else:
        chosen = rng.integers(0, len(pool), size=batch_size)
    radius = m if window_radius is None else window_radius
    pairs: list[BatchPair] = []
    neighbours: list[list[int]] = []
    for flat in chosen:
        vi, ci = pool[int(flat)]
        video = videos[vi]
        pairs.append(BatchPair(video, ci, build_context_window(video, ci, radius)))
        if m >= 1 and k_neg >= 1:
            neighbours.append(sample_neighbours(video, ci, m, k_neg, rng))
        else:
            neighbours.append([])
    return Batch(pairs, neighbours)


# ---------------------------------------------------------------------------
# on-disk format


def _sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_dataset(ds: FeatureDataset, path: str) -> None:
    """Write manifest + blobs. Validates every record before touching disk."""
    clip_rows: list[np.ndarray] = []
    token_rows: list[np.ndarray] = []
    manifest_splits: dict[str, list] = {}
    seen_ids: set[str] = set()
    token_row = 0
    for split_name, videos in ds.splits.items():
        vids = []
        for video in videos:
            clips = []
            for clip in video.clips:
                if not clip.caption:
                    raise DataFormatError(f"clip {clip.clip_id}: empty caption")
                if clip.clip_id in seen_ids:
                    raise DataFormatError(f"duplicate clip_id {clip.clip_id}")
                seen_ids.add(clip.clip_id)
                feat = np.asarray(clip.clip_feature, dtype="<f4")
                toks = np.asarray(clip.token_features, dtype="<f4")
                if feat.shape != (ds.d_v,):
                    raise DataFormatError(
                        f"clip {clip.clip_id}: feature shape {feat.shape} != ({ds.d_v},)"
                    )
                if toks.ndim != 2 or toks.shape[1] != ds.d_w:
                    raise DataFormatError(
                        f"clip {clip.clip_id}: token shape {toks.shape} incompatible with d_w={ds.d_w}"
                    )
                if not 1 <= toks.shape[0] <= ds.L_max:
                    raise DataFormatError(
                        f"clip {clip.clip_id}: token count {toks.shape[0]} outside [1, {ds.L_max}]"
                    )
                clips.append(
                    {
                        "clip_id": clip.clip_id,
                        "caption": clip.caption,
                        "t_start": clip.t_start,
                        "t_end": clip.t_end,
                        "feat_row": len(clip_rows),
                        "token_row_start": token_row,
                        "token_count": int(toks.shape[0]),
                    }
                )
                clip_rows.append(feat)
                token_rows.append(toks)
                token_row += toks.shape[0]
            vids.append({"video_id": video.video_id, "clips": clips})
        manifest_splits[split_name] = vids

    os.makedirs(path, exist_ok=True)
    feat_path = os.path.join(path, "clip_feats.bin")
    tok_path = os.path.join(path, "token_feats.bin")
    with open(feat_path, "wb") as fh:
        fh.write(np.concatenate(clip_rows).tobytes() if clip_rows else b"")
    with open(tok_path, "wb") as fh:
        fh.write(np.concatenate(token_rows).tobytes() if token_rows else b"")
    manifest = {
        "format_version": FORMAT_VERSION,
        "d_v": ds.d_v,
        "d_w": ds.d_w,
        "L_max": ds.L_max,
        "splits": manifest_splits,
        "checksums": {
            "clip_feats.bin": _sha256(feat_path),
            "token_feats.bin": _sha256(tok_path),
        },
    }
    with open(os.path.join(path, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1)
        fh.write("\n")


def load_dataset(path: str) -> FeatureDataset:
    """Load and fully validate a dataset directory."""
    man_path = os.path.join(path, "manifest.json")
    try:
        with open(man_path, "r", encoding="utf-8") as fh:
            manifest = json.load(fh)
    except json.JSONDecodeError as e:
        raise DataFormatError(f"{man_path}: invalid JSON ({e})") from e

    for key in ("format_version", "d_v", "d_w", "L_max", "splits", "checksums"):
        if key not in manifest:
            raise DataFormatError(f"{man_path}: missing key {key!r}")
    if manifest["format_version"] != FORMAT_VERSION:
        raise DataFormatError(
            f"{man_path}: format_version {manifest['format_version']} unsupported"
        )
    d_v, d_w, l_max = int(manifest["d_v"]), int(manifest["d_w"]), int(manifest["L_max"])

    blobs: dict[str, np.ndarray] = {}
    for name, dim in (("clip_feats.bin", d_v), ("token_feats.bin", d_w)):
        blob_path = os.path.join(path, name)
        if not os.path.exists(blob_path):
            raise DataFormatError(f"{blob_path}: missing blob")
        digest = _sha256(blob_path)
        if digest != manifest["checksums"].get(name):
            raise DataFormatError(f"{blob_path}: sha256 mismatch")
        raw = np.fromfile(blob_path, dtype="<f4")
        if dim > 0 and raw.size % dim != 0:
            raise DataFormatError(f"{blob_path}: size {raw.size} not a multiple of {dim}")
        blobs[name] = raw.reshape(-1, dim)

    feats, tokens = blobs["clip_feats.bin"], blobs["token_feats.bin"]
    splits: dict[str, list[VideoRecord]] = {}
    seen_ids: set[str] = set()
    for split_name, vids in manifest["splits"].items():
        videos = []
        for vid in vids:
            clips = []
            for rec in vid["clips"]:
                cid = rec.get("clip_id", "<missing id>")
                if cid in seen_ids:
                    raise DataFormatError(f"clip {cid}: duplicate clip_id")
                seen_ids.add(cid)
                if not rec.get("caption"):
                    raise DataFormatError(f"clip {cid}: empty caption")
                row = int(rec["feat_row"])
                if not 0 <= row < feats.shape[0]:
                    raise DataFormatError(
                        f"clip {cid}: feat_row {row} out of range ({feats.shape[0]} rows)"
                    )
                t0, cnt = int(rec["token_row_start"]), int(rec["token_count"])
                if not 1 <= cnt <= l_max:
                    raise DataFormatError(f"clip {cid}: token_count {cnt} outside [1, {l_max}]")
                if t0 < 0 or t0 + cnt > tokens.shape[0]:
                    raise DataFormatError(f"clip {cid}: token rows [{t0}, {t0 + cnt}) out of range")
                ts, te = rec.get("t_start"), rec.get("t_end")
                if ts is not None and te is not None and te < ts:
                    raise DataFormatError(f"clip {cid}: t_end {te} < t_start {ts}")
                clips.append(
                    ClipRecord(
                        clip_id=cid,
                        caption=rec["caption"],
                        clip_feature=feats[row].copy(),
                        token_features=tokens[t0 : t0 + cnt].copy(),
                        t_start=ts,
                        t_end=te,
                    )
                )
            videos.append(VideoRecord(vid["video_id"], clips))
        splits[split_name] = videos
    return FeatureDataset(d_v=d_v, d_w=d_w, L_max=l_max, splits=splits)


# ---------------------------------------------------------------------------
# synthetic generation


@dataclass
class GenConfig:
    n_videos: int = 20            # training videos
    clips_per_video: int = 8
    d_v: int = 48
    d_w: int = 32
    n_topics: int = 4
    ambiguity: float = 0.0        # 0: clip feature names its (topic, step); 1: step only
    noise: float = 0.15           # per-coordinate feature noise
    test_videos: int = 13
    L_max: int = 16

    def validate(self) -> None:
        k = self.clips_per_video
        if self.n_videos < 1 or self.test_videos < 1 or k < 1:
            raise ConfigError("n_videos, test_videos and clips_per_video must be >= 1")
        if not 0.0 <= self.ambiguity <= 1.0:
            raise ConfigError(f"ambiguity must lie in [0, 1], got {self.ambiguity}")
        if self.noise < 0:
            raise ConfigError(f"noise must be >= 0, got {self.noise}")
        if self.L_max < 2:
            raise ConfigError("L_max must be >= 2 (captions carry two tokens)")
        if self.d_v < self.n_topics * k + k:
            raise ConfigError(
                f"d_v={self.d_v} too small for {self.n_topics} topics x {k} steps "
                f"(needs >= {self.n_topics * k + k} for orthogonal signal banks)"
            )
        if self.d_w < self.n_topics + k:
            raise ConfigError(
                f"d_w={self.d_w} too small for {self.n_topics} topics + {k} steps"
            )
        if k >= 2 and self.n_topics > len(_units_mod(k)):
            raise ConfigError(
                f"n_topics={self.n_topics} exceeds the {len(_units_mod(k))} distinct "
                f"step strides available with clips_per_video={k}"
            )
        if self.n_topics < 1:
            raise ConfigError("n_topics must be >= 1")


def _units_mod(k: int) -> list[int]:
    return [a for a in range(1, k) if math.gcd(a, k) == 1]


def _orthonormal_columns(rng: np.random.Generator, dim: int, n_cols: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(dim, n_cols)))
    # Canonical sign so the basis is a pure function of the rng draws.
    return q * np.sign(np.diagonal(r))


def generate_synthetic(cfg: GenConfig, seed: int) -> FeatureDataset:
    """Build train + test splits from a deterministic topic/step construction."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    k = cfg.clips_per_video
    g_n = cfg.n_topics

    step_sig = _orthonormal_columns(rng, cfg.d_v, g_n * k + k)
    topic_step = step_sig[:, : g_n * k].reshape(cfg.d_v, g_n, k)
    confuser = step_sig[:, g_n * k :]
    word_bank = _orthonormal_columns(rng, cfg.d_w, g_n + k)
    topic_words, step_words = word_bank[:, :g_n], word_bank[:, g_n:]
    strides = _units_mod(k)[:g_n] if k >= 2 else [0] * g_n

    def make_video(video_id: str, topic: int) -> VideoRecord:
        offset = int(rng.integers(k))
        clips = []
        for j in range(k):
            step = (offset + strides[topic] * j) % k
            feat = (
                (1.0 - cfg.ambiguity) * topic_step[:, topic, step]
                + cfg.ambiguity * confuser[:, step]
                + cfg.noise * rng.normal(size=cfg.d_v)
            )
            toks = np.stack([topic_words[:, topic], step_words[:, step]])
            clips.append(
                ClipRecord(
                    clip_id=f"{video_id}_c{j:03d}",
                    caption=f"topic{topic:02d} step{step:02d}",
                    clip_feature=feat.astype(np.float32),
                    token_features=toks.astype(np.float32),
                    t_start=float(j),
                    t_end=float(j + 1),
                )
            )
        return VideoRecord(video_id, clips)

    train = [make_video(f"train_v{v:03d}", v % g_n) for v in range(cfg.n_videos)]
    test = [make_video(f"test_v{v:03d}", v % g_n) for v in range(cfg.test_videos)]
    return FeatureDataset(cfg.d_v, cfg.d_w, cfg.L_max, {"train": train, "test": test})


def nearest_neighbour_accuracy(ds: FeatureDataset) -> float:
    """Caption accuracy of a 1-NN classifier on raw clip features.

    Each test clip takes the caption of its cosine-nearest train clip. This
    is the separability diagnostic for synthetic data: near 1.0 when single
    clips identify their caption, near 1/n_topics when only the step is
    visible and the topic needs context.
    """
    train_feats, train_caps = [], []
    for video in ds.split("train"):
        for clip in video.clips:
            train_feats.append(clip.clip_feature.astype(np.float64))
            train_caps.append(clip.caption)
    if not train_feats:
        raise ContractError("nearest_neighbour_accuracy: empty train split")
    ref = np.stack(train_feats)
    norms = np.linalg.norm(ref, axis=1, keepdims=True)
    if (norms == 0).any():
        raise ContractError("nearest_neighbour_accuracy: zero train feature")
    ref /= norms
    hits = total = 0
    for video in ds.split("test"):
        for clip in video.clips:
            f = clip.clip_feature.astype(np.float64)
            n = np.linalg.norm(f)
            total += 1
            if n == 0:
                continue
            hits += train_caps[int(np.argmax(ref @ (f / n)))] == clip.caption
    return hits / total if total else 0.0
