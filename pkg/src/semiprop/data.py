"""Data model, synthetic dataset generation, label maps, and feature file I/O.

Feature files are binary: a 16-byte magic/version header, a length-prefixed
UTF-8 JSON metadata block, then T*C little-endian float32 values in time-major
order. The dataset manifest is a JSON file listing every video with its
annotations (annotations are always written, the ``labeled`` flag decides
whether training may look at them).
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"SEQFEAT1"
FORMAT_VERSION = 1


class FormatError(Exception):
    """Malformed feature file or manifest."""


@dataclass
class AnnotationSet:
    """Ground-truth action instances in continuous snippet coordinates."""

    instances: list[tuple[float, float]] = field(default_factory=list)

    def validate(self, T: int) -> None:
        for ts, te in self.instances:
            if not (0.0 <= ts < te <= T):
                raise ValueError(f"annotation [{ts}, {te}] outside [0, {T}]")


@dataclass
class FeatureSequence:
    video_id: str
    values: np.ndarray  # (T, C) float32
    labeled: bool = True
    annotations: AnnotationSet | None = None

    @property
    def T(self) -> int:
        return self.values.shape[0]

    @property
    def C(self) -> int:
        return self.values.shape[1]

    def validate(self) -> None:
        if self.values.ndim != 2:
            raise ValueError("feature values must be a T x C matrix")
        if self.T < 4 or self.C < 1:
            raise ValueError(f"need T >= 4 and C >= 1, got T={self.T}, C={self.C}")
        if not np.isfinite(self.values).all():
            raise ValueError("feature values must be finite")
        if self.annotations is not None:
            self.annotations.validate(self.T)


@dataclass
class LabelMaps:
    g_start: np.ndarray  # (T,)
    g_end: np.ndarray  # (T,)
    g_iou: np.ndarray  # (D, T)
    valid_mask: np.ndarray  # (D, T) of 0/1


@dataclass
class VideoEntry:
    video_id: str
    T: int
    C: int
    labeled: bool
    feature_file: str
    annotations: list[tuple[float, float]]


@dataclass
class DatasetManifest:
    videos: list[VideoEntry]
    seed: int
    generator_params: dict

    def labeled_ids(self) -> list[str]:
        return [v.video_id for v in self.videos if v.labeled]

    def unlabeled_ids(self) -> list[str]:
        return [v.video_id for v in self.videos if not v.labeled]


def iou_1d(a: tuple[float, float], b: tuple[float, float]) -> float:
    """Temporal IoU of two (start, end) segments; 0 when disjoint."""
    if a[0] >= a[1] or b[0] >= b[1]:
        raise ValueError(f"degenerate segment: {a} vs {b}")
    inter = min(a[1], b[1]) - max(a[0], b[0])
    if inter <= 0.0:
        return 0.0
    union = (a[1] - a[0]) + (b[1] - b[0]) - inter
    return inter / union


def _region_overlap(lo: float, hi: float, rlo: float, rhi: float) -> float:
    return max(0.0, min(hi, rhi) - max(lo, rlo))


def build_label_maps(ann: AnnotationSet, T: int, D: int) -> LabelMaps:
    """BMN-style training targets for a T-snippet video with max duration D.

    Map entry (d, i) scores the candidate segment [i, i+d+1]. Boundary targets
    are soft IoR values of the width-1 snippet interval [t, t+1] against a
    region of width dur/5 centered on each ground-truth boundary.
    """
    if D > T:
        raise ValueError(f"D={D} must not exceed T={T}")
    g_start = np.zeros(T)
    g_end = np.zeros(T)
    g_iou = np.zeros((D, T))
    d_grid = np.arange(D)[:, None]
    i_grid = np.arange(T)[None, :]
    valid = ((i_grid + d_grid + 1) <= T).astype(np.float64)

    for ts, te in ann.instances:
        dur = te - ts
        half = dur / 10.0
        for t in range(T):
            s_ior = _region_overlap(t, t + 1, ts - half, ts + half)
            e_ior = _region_overlap(t, t + 1, te - half, te + half)
            g_start[t] = max(g_start[t], s_ior)
            g_end[t] = max(g_end[t], e_ior)
        starts = i_grid.astype(np.float64)
        ends = starts + d_grid + 1.0
        inter = np.minimum(ends, te) - np.maximum(starts, ts)
        inter = np.maximum(inter, 0.0)
        union = (ends - starts) + dur - inter
        g_iou = np.maximum(g_iou, inter / union)

    g_iou *= valid
    return LabelMaps(g_start=g_start, g_end=g_end, g_iou=g_iou, valid_mask=valid)


def write_features(seq: FeatureSequence, path: str | os.PathLike) -> None:
    seq.validate()
    meta = json.dumps({"video_id": seq.video_id, "T": seq.T, "C": seq.C}).encode("utf-8")
    payload = np.ascontiguousarray(seq.values, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, 0))
        fh.write(struct.pack("<I", len(meta)))
        fh.write(meta)
        fh.write(payload.tobytes())


def read_features(path: str | os.PathLike) -> FeatureSequence:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 20 or blob[:8] != MAGIC:
        raise FormatError(f"{path}: bad magic")
    version, _ = struct.unpack_from("<II", blob, 8)
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    (meta_len,) = struct.unpack_from("<I", blob, 16)
    try:
        meta = json.loads(blob[20:20 + meta_len].decode("utf-8"))
        T, C = int(meta["T"]), int(meta["C"])
        video_id = str(meta["video_id"])
    except (ValueError, KeyError, UnicodeDecodeError) as exc:
        raise FormatError(f"{path}: bad metadata block: {exc}") from exc
    payload = blob[20 + meta_len:]
    if len(payload) != 4 * T * C:
        raise FormatError(
            f"{path}: expected {T * C} float32 values, got {len(payload) / 4:g}"
        )
    values = np.frombuffer(payload, dtype="<f4").reshape(T, C).copy()
    if not np.isfinite(values).all():
        raise FormatError(f"{path}: non-finite payload value")
    return FeatureSequence(video_id=video_id, values=values)


def _plant_instances(rng: np.random.Generator, T: int) -> list[tuple[float, float]]:
    n = int(rng.integers(1, 4))
    placed: list[tuple[float, float]] = []
    for _ in range(n):
        dur = rng.uniform(0.05 * T, 0.4 * T)
        for _attempt in range(50):
            ts = rng.uniform(0.0, T - dur)
            te = ts + dur
            if all(te <= p0 or ts >= p1 for p0, p1 in placed):
                placed.append((ts, te))
                break
    placed.sort()
    return placed


def _synthesize_video(rng: np.random.Generator, T: int, C: int):
    values = rng.normal(0.0, 0.1, size=(T, C))
    instances = _plant_instances(rng, T)
    for ts, te in instances:
        sig = rng.normal(size=C)
        sig /= np.linalg.norm(sig)
        lo = max(0, int(math.floor(ts)))
        hi = min(T, int(math.ceil(te)))
        centers = np.arange(lo, hi) + 0.5
        # raised-cosine envelope over the instance span
        phase = np.clip((centers - ts) / (te - ts), 0.0, 1.0)
        env = 0.5 * (1.0 - np.cos(2.0 * np.pi * phase))
        values[lo:hi] += env[:, None] * sig[None, :]
        values[lo, 0] += 0.5
        values[hi - 1, 0] -= 0.5
    return values.astype(np.float32), instances


def gen_synthetic_dataset(
    out_dir: str | os.PathLike,
    n_videos: int,
    T: int,
    C: int,
    label_fraction: float,
    seed: int,
    sigma_frames: int = 16,
) -> DatasetManifest:
    """Generate a deterministic synthetic dataset with planted action segments.

    Each video gets 1-3 non-overlapping instances (duration uniform in
    [0.05T, 0.4T]) carved into zero-mean noise: a unit-norm channel signature
    under a raised-cosine envelope plus a +/-0.5 transient on channel 0 at the
    first and last covered snippet. Exactly round(label_fraction * n_videos)
    videos are flagged labeled; annotations are stored for every video.
    """
    if not (0.0 <= label_fraction <= 1.0):
        raise ValueError(f"label_fraction must be in [0,1], got {label_fraction}")
    if n_videos < 1 or T < 16 or C < 4:
        raise ValueError("need n_videos >= 1, T >= 16, C >= 4")
    os.makedirs(out_dir, exist_ok=True)
    n_labeled = round(label_fraction * n_videos)
    entries = []
    for idx in range(n_videos):
        rng = np.random.Generator(np.random.PCG64(seed ^ idx))
        values, instances = _synthesize_video(rng, T, C)
        vid = f"v{idx:05d}"
        fname = f"{vid}.feat"
        seq = FeatureSequence(video_id=vid, values=values, labeled=idx < n_labeled,
                              annotations=AnnotationSet(instances))
        write_features(seq, os.path.join(out_dir, fname))
        entries.append(VideoEntry(video_id=vid, T=T, C=C, labeled=idx < n_labeled,
                                  feature_file=fname, annotations=[list(p) for p in instances]))
    manifest = DatasetManifest(
        videos=entries, seed=seed,
        generator_params={"n_videos": n_videos, "T": T, "C": C,
                          "label_fraction": label_fraction,
                          "sigma_frames": sigma_frames,
                          "noise_std": 0.1, "signature_scale": 1.0},
    )
    write_manifest(manifest, os.path.join(out_dir, "manifest.json"))
    return manifest


def write_manifest(manifest: DatasetManifest, path: str | os.PathLike) -> None:
    doc = {
        "seed": manifest.seed,
        "generator_params": manifest.generator_params,
        "videos": [
            {
                "video_id": v.video_id, "T": v.T, "C": v.C, "labeled": v.labeled,
                "feature_file": v.feature_file, "annotations": v.annotations,
            }
            for v in manifest.videos
        ],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_manifest(path: str | os.PathLike) -> DatasetManifest:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
        videos = [
            VideoEntry(
                video_id=v["video_id"], T=int(v["T"]), C=int(v["C"]),
                labeled=bool(v["labeled"]), feature_file=v["feature_file"],
                annotations=[tuple(a) for a in v["annotations"]],
            )
            for v in doc["videos"]
        ]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise FormatError(f"{path}: bad manifest: {exc}") from exc
    ids = [v.video_id for v in videos]
    if len(set(ids)) != len(ids):
        raise FormatError(f"{path}: duplicate video ids")
    return DatasetManifest(videos=videos, seed=int(doc["seed"]),
                           generator_params=doc.get("generator_params", {}))


def load_video(manifest_path: str | os.PathLike, entry: VideoEntry) -> FeatureSequence:
    base = os.path.dirname(os.fspath(manifest_path))
    seq = read_features(os.path.join(base, entry.feature_file))
    seq.labeled = entry.labeled
    seq.annotations = AnnotationSet([tuple(a) for a in entry.annotations])
    return seq
