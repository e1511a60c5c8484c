"""Annotation and feature file formats plus the seeded synthetic dataset.

Annotations are JSON-lines, one video record per line. Feature files are
binary: magic ``MGFB``, u32 version=1, u32 T, u32 C, then T*C float32
little-endian values in time-major order. In memory features are float64
channel-major (C x T); the 32-bit representation exists only in files.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FEATURE_MAGIC = b"MGFB"
FEATURE_VERSION = 1
FEATURE_HEADER = struct.Struct("<4sIII")


class AnnotationFormatError(ValueError):
    """Bad annotation record; message carries the record number."""


class FeatureFormatError(ValueError):
    """Bad feature file; message carries the byte offset."""


class PackingError(ValueError):
    """Requested instances do not fit in the video."""


@dataclass
class ActionInstance:
    start_s: float
    end_s: float
    label: int
    score: float | None = None
    duplicate: bool = False

    @property
    def duration_s(self) -> float:
        return self.end_s - self.start_s

    def to_json(self) -> dict:
        out = {"start_s": self.start_s, "end_s": self.end_s, "label": self.label}
        if self.score is not None:
            out["score"] = self.score
        if self.duplicate:
            out["duplicate"] = True
        return out


@dataclass
class VideoAnnotation:
    video_id: str
    fps: float
    feature_stride: int
    duration_s: float
    instances: list = field(default_factory=list)

    @property
    def seconds_per_step(self) -> float:
        """Seconds covered by one feature step."""
        return self.feature_stride / self.fps

    def validate(self, record: int | str = "?"):
        if self.fps <= 0:
            raise AnnotationFormatError(f"record {record}: fps must be > 0, got {self.fps}")
        if self.feature_stride < 1:
            raise AnnotationFormatError(
                f"record {record}: feature_stride must be >= 1, got {self.feature_stride}"
            )
        if self.duration_s <= 0:
            raise AnnotationFormatError(
                f"record {record}: duration_s must be > 0, got {self.duration_s}"
            )
        for i, inst in enumerate(self.instances):
            if not isinstance(inst.label, int) or inst.label < 0:
                raise AnnotationFormatError(
                    f"record {record}: instance {i} has invalid label {inst.label!r}"
                )
            if not (0.0 <= inst.start_s < inst.end_s <= self.duration_s):
                raise AnnotationFormatError(
                    f"record {record}: instance {i} violates "
                    f"0 <= start ({inst.start_s}) < end ({inst.end_s}) <= duration "
                    f"({self.duration_s})"
                )
        return self

    def to_json(self) -> dict:
        return {
            "video_id": self.video_id,
            "fps": self.fps,
            "feature_stride": self.feature_stride,
            "duration_s": self.duration_s,
            "instances": [inst.to_json() for inst in self.instances],
        }


def _instance_from_json(obj: dict, record) -> ActionInstance:
    try:
        return ActionInstance(
            start_s=float(obj["start_s"]),
            end_s=float(obj["end_s"]),
            label=int(obj["label"]),
            score=float(obj["score"]) if "score" in obj else None,
            duplicate=bool(obj.get("duplicate", False)),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise AnnotationFormatError(f"record {record}: bad instance {obj!r}: {exc}") from exc


def annotation_from_json(obj: dict, record: int | str = "?") -> VideoAnnotation:
    try:
        ann = VideoAnnotation(
            video_id=str(obj["video_id"]),
            fps=float(obj["fps"]),
            feature_stride=int(obj["feature_stride"]),
            duration_s=float(obj["duration_s"]),
            instances=[_instance_from_json(o, record) for o in obj.get("instances", [])],
        )
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, AnnotationFormatError):
            raise
        raise AnnotationFormatError(f"record {record}: malformed record: {exc}") from exc
    return ann.validate(record)


def load_annotations(path) -> list[VideoAnnotation]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise AnnotationFormatError(f"record {lineno}: invalid JSON: {exc}") from exc
            out.append(annotation_from_json(obj, record=lineno))
    return out


def save_annotations(path, annotations):
    with open(path, "w", encoding="utf-8") as fh:
        for ann in annotations:
            fh.write(json.dumps(ann.to_json()) + "\n")


# ---------------------------------------------------------------------------
# Feature files
# ---------------------------------------------------------------------------

def save_features(path, features: np.ndarray):
    """Write a C x T float grid as a time-major float32 feature file."""
    if features.ndim != 2:
        raise FeatureFormatError(f"features must be 2-d (C x T), got {features.ndim}-d")
    c, t = features.shape
    payload = np.ascontiguousarray(features.T, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(FEATURE_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, t, c))
        fh.write(payload.tobytes())


def load_features(path) -> np.ndarray:
    """Read a feature file back as a float64 C x T grid."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < FEATURE_HEADER.size:
        raise FeatureFormatError(
            f"truncated header: file has {len(data)} bytes at offset 0, "
            f"need {FEATURE_HEADER.size}"
        )
    magic, version, t, c = FEATURE_HEADER.unpack_from(data, 0)
    if magic != FEATURE_MAGIC:
        raise FeatureFormatError(f"bad magic {magic!r} at offset 0")
    if version != FEATURE_VERSION:
        raise FeatureFormatError(f"unsupported version {version} at offset 4")
    expected = FEATURE_HEADER.size + 4 * t * c
    if len(data) != expected:
        raise FeatureFormatError(
            f"payload size mismatch at offset {FEATURE_HEADER.size}: "
            f"file has {len(data)} bytes, header implies {expected}"
        )
    if t * c == 0:
        raise FeatureFormatError(f"empty grid (T={t}, C={c}) at offset 8")
    flat = np.frombuffer(data, dtype="<f4", offset=FEATURE_HEADER.size)
    grid = flat.reshape(t, c).T.astype(np.float64)
    if not np.all(np.isfinite(grid)):
        raise FeatureFormatError("non-finite feature values in payload")
    return np.ascontiguousarray(grid)


# ---------------------------------------------------------------------------
# Synthetic dataset
# ---------------------------------------------------------------------------

@dataclass
class SynthSpec:
    num_classes: int = 5
    feature_channels: int = 16
    num_videos: int = 20
    fps: float = 8.0
    feature_stride: int = 2
    video_len_steps: tuple[int, int] = (192, 448)
    instances_per_video: tuple[int, int] = (3, 8)
    duration_ranges_s: list | None = None  # per class (min_s, max_s)
    zipf_exponent: float = 1.0
    noise: float = 0.1
    min_gap_steps: int = 4

    def __post_init__(self):
        if self.duration_ranges_s is None:
            # spread classes over short through long gestures
            base = [(0.75, 2.0), (1.0, 3.0), (1.5, 4.0), (2.0, 6.0), (3.0, 8.0)]
            self.duration_ranges_s = [base[i % len(base)] for i in range(self.num_classes)]
        if len(self.duration_ranges_s) != self.num_classes:
            raise ValueError("need one duration range per class")
        for lo, hi in self.duration_ranges_s:
            if not (0 < lo <= hi):
                raise ValueError(f"bad duration range ({lo}, {hi})")

    def to_json(self) -> dict:
        out = dict(self.__dict__)
        out["video_len_steps"] = list(self.video_len_steps)
        out["instances_per_video"] = list(self.instances_per_video)
        out["duration_ranges_s"] = [list(r) for r in self.duration_ranges_s]
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "SynthSpec":
        obj = dict(obj)
        if "video_len_steps" in obj:
            obj["video_len_steps"] = tuple(obj["video_len_steps"])
        if "instances_per_video" in obj:
            obj["instances_per_video"] = tuple(obj["instances_per_video"])
        if obj.get("duration_ranges_s") is not None:
            obj["duration_ranges_s"] = [tuple(r) for r in obj["duration_ranges_s"]]
        return cls(**obj)


def class_signatures(spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    """K x C unit-norm signature vectors, re-drawn if any pair is collinear."""
    for _ in range(100):
        sig = rng.normal(size=(spec.num_classes, spec.feature_channels))
        sig /= np.linalg.norm(sig, axis=1, keepdims=True)
        cos = np.abs(sig @ sig.T - np.eye(spec.num_classes))
        if cos.max() < 0.999:
            return sig
    raise RuntimeError("could not draw non-collinear signatures")


def zipf_probs(num_classes: int, exponent: float) -> np.ndarray:
    w = 1.0 / np.power(np.arange(1, num_classes + 1, dtype=np.float64), exponent)
    return w / w.sum()


def _place_instances(rng, t_steps: int, lengths: list[int], gap: int) -> list[int]:
    """Non-overlapping start steps for the given instance lengths, in order."""
    n = len(lengths)
    occupied = sum(lengths) + gap * (n + 1)
    slack = t_steps - occupied
    if slack < 0:
        raise PackingError(
            f"{n} instances totalling {sum(lengths)} steps (+gaps) exceed "
            f"video capacity {t_steps}"
        )
    cuts = np.sort(rng.integers(0, slack + 1, size=n))
    starts = []
    cursor = gap
    for i, length in enumerate(lengths):
        extra = int(cuts[i]) - (int(cuts[i - 1]) if i else 0)
        start = cursor + extra
        starts.append(start)
        cursor = start + length + gap
    return starts


def synth_generate(spec: SynthSpec, seed: int):
    """Deterministic long-tailed dataset: (annotations, features, signatures).

    Returns a list of (VideoAnnotation, features) pairs plus the signature
    matrix. Features are float32-quantized so file round-trips are bitwise.
    """
    rng = np.random.default_rng(seed)
    signatures = class_signatures(spec, rng)
    probs = zipf_probs(spec.num_classes, spec.zipf_exponent)
    step_s = spec.feature_stride / spec.fps
    videos = []
    for vid in range(spec.num_videos):
        t_steps = int(rng.integers(spec.video_len_steps[0], spec.video_len_steps[1] + 1))
        n_inst = int(rng.integers(spec.instances_per_video[0],
                                  spec.instances_per_video[1] + 1))
        labels = [int(rng.choice(spec.num_classes, p=probs)) for _ in range(n_inst)]
        lengths = []
        for lab in labels:
            lo, hi = spec.duration_ranges_s[lab]
            dur_s = rng.uniform(lo, hi)
            lengths.append(max(2, int(round(dur_s / step_s))))
        starts = _place_instances(rng, t_steps, lengths, spec.min_gap_steps)
        features = rng.normal(0.0, spec.noise, size=(spec.feature_channels, t_steps))
        instances = []
        for lab, start, length in zip(labels, starts, lengths):
            features[:, start:start + length] += signatures[lab][:, None]
            instances.append(ActionInstance(start_s=start * step_s,
                                            end_s=(start + length) * step_s,
                                            label=lab))
        instances.sort(key=lambda a: a.start_s)
        ann = VideoAnnotation(
            video_id=f"synth{seed:05d}_{vid:04d}",
            fps=spec.fps,
            feature_stride=spec.feature_stride,
            duration_s=t_steps * step_s,
            instances=instances,
        ).validate(vid)
        features = features.astype(np.float32).astype(np.float64)
        videos.append((ann, features))
    return videos, signatures


def save_dataset(out_dir, videos, spec: SynthSpec | None = None, seed: int | None = None):
    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    save_annotations(out / "gt.jsonl", [ann for ann, _ in videos])
    for ann, feats in videos:
        save_features(out / "features" / f"{ann.video_id}.mgfb", feats)
    if spec is not None:
        meta = {"spec": spec.to_json()}
        if seed is not None:
            meta["seed"] = seed
        (out / "meta.json").write_text(json.dumps(meta, indent=2))


def load_dataset(root) -> list[tuple[VideoAnnotation, np.ndarray]]:
    root = Path(root)
    anns = load_annotations(root / "gt.jsonl")
    return [(ann, load_features(root / "features" / f"{ann.video_id}.mgfb"))
            for ann in anns]


def category_histogram(annotations, num_classes: int | None = None) -> dict[int, int]:
    counts: dict[int, int] = {}
    if num_classes is not None:
        counts = {c: 0 for c in range(num_classes)}
    for ann in annotations:
        for inst in ann.instances:
            counts[inst.label] = counts.get(inst.label, 0) + 1
    return counts


def nearest_signature_accuracy(videos, signatures: np.ndarray) -> float:
    """Segment-mean nearest-signature classification accuracy over ground truth.

    Sanity gate: a solvable dataset scores ~1.0 here, so end-to-end detection
    failures point at the model, not the data.
    """
    total = 0
    correct = 0
    for ann, feats in videos:
        step_s = ann.seconds_per_step
        for inst in ann.instances:
            a = int(round(inst.start_s / step_s))
            b = int(round(inst.end_s / step_s))
            seg = feats[:, a:max(b, a + 1)].mean(axis=1)
            pred = int(np.argmin(np.linalg.norm(signatures - seg[None, :], axis=1)))
            total += 1
            correct += int(pred == inst.label)
    return correct / total if total else 0.0
