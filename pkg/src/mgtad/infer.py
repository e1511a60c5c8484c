"""Decode head outputs into detections, suppress duplicates, stream long videos.

Sequences longer than the inference window are processed in half-overlapping
windows; every anchor position is owned by exactly one window (midpoints
between window centers form the tiling), so the union of per-window decodes
is independent of how windows are scheduled. Suppression factorizes over
connected components of the same-class overlap graph, which lets the
streaming path finalize a component as soon as no future window can reach
it — the finalized results are identical to running the whole sequence at
once.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .data import VideoAnnotation
from .evaluation import tiou
from .head import HeadOutputs
from .model import Detector


@dataclass
class Detection:
    start_s: float
    end_s: float
    label: int
    score: float
    video_id: str = ""

    def __post_init__(self):
        if self.end_s <= self.start_s:
            raise ValueError(f"detection with end <= start: {self.start_s}..{self.end_s}")
        if self.start_s < 0:
            raise ValueError(f"negative start {self.start_s}")
        if not 0.0 < self.score < 1.0:
            raise ValueError(f"score {self.score} outside (0, 1)")

    @property
    def interval(self):
        return (self.start_s, self.end_s)

    def to_json(self) -> dict:
        return {"video_id": self.video_id, "start_s": self.start_s,
                "end_s": self.end_s, "label": self.label, "score": self.score}

    @classmethod
    def from_json(cls, obj: dict) -> "Detection":
        return cls(start_s=float(obj["start_s"]), end_s=float(obj["end_s"]),
                   label=int(obj["label"]), score=float(obj["score"]),
                   video_id=str(obj.get("video_id", "")))


@dataclass
class InferConfig:
    score_threshold: float = 0.1
    nms_sigma: float = 0.5
    min_score: float = 0.001
    window: int = 512  # base timesteps


def save_detections(path, detections):
    with open(path, "w", encoding="utf-8") as fh:
        for d in detections:
            fh.write(json.dumps(d.to_json()) + "\n")


def load_detections(path) -> list[Detection]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(Detection.from_json(json.loads(line)))
    return out


def group_by_video(items) -> dict:
    out: dict[str, list] = {}
    for it in items:
        out.setdefault(it.video_id, []).append(it)
    return out


# ---------------------------------------------------------------------------
# Decoding
# ---------------------------------------------------------------------------

def decode(outputs: HeadOutputs, strides, seconds_per_step: float,
           duration_s: float, score_threshold: float,
           base_offset: int = 0, clip_base: tuple | None = None,
           video_id: str = "") -> list[Detection]:
    """Turn per-level probabilities and offsets into scored detections.

    At every (level, timestep, class) with probability >= threshold the
    interval is (t - d_s, t + d_e) level steps around the anchor, mapped to
    base steps by the level stride and to seconds by ``seconds_per_step``.
    ``base_offset`` shifts anchors of a windowed sequence into global
    coordinates; ``clip_base`` bounds intervals to the window extent.
    Zero-length intervals after clipping are dropped.
    """
    if not 0.0 < score_threshold < 1.0:
        raise ValueError(f"score threshold {score_threshold} outside (0, 1)")
    dets = []
    for probs, offs, stride in zip(outputs.class_probs, outputs.offsets, strides):
        labels, ts = np.nonzero(probs >= score_threshold)
        for c, t in zip(labels, ts):
            d_s = offs[0, t]
            d_e = offs[1, t]
            start_b = base_offset + (t - d_s) * stride
            end_b = base_offset + (t + d_e) * stride
            if clip_base is not None:
                start_b = max(start_b, clip_base[0])
                end_b = min(end_b, clip_base[1])
            start_s = max(0.0, start_b * seconds_per_step)
            end_s = min(duration_s, end_b * seconds_per_step)
            if end_s > start_s:
                dets.append(Detection(start_s=float(start_s), end_s=float(end_s),
                                      label=int(c), score=float(probs[c, t]),
                                      video_id=video_id))
    return dets


def _selection_key(d: Detection, score: float, idx: int):
    # deterministic: score desc, then earlier start, then lower label id
    return (-score, d.start_s, d.label, idx)


def soft_nms(detections, sigma: float = 0.5, min_score: float = 0.001) -> list[Detection]:
    """Gaussian score-decay suppression, class-wise; drops below ``min_score``.

    Intervals and labels are never modified; scores only decrease. Output is
    sorted by final score (ties: earlier start, lower label id).
    """
    scores = [d.score for d in detections]
    alive = list(range(len(detections)))
    out = []
    while alive:
        best = min(alive, key=lambda i: _selection_key(detections[i], scores[i], i))
        alive.remove(best)
        db = detections[best]
        if scores[best] >= min_score:
            out.append(Detection(start_s=db.start_s, end_s=db.end_s, label=db.label,
                                 score=scores[best], video_id=db.video_id))
        for i in alive:
            di = detections[i]
            if di.label != db.label:
                continue
            ov = tiou(di.interval, db.interval)
            if ov > 0.0:
                scores[i] *= float(np.exp(-(ov * ov) / sigma))
    return out


# ---------------------------------------------------------------------------
# Windowed inference (shared by offline and streaming paths)
# ---------------------------------------------------------------------------

def window_starts(t_steps: int, window: int) -> list[int]:
    """Half-overlapping window starts covering [0, t); tail window realigned."""
    if t_steps <= window:
        return [0]
    hop = window // 2
    starts = list(range(0, t_steps - window + 1, hop))
    if starts[-1] + window < t_steps:
        starts.append(t_steps - window)
    return starts


def _ownership_bounds(starts: list[int], window: int, t_steps: int) -> list[tuple]:
    """Disjoint anchor-ownership regions, split at midpoints between centers."""
    bounds = []
    for i, s in enumerate(starts):
        lo = 0 if i == 0 else (starts[i - 1] + s + window) // 2
        hi = t_steps if i == len(starts) - 1 else (s + starts[i + 1] + window) // 2
        bounds.append((lo, hi))
    return bounds


def _decode_window(model: Detector, feats: np.ndarray, ann: VideoAnnotation,
                   cfg: InferConfig, start: int, own: tuple) -> list[Detection]:
    outputs = model.predict(feats[:, start:start + cfg.window])
    window_len = min(cfg.window, feats.shape[1] - start)
    dets = decode(outputs, model.level_strides(), ann.seconds_per_step,
                  ann.duration_s, cfg.score_threshold, base_offset=start,
                  clip_base=(start, start + window_len), video_id=ann.video_id)
    kept = []
    for d, anchor in zip(dets, _decode_anchors(outputs, model.level_strides(),
                                               cfg.score_threshold, start)):
        if own[0] <= anchor < own[1]:
            kept.append(d)
    return kept


def _decode_anchors(outputs: HeadOutputs, strides, score_threshold: float,
                    base_offset: int) -> list[int]:
    anchors = []
    for probs, stride in zip(outputs.class_probs, strides):
        _, ts = np.nonzero(probs >= score_threshold)
        anchors.extend(base_offset + int(t) * stride for t in ts)
    return anchors


def iter_window_detections(model: Detector, feats: np.ndarray,
                           ann: VideoAnnotation, cfg: InferConfig):
    """Yield (window_start, owned raw detections) for each window in order."""
    t_steps = feats.shape[1]
    min_t = 2 ** model.cfg.num_levels
    if cfg.window < min_t:
        raise ValueError(f"window {cfg.window} shorter than minimum length {min_t}")
    starts = window_starts(t_steps, cfg.window)
    bounds = _ownership_bounds(starts, cfg.window, t_steps)
    for s, own in zip(starts, bounds):
        yield s, _decode_window(model, feats, ann, cfg, s, own)


def detect(model: Detector, feats: np.ndarray, ann: VideoAnnotation,
           cfg: InferConfig | None = None) -> list[Detection]:
    """Offline detection: decode every window, then suppress jointly."""
    cfg = cfg or InferConfig()
    raw = []
    for _, dets in iter_window_detections(model, feats, ann, cfg):
        raw.extend(dets)
    return soft_nms(raw, cfg.nms_sigma, cfg.min_score)


# ---------------------------------------------------------------------------
# Streaming detection
# ---------------------------------------------------------------------------

def _overlap_components(dets: list[Detection]) -> list[list[int]]:
    """Connected components of the same-class temporal-overlap graph."""
    n = len(dets)
    parent = list(range(n))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for i in range(n):
        for j in range(i + 1, n):
            if dets[i].label != dets[j].label:
                continue
            if tiou(dets[i].interval, dets[j].interval) > 0.0:
                ra, rb = find(i), find(j)
                if ra != rb:
                    parent[rb] = ra
    comps: dict[int, list[int]] = {}
    for i in range(n):
        comps.setdefault(find(i), []).append(i)
    return list(comps.values())


class _StreamState:
    """Holds raw not-yet-finalized detections, finalizing isolated components."""

    def __init__(self, cfg: InferConfig):
        self.cfg = cfg
        self.active: list[Detection] = []

    def add(self, dets):
        self.active.extend(dets)

    def finalize_before(self, boundary_s: float | None):
        """Suppress and release components no future detection can touch.

        Future windows only produce intervals at or after ``boundary_s``;
        a component whose members all end by then is final. ``None`` flushes
        everything.
        """
        done = []
        still: list[Detection] = []
        for comp in _overlap_components(self.active):
            members = [self.active[i] for i in comp]
            if boundary_s is None or all(d.end_s <= boundary_s for d in members):
                done.extend(soft_nms(members, self.cfg.nms_sigma, self.cfg.min_score))
            else:
                still.extend(members)
        self.active = still
        done.sort(key=lambda d: (-d.score, d.start_s, d.label))
        return done


def detect_stream(model: Detector, reader, ann: VideoAnnotation,
                  cfg: InferConfig | None = None):
    """Generator of finalized detections over a chunked feature stream.

    ``reader`` is either a full C x T array or an iterable of C x n chunks.
    Detections are yielded once the window frontier has passed them by half
    a window; a full pass equals offline ``detect`` up to emission order.
    """
    cfg = cfg or InferConfig()
    min_t = 2 ** model.cfg.num_levels
    if cfg.window < min_t:
        raise ValueError(f"window {cfg.window} shorter than minimum length {min_t}")
    hop = cfg.window // 2
    state = _StreamState(cfg)
    sps = ann.seconds_per_step

    if isinstance(reader, np.ndarray):
        chunks = iter([reader])
    else:
        chunks = iter(reader)

    buffer = None          # retained feature columns
    buffer_start = 0       # global index of buffer[:, 0]
    consumed = 0           # total columns received
    next_start = 0         # next regular window start
    done_regular = False
    ended = False
    pending: list[int] = []

    def run_window(s: int):
        local = buffer[:, s - buffer_start:s - buffer_start + cfg.window]
        outputs = model.predict(local)
        wlen = local.shape[1]
        dets = decode(outputs, model.level_strides(), sps, ann.duration_s,
                      cfg.score_threshold, base_offset=s,
                      clip_base=(s, s + wlen), video_id=ann.video_id)
        anchors = _decode_anchors(outputs, model.level_strides(),
                                  cfg.score_threshold, s)
        return dets, anchors

    windows_run: list[tuple[int, list[Detection], list[int]]] = []

    while not ended:
        chunk = next(chunks, None)
        if chunk is None:
            ended = True
        else:
            chunk = np.asarray(chunk, dtype=np.float64)
            buffer = chunk.copy() if buffer is None else np.hstack([buffer, chunk])
            consumed += chunk.shape[1]
        # run every regular window fully covered by the data so far
        while not done_regular and consumed >= next_start + cfg.window:
            windows_run.append((next_start, *run_window(next_start)))
            next_start += hop
        if ended:
            t_total = consumed
            if t_total == 0:
                break
            starts = window_starts(t_total, cfg.window)
            for s in starts:
                if not any(ws == s for ws, _, _ in windows_run):
                    windows_run.append((s, *run_window(s)))
            windows_run.sort(key=lambda w: w[0])
            _emit_owned(windows_run, cfg.window, t_total, state)
            yield from state.finalize_before(None)
            break
        # trim the buffer: only columns from the next window start onward matter
        if buffer is not None and next_start > buffer_start:
            keep_from = min(next_start, consumed) - buffer_start
            buffer = buffer[:, keep_from:]
            buffer_start += keep_from
        # mid-stream finalization: future windows start at >= next_start
        if windows_run and not done_regular:
            ready = [w for w in windows_run if w[0] + cfg.window <= consumed]
            if len(ready) >= 2:
                # ownership of all but the latest window is settled
                settled, windows_run = _split_settled(windows_run, cfg.window, state)
                boundary_s = next_start * sps
                yield from state.finalize_before(boundary_s)


def _emit_owned(windows, window: int, t_total: int, state: _StreamState):
    starts = [w[0] for w in windows]
    bounds = _ownership_bounds(starts, window, t_total)
    for (s, dets, anchors), own in zip(windows, bounds):
        state.add([d for d, a in zip(dets, anchors) if own[0] <= a < own[1]])


def _split_settled(windows, window: int, state: _StreamState):
    """Move detections with settled ownership into the stream state.

    A window's ownership upper bound depends on the next window's start, so
    all but the most recent window are settled once a newer one has run.
    """
    if len(windows) < 2:
        return [], windows
    settled = windows[:-1]
    last = windows[-1]
    for i, (s, dets, anchors) in enumerate(settled):
        lo = 0 if i == 0 and s == 0 else (
            0 if i == 0 else (settled[i - 1][0] + s + window) // 2)
        nxt = settled[i + 1][0] if i + 1 < len(settled) else last[0]
        hi = (s + nxt + window) // 2
        state.add([d for d, a in zip(dets, anchors) if lo <= a < hi])
    return settled, [last]
