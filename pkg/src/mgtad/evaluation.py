"""Challenge metric: tIoU matching, precision, recall, F1.

Matching is greedy and one-to-one: predictions are visited in descending
score order (ties: earlier start, then lower label id) and each takes the
highest-tIoU still-unmatched ground truth of the same label at or above the
threshold. F1 is the harmonic mean of precision and recall, zero when both
are zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field


def tiou(a, b) -> float:
    """Temporal intersection over union of two (start, end) intervals."""
    a_s, a_e = float(a[0]), float(a[1])
    b_s, b_e = float(b[0]), float(b[1])
    if a_e <= a_s:
        raise ValueError(f"degenerate interval ({a_s}, {a_e})")
    if b_e <= b_s:
        raise ValueError(f"degenerate interval ({b_s}, {b_e})")
    inter = max(0.0, min(a_e, b_e) - max(a_s, b_s))
    if inter == 0.0:
        return 0.0
    union = (a_e - a_s) + (b_e - b_s) - inter
    return inter / union


@dataclass
class MatchResult:
    pairs: list = field(default_factory=list)            # (pred idx, gt idx, tiou)
    unmatched_preds: list = field(default_factory=list)  # pred indices
    unmatched_gts: list = field(default_factory=list)    # gt indices

    @property
    def matched(self) -> int:
        return len(self.pairs)


def prediction_order(preds) -> list[int]:
    """Score-descending visit order with deterministic tie-breaking."""
    def key(i):
        p = preds[i]
        score = p.score if p.score is not None else 0.0
        return (-score, p.start_s, p.label, i)
    return sorted(range(len(preds)), key=key)


def match(preds, gts, thr: float = 0.5) -> MatchResult:
    """Greedy one-to-one matching of predictions to ground truths.

    Items need ``start_s``, ``end_s``, ``label`` and (predictions) ``score``.
    Both lists belong to a single video; callers aggregate across videos.
    """
    result = MatchResult()
    taken = [False] * len(gts)
    for pi in prediction_order(preds):
        p = preds[pi]
        best_gi = -1
        best = (0.0,)
        for gi, g in enumerate(gts):
            if taken[gi] or g.label != p.label:
                continue
            ov = tiou((p.start_s, p.end_s), (g.start_s, g.end_s))
            if ov < thr:
                continue
            # higher tiou wins; ties to the earlier, lower-index ground truth
            cand = (-ov, g.start_s, gi)
            if best_gi < 0 or cand < best:
                best = cand
                best_gi = gi
        if best_gi >= 0:
            taken[best_gi] = True
            result.pairs.append((pi, best_gi, -best[0]))
        else:
            result.unmatched_preds.append(pi)
    result.unmatched_gts = [gi for gi, t in enumerate(taken) if not t]
    return result


@dataclass
class PRF1:
    precision: float
    recall: float
    f1: float
    matched: int
    n_preds: int
    n_gts: int
    recall_undefined: bool = False

    def as_percent(self) -> dict:
        """Percent presentation used in reports; fractions stay internal."""
        return {"precision": 100.0 * self.precision, "recall": 100.0 * self.recall,
                "f1": 100.0 * self.f1}


def prf1(matched: int, n_preds: int, n_gts: int) -> PRF1:
    """Precision, recall, F1 from match counts.

    No ground truths makes recall undefined: the condition is flagged and F1
    is 0. No predictions yields precision 0 by convention.
    """
    precision = matched / n_preds if n_preds > 0 else 0.0
    if n_gts > 0:
        recall = matched / n_gts
        undefined = False
    else:
        recall = 0.0
        undefined = True
    if precision + recall > 0.0 and not undefined:
        f1 = 2.0 * precision * recall / (precision + recall)
    else:
        f1 = 0.0
    return PRF1(precision, recall, f1, matched, n_preds, n_gts,
                recall_undefined=undefined)


def prf1_of(match_result: MatchResult, n_preds: int, n_gts: int) -> PRF1:
    return prf1(match_result.matched, n_preds, n_gts)


def evaluate_videos(preds_by_video: dict, gts_by_video: dict, thr: float = 0.5):
    """Per-video matching with pooled counts.

    Returns (overall PRF1, per-video MatchResult dict, per-class count dict).
    Videos missing from either side contribute unmatched items.
    """
    matches = {}
    per_class: dict[int, dict[str, int]] = {}

    def cls(label):
        return per_class.setdefault(label, {"preds": 0, "gts": 0, "matched": 0})

    total_matched = 0
    total_preds = 0
    total_gts = 0
    for vid in sorted(set(preds_by_video) | set(gts_by_video)):
        preds = preds_by_video.get(vid, [])
        gts = gts_by_video.get(vid, [])
        m = match(preds, gts, thr)
        matches[vid] = m
        total_matched += m.matched
        total_preds += len(preds)
        total_gts += len(gts)
        for p in preds:
            cls(p.label)["preds"] += 1
        for g in gts:
            cls(g.label)["gts"] += 1
        for pi, gi, _ in m.pairs:
            cls(preds[pi].label)["matched"] += 1
    return prf1(total_matched, total_preds, total_gts), matches, per_class


def per_class_recall(preds_by_video: dict, gts_by_video: dict,
                     thr: float = 0.5) -> dict[int, float]:
    """Recall per category over pooled videos (classes with gts only)."""
    _, _, per_class = evaluate_videos(preds_by_video, gts_by_video, thr)
    return {c: d["matched"] / d["gts"] for c, d in per_class.items() if d["gts"] > 0}
