"""Detection metrics: OLS, peak detection, L-NMS, matching, and AP/AR."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .config import EvalConfig, config_to_dict
from .data import Annotation, Window, window_dataset


@dataclass
class Detection:
    """One candidate object on the range-azimuth grid."""

    frame: int
    class_id: int
    range_bin: int
    azimuth_bin: int
    score: float


def ols(d: float, s: float, kappa: float) -> float:
    """Object location similarity exp(-d^2 / (2*(s*kappa)^2)).

    ``d`` is the distance between the two objects in meters, ``s`` the
    distance between the reference object and the radar, and ``kappa`` the
    per-class error tolerance.
    """
    if s <= 0:
        raise ValueError(f"reference distance s must be positive, got {s}")
    if kappa <= 0:
        raise ValueError(f"kappa must be positive, got {kappa}")
    if d < 0:
        raise ValueError(f"distance d must be non-negative, got {d}")
    return math.exp(-(d * d) / (2 * (s * kappa) ** 2))


def ols_between(
    ref_bins: tuple[int, int], other_bins: tuple[int, int], class_id: int, cfg: EvalConfig
) -> float:
    """OLS between two same-class grid locations, reference first.

    The metric distance and the radar distance ``s`` are both taken through
    the grid's bin-to-meters mapping, with azimuth displacement converted via
    arc length at the reference range.
    """
    d = cfg.grid.distance(ref_bins, other_bins)
    s = cfg.grid.range_of_bin(ref_bins[0])
    return ols(d, s, cfg.kappa_of(class_id))


def peak_detect(confmap: np.ndarray, peak_threshold: float) -> list[tuple[int, int, float]]:
    """Strict 8-neighbor local maxima of one 2D map, at or above the threshold.

    Boundary cells are excluded (their 8-neighborhood is undefined), and ties
    with any neighbor break toward non-peak.
    """
    if confmap.ndim != 2:
        raise ValueError(f"expected a 2D confidence map, got shape {confmap.shape}")
    c = confmap[1:-1, 1:-1]
    mask = c >= peak_threshold
    for di in (-1, 0, 1):
        for dj in (-1, 0, 1):
            if di == 0 and dj == 0:
                continue
            h, w = confmap.shape
            mask &= c > confmap[1 + di:h - 1 + di, 1 + dj:w - 1 + dj]
    ii, jj = np.nonzero(mask)
    return [(int(i) + 1, int(j) + 1, float(c[i, j])) for i, j in zip(ii, jj)]


def detect_peaks_multiclass(
    confmaps: np.ndarray, frame: int, cfg: EvalConfig
) -> list[Detection]:
    """Run peak detection over a (classes, H, W) frame slice."""
    peaks = []
    for class_id in range(confmaps.shape[0]):
        for i, j, score in peak_detect(confmaps[class_id], cfg.peak_threshold):
            peaks.append(Detection(frame, class_id, i, j, score))
    return peaks


def l_nms(peaks: Sequence[Detection], cfg: EvalConfig) -> list[Detection]:
    """Location-based non-maximum suppression.

    Greedy: repeatedly move the most confident remaining peak to the final
    set, then drop every remaining same-class peak whose OLS with it (taking
    the kept peak as reference) exceeds the suppression threshold. Ties in
    score break on (class, range_bin, azimuth_bin) so the result does not
    depend on input order.
    """
    order = sorted(
        peaks, key=lambda p: (-p.score, p.class_id, p.range_bin, p.azimuth_bin)
    )
    kept: list[Detection] = []
    suppressed = [False] * len(order)
    for i, p in enumerate(order):
        if suppressed[i]:
            continue
        kept.append(p)
        for j in range(i + 1, len(order)):
            q = order[j]
            if suppressed[j] or q.class_id != p.class_id:
                continue
            sim = ols_between(
                (p.range_bin, p.azimuth_bin), (q.range_bin, q.azimuth_bin), p.class_id, cfg
            )
            if sim > cfg.lnms_threshold:
                suppressed[j] = True
    return kept


@dataclass
class MatchResult:
    """Hungarian matching outcome for one frame."""

    pairs: list[tuple[Detection, Annotation, float]] = field(default_factory=list)
    unmatched_predictions: list[Detection] = field(default_factory=list)
    unmatched_ground_truths: list[Annotation] = field(default_factory=list)

    @property
    def total_ols(self) -> float:
        return sum(o for _, _, o in self.pairs)


def hungarian_match(
    predictions: Sequence[Detection], ground_truths: Sequence[Annotation], cfg: EvalConfig
) -> MatchResult:
    """One-to-one matching maximizing total OLS within each class.

    Cross-class pairs are inadmissible; OLS takes the ground-truth object as
    the reference (its range supplies ``s``).
    """
    result = MatchResult()
    class_ids = {p.class_id for p in predictions} | {g.class_id for g in ground_truths}
    for class_id in sorted(class_ids):
        preds = [p for p in predictions if p.class_id == class_id]
        gts = [g for g in ground_truths if g.class_id == class_id]
        if not preds or not gts:
            result.unmatched_predictions.extend(preds)
            result.unmatched_ground_truths.extend(gts)
            continue
        sim = np.array(
            [
                [
                    ols_between(
                        (g.range_bin, g.azimuth_bin), (p.range_bin, p.azimuth_bin),
                        class_id, cfg,
                    )
                    for g in gts
                ]
                for p in preds
            ]
        )
        rows, cols = linear_sum_assignment(1.0 - sim)
        matched_p, matched_g = set(), set()
        for r, c in zip(rows, cols):
            result.pairs.append((preds[r], gts[c], float(sim[r, c])))
            matched_p.add(r)
            matched_g.add(c)
        result.unmatched_predictions.extend(
            p for r, p in enumerate(preds) if r not in matched_p
        )
        result.unmatched_ground_truths.extend(
            g for c, g in enumerate(gts) if c not in matched_g
        )
    return result


def ap_ar(matches: Iterable[MatchResult], cfg: EvalConfig) -> tuple[float, float]:
    """Average precision / recall (%) over the OLS threshold sweep."""
    report = metrics_report(matches, cfg)
    return report["ap"], report["ar"]


def metrics_report(matches: Iterable[MatchResult], cfg: EvalConfig) -> dict:
    """Per-threshold precision/recall plus their means, as the report dict.

    At each threshold tau a matched pair counts as a true positive iff its
    OLS >= tau; precision and recall are computed over the whole detection
    and ground-truth sets. Zero ground truths make recall undefined and are
    reported as an error.
    """
    matched_ols: list[float] = []
    num_preds = 0
    num_gts = 0
    for m in matches:
        matched_ols.extend(o for _, _, o in m.pairs)
        num_preds += len(m.pairs) + len(m.unmatched_predictions)
        num_gts += len(m.pairs) + len(m.unmatched_ground_truths)
    if num_gts == 0:
        raise ValueError("no ground-truth objects: recall is undefined")
    ols_arr = np.array(matched_ols, dtype=np.float64)
    rows = []
    for tau in cfg.ols_thresholds:
        tp = int((ols_arr >= tau).sum()) if ols_arr.size else 0
        fp = num_preds - tp
        fn = num_gts - tp
        precision = tp / num_preds if num_preds > 0 else 0.0
        recall = tp / num_gts
        rows.append(
            {"threshold": tau, "precision": precision, "recall": recall,
             "tp": tp, "fp": fp, "fn": fn}
        )
    return {
        "ap": 100.0 * float(np.mean([r["precision"] for r in rows])),
        "ar": 100.0 * float(np.mean([r["recall"] for r in rows])),
        "per_threshold": rows,
        "num_detections": num_preds,
        "num_ground_truths": num_gts,
    }


PredictFn = Callable[[np.ndarray], np.ndarray]


def sliding_window_confmaps(
    frames: np.ndarray, predict_fn: PredictFn, cfg: EvalConfig
) -> dict[int, np.ndarray]:
    """Predicted (classes, H, W) maps per frame, last-4-frames rule applied.

    Slides the evaluation window over the sequence and keeps only each
    window's trailing 4 frames, so every covered frame is predicted exactly
    once at the canonical stride.
    """
    num_frames, _, h, w = frames.shape[0], frames.shape[1], frames.shape[2], frames.shape[3]
    dummy_gt = np.zeros((num_frames, 1, 1, 1), dtype=np.float32)
    per_frame: dict[int, np.ndarray] = {}
    for win in window_dataset(frames, dummy_gt, window=cfg.window, stride=cfg.stride):
        maps = predict_fn(win.rf)
        for offset in win.eval_offsets:
            per_frame[win.start + offset] = maps[offset]
    return per_frame


def evaluate_sequence(
    frames: np.ndarray,
    annotations: Sequence[Annotation],
    predict_fn: PredictFn,
    cfg: EvalConfig,
) -> tuple[dict, list[Detection]]:
    """Evaluate one sequence end to end.

    Windows the RF frames, predicts confidence maps, runs peak detection and
    L-NMS per evaluated frame, Hungarian-matches against the ground truth of
    those frames, and aggregates AP/AR over the whole sequence. Returns the
    report dict and the per-frame detections.
    """
    cfg.validate()
    per_frame = sliding_window_confmaps(frames, predict_fn, cfg)
    detections: list[Detection] = []
    matches: list[MatchResult] = []
    covered = sorted(per_frame)
    gts_by_frame: dict[int, list[Annotation]] = {f: [] for f in covered}
    for ann in annotations:
        if ann.frame_index in gts_by_frame:
            gts_by_frame[ann.frame_index].append(ann)
    for f in covered:
        peaks = detect_peaks_multiclass(per_frame[f], f, cfg)
        dets = l_nms(peaks, cfg)
        detections.extend(dets)
        matches.append(hungarian_match(dets, gts_by_frame[f], cfg))
    report = metrics_report(matches, cfg)
    report["frames_evaluated"] = covered
    report["config"] = config_to_dict(cfg)
    detections.sort(key=lambda d: (d.frame, -d.score, d.class_id, d.range_bin, d.azimuth_bin))
    return report, detections


def gt_window_predictor(gt_maps: np.ndarray, window: int = 16, stride: int = 4) -> PredictFn:
    """Serve slices of precomputed per-frame maps (the --use-gt-as-pred mode).

    Windows are requested in sliding order, matching ``window_dataset``.
    """
    starts = iter(range(0, gt_maps.shape[0] - window + 1, stride))

    def predict(win_rf: np.ndarray) -> np.ndarray:
        start = next(starts)
        return gt_maps[start:start + window]

    return predict


def model_predictor(model, device: str = "cpu") -> PredictFn:
    """Wrap a trained model as a window-level prediction function."""
    import torch

    model = model.to(device).eval()

    def predict(win_rf: np.ndarray) -> np.ndarray:
        with torch.no_grad():
            x = torch.from_numpy(win_rf).float().unsqueeze(0).to(device)
            return model(x).squeeze(0).cpu().numpy()

    return predict
