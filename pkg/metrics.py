"""
Face anti-spoofing metrics.

Decision rule: a score >= tau is predicted live. Thresholds are chosen on
a dev set from a finite candidate grid (midpoints of adjacent sorted unique
scores, plus 0 and 1) and then applied unchanged to the test set.
"""

import logging
from typing import Any, Dict, Optional, Tuple

import numpy as np

from data_structures import EvalReport, LIVE, SPOOF, ScoreSet
from validation import MetricError

logger = logging.getLogger(__name__)

THRESHOLD_RULES = ("eer", "bpcer")


def _check(scores: ScoreSet, need_live: bool = True, need_spoof: bool = True) -> Tuple[np.ndarray, np.ndarray]:
    if len(scores.scores) != len(scores.labels):
        raise MetricError(f"{len(scores.scores)} scores but {len(scores.labels)} labels")
    bad = [y for y in scores.labels if y not in (LIVE, SPOOF)]
    if bad:
        raise MetricError(f"Unknown label {bad[0]}; expected {LIVE} (live) or {SPOOF} (spoof)")
    live, spoof = np.sort(scores.live_scores()), np.sort(scores.spoof_scores())
    if need_live and live.size == 0:
        raise MetricError(f"No live samples in split '{scores.split}'")
    if need_spoof and spoof.size == 0:
        raise MetricError(f"No spoof samples in split '{scores.split}'")
    return live, spoof


def _rates(live: np.ndarray, spoof: np.ndarray, taus: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """APCER and BPCER at every tau, from sorted live and spoof scores."""
    spoof_accepted = spoof.size - np.searchsorted(spoof, taus, side="left")
    live_rejected = np.searchsorted(live, taus, side="left")
    apcer = spoof_accepted / spoof.size if spoof.size else np.zeros(len(taus))
    bpcer = live_rejected / live.size if live.size else np.zeros(len(taus))
    return apcer, bpcer


def candidate_thresholds(scores: ScoreSet) -> np.ndarray:
    """Midpoints of adjacent sorted unique scores, plus 0 and 1, ascending."""
    unique = np.unique(np.asarray(scores.scores, dtype=np.float64))
    mids = (unique[:-1] + unique[1:]) / 2.0
    return np.unique(np.concatenate([[0.0, 1.0], mids]))


def classification_rates(scores: ScoreSet, tau: float) -> Tuple[float, float, float]:
    """
    APCER, BPCER and ACER at threshold ``tau``.

    Raises:
        MetricError: Either class is empty
    """
    live, spoof = _check(scores)
    apcer, bpcer = _rates(live, spoof, np.asarray([tau], dtype=np.float64))
    a, b = float(apcer[0]), float(bpcer[0])
    return a, b, (a + b) / 2.0


def eer_threshold(dev: ScoreSet) -> float:
    """
    Threshold minimizing |APCER - BPCER| over the candidate grid.

    Ties go to the smaller ACER, then the smaller tau.
    """
    live, spoof = _check(dev)
    taus = candidate_thresholds(dev)
    apcer, bpcer = _rates(live, spoof, taus)
    gap = np.abs(apcer - bpcer)
    acer = (apcer + bpcer) / 2.0
    best = np.lexsort((taus, acer, gap))[0]
    logger.debug("EER threshold %.6f (APCER %.4f, BPCER %.4f)", taus[best], apcer[best], bpcer[best])
    return float(taus[best])


def bpcer_threshold(dev: ScoreSet, target: float = 0.01) -> float:
    """
    Largest candidate tau whose BPCER stays within ``target``.

    Falls back to tau = 0 with a warning when no candidate qualifies.
    """
    if not 0.0 < target < 1.0:
        raise MetricError(f"BPCER target must lie in (0, 1), got {target}")
    live, spoof = _check(dev, need_spoof=False)
    taus = candidate_thresholds(dev)
    _, bpcer = _rates(live, spoof, taus)
    ok = np.nonzero(bpcer <= target)[0]
    if ok.size == 0:
        logger.warning("No threshold reaches BPCER <= %.4f; using 0", target)
        return 0.0
    return float(taus[ok[-1]])


def hter(test: ScoreSet, tau: float) -> Tuple[float, float, float]:
    """FAR (spoof accepted), FRR (live rejected) and their mean at a fixed tau."""
    far, frr, _ = classification_rates(test, tau)
    return far, frr, (far + frr) / 2.0


def select_threshold(dev: ScoreSet, rule: str = "eer", bpcer_target: float = 0.01) -> float:
    if rule == "eer":
        return eer_threshold(dev)
    if rule == "bpcer":
        return bpcer_threshold(dev, bpcer_target)
    raise MetricError(f"Unknown threshold rule '{rule}'. Valid rules: {', '.join(THRESHOLD_RULES)}")


def _counts(scores: ScoreSet) -> Dict[str, int]:
    return {"live": scores.num_live, "spoof": scores.num_spoof}


def intra_report(dev: ScoreSet, test: ScoreSet, rule: str = "eer", bpcer_target: float = 0.01,
                 protocol: Optional[Dict[str, Any]] = None, tau: Optional[float] = None) -> EvalReport:
    """ACER on ``test`` at the dev-set threshold (or a forced ``tau``)."""
    threshold = select_threshold(dev, rule, bpcer_target) if tau is None else tau
    apcer, bpcer, acer = classification_rates(test, threshold)
    return EvalReport(threshold=threshold, mode="intra", apcer=apcer, bpcer=bpcer, acer=acer,
                      protocol=protocol, counts=_counts(test))


def cross_report(source_dev: ScoreSet, target_test: ScoreSet, rule: str = "eer", bpcer_target: float = 0.01,
                 protocol: Optional[Dict[str, Any]] = None, tau: Optional[float] = None) -> EvalReport:
    """HTER on a target-domain test set at the source-domain dev threshold."""
    threshold = select_threshold(source_dev, rule, bpcer_target) if tau is None else tau
    far, frr, half_total = hter(target_test, threshold)
    return EvalReport(threshold=threshold, mode="cross", far=far, frr=frr, hter=half_total,
                      protocol=protocol, counts=_counts(target_test))


def report_metrics(report: EvalReport) -> Dict[str, float]:
    """The numeric metrics present in a report, for flat CSV rows."""
    names = ("apcer", "bpcer", "acer") if report.mode == "intra" else ("far", "frr", "hter")
    values = {name: getattr(report, name) for name in names}
    values["threshold"] = report.threshold
    return values
