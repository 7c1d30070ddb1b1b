"""Similarity-weighted voting over the ensemble and the dynamic choice of k."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np
from numpy.typing import NDArray

from .network import NetworkWeights
from .signal import FilteredEpoch, SpellerLayout
from .similarity import SimilarityReport, TemplateBank, rank_participants


@dataclass
class Vote:
    label: int
    confidence: float
    tally: NDArray[np.float64]


@dataclass
class EnsembleDecision:
    label: int
    chosen_k: int
    confidence: float
    tally: NDArray[np.float64]
    trace_labels: NDArray[np.int64]
    trace_confidence: NDArray[np.float64]
    mode: str = "dynamic"
    report: Optional[SimilarityReport] = field(default=None, repr=False)

    def to_dict(self) -> dict:
        d = {"label": self.label, "chosen_k": self.chosen_k, "confidence": self.confidence,
             "mode": self.mode, "tally": self.tally.tolist(),
             "trace_labels": self.trace_labels.tolist(),
             "trace_confidence": self.trace_confidence.tolist()}
        if self.report is not None:
            d["similarity"] = self.report.to_dict()
        return d


def _margin(tally: NDArray, voted: NDArray) -> tuple:
    """Winning character and its lead over the runner-up.

    Only characters with at least one vote can win, so zero-score voters
    still decide a flat tally; among equal tallies the lowest index wins.
    """
    label = int(np.argmax(np.where(voted, tally, -np.inf)))
    if len(tally) < 2:
        return label, float(tally[label])
    top2 = np.partition(tally, len(tally) - 2)[-2:]
    return label, float(top2[1] - top2[0])


def weighted_vote(report: SimilarityReport, k: int, n_classes: int) -> Vote:
    """Tally ``score`` of the ``k`` most similar participants onto their predictions.

    Ties between voted characters go to the lowest index; confidence is the
    top weight minus the runner-up weight.
    """
    n = report.n_participants
    if not 1 <= k <= n:
        raise ValueError(f"k={k} outside 1..{n}")
    scores, preds = report.scores, report.predictions
    tally = np.zeros(n_classes)
    voted = np.zeros(n_classes, dtype=bool)
    for j in report.order[:k]:
        tally[preds[j]] += scores[j]
        voted[preds[j]] = True
    label, conf = _margin(tally, voted)
    return Vote(label, conf, tally)


def sweep(report: SimilarityReport, n_classes: int) -> tuple:
    """Labels, confidences and tallies for every ``k = 1..N`` in one pass."""
    n = report.n_participants
    if n == 0:
        raise ValueError("empty ensemble")
    scores, preds = report.scores, report.predictions
    tally = np.zeros(n_classes)
    voted = np.zeros(n_classes, dtype=bool)
    labels = np.empty(n, dtype=np.int64)
    conf = np.empty(n)
    tallies = np.empty((n, n_classes))
    for step, j in enumerate(report.order):
        tally[preds[j]] += scores[j]
        voted[preds[j]] = True
        labels[step], conf[step] = _margin(tally, voted)
        tallies[step] = tally
    return labels, conf, tallies


def dynamic_select(report: SimilarityReport, n_classes: int) -> EnsembleDecision:
    """Pick the ``k`` whose vote has the largest margin (smallest ``k`` on ties)."""
    labels, conf, tallies = sweep(report, n_classes)
    best = int(np.argmax(conf))
    return EnsembleDecision(int(labels[best]), best + 1, float(conf[best]), tallies[best],
                            labels, conf, "dynamic", report)


def majority_vote(predictions: Sequence[int], n_classes: int) -> int:
    """Unweighted modal prediction; lowest index wins ties."""
    predictions = np.asarray(predictions, dtype=np.int64)
    if predictions.size == 0:
        raise ValueError("empty ensemble")
    return int(np.argmax(np.bincount(predictions, minlength=n_classes)))


def parse_mode(mode: Union[str, int, tuple]) -> tuple:
    """``'dynamic'``, ``'majority'``, ``'fixed:K'``, ``('fixed', K)`` or an int ``K``."""
    if isinstance(mode, tuple):
        kind, k = mode
        return str(kind), int(k)
    if isinstance(mode, (int, np.integer)):
        return "fixed", int(mode)
    if mode in ("dynamic", "majority"):
        return mode, None
    if isinstance(mode, str) and mode.startswith("fixed:"):
        return "fixed", int(mode.split(":", 1)[1])
    raise ValueError(f"unknown ensemble mode {mode!r}")


def decide(report: SimilarityReport, n_classes: int, mode="dynamic") -> EnsembleDecision:
    kind, k = parse_mode(mode)
    if kind == "dynamic":
        return dynamic_select(report, n_classes)
    labels, conf, tallies = sweep(report, n_classes)
    n = report.n_participants
    if kind == "fixed":
        if not 1 <= k <= n:
            raise ValueError(f"k={k} outside 1..{n}")
        return EnsembleDecision(int(labels[k - 1]), k, float(conf[k - 1]), tallies[k - 1],
                                labels, conf, f"fixed:{k}", report)
    counts = np.bincount(report.predictions, minlength=n_classes).astype(np.float64)
    label, margin = _margin(counts, counts > 0)
    return EnsembleDecision(label, n, margin, counts, labels, conf, "majority", report)


def classify_instance(x: FilteredEpoch, ensemble: Sequence[NetworkWeights],
                      templates: TemplateBank, layout: SpellerLayout, nh: int = 5,
                      mode="dynamic", predictions: Optional[Sequence[int]] = None
                      ) -> EnsembleDecision:
    """Full target identification of one new-user epoch.

    Predict with every participant network, score and sort participants,
    then combine the predictions according to ``mode``.
    """
    report = rank_participants(x, ensemble, templates, layout, nh, predictions)
    return decide(report, layout.n_classes, mode)
