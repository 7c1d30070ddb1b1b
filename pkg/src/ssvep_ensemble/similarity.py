"""Participant-to-new-user similarity.

For participant ``n`` with prediction ``y_n`` on the new-user epoch ``x``:
both ``x`` and the participant's template for ``y_n`` are collapsed over
sub-bands with the participant network's layer-1 weights, then every
channel combination (column of layer 2) is tried. For each candidate the
template correlation and the reference-signal canonical correlation are
computed; the candidate maximising the sum of their squares is kept and
that sum is the participant's score, in ``[0, 2]``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from numpy.typing import NDArray

from . import kernels
from .network import NetworkWeights, predict_batch
from .signal import (CohortDataset, DegenerateInputError, FilteredEpoch, SpellerLayout,
                     fit_harmonic_combination, reference_rows)

OK = "ok"
ABSENT = "absent-template"
DEGENERATE = "degenerate"


@dataclass
class TemplateBank:
    """Per-participant, per-character means of correctly classified epochs.

    ``templates[n, i]`` is ``(C, Nt, Ns)``; it is all zeros and
    ``present[n, i]`` is False when no epoch qualified.
    """

    templates: NDArray[np.float64]
    counts: NDArray[np.int64]

    @property
    def present(self) -> NDArray[np.bool_]:
        return self.counts > 0

    @property
    def n_participants(self) -> int:
        return self.templates.shape[0]

    def get(self, n: int, character: int) -> Optional[NDArray]:
        return self.templates[n, character] if self.counts[n, character] > 0 else None


def build_templates(cohort: CohortDataset, ensemble: Sequence[NetworkWeights],
                    batch_size: int = 256) -> TemplateBank:
    if len(ensemble) != cohort.n_participants:
        raise ValueError("ensemble and cohort participant counts differ")
    m = cohort.layout.n_classes
    shape = cohort.epoch_shape
    templates = np.zeros((cohort.n_participants, m) + shape)
    counts = np.zeros((cohort.n_participants, m), dtype=np.int64)
    for n, (rec, w) in enumerate(zip(cohort.participants, ensemble)):
        pred = np.concatenate([predict_batch(w, rec.data[i:i + batch_size])[0]
                               for i in range(0, len(rec), batch_size)]) if len(rec) else []
        correct = np.asarray(pred) == rec.labels
        for i in range(m):
            sel = correct & (rec.labels == i)
            counts[n, i] = int(sel.sum())
            if counts[n, i]:
                templates[n, i] = np.asarray(rec.data[sel], dtype=np.float64).mean(axis=0)
    return TemplateBank(templates, counts)


def subband_combine(x, w_s: NDArray) -> NDArray:
    """Weighted sum of sub-band slices: ``(C, Nt, Ns) -> (C, Nt)``."""
    x = x.samples if isinstance(x, FilteredEpoch) else np.asarray(x, dtype=np.float64)
    w_s = np.asarray(w_s, dtype=np.float64).ravel()
    if x.ndim != 3 or x.shape[2] != w_s.size:
        raise ValueError(f"sub-band weights of length {w_s.size} do not match input {x.shape}")
    return x @ w_s


def reference_basis(freq: float, phase: float, nh: int, nt: int, fs: float) -> tuple:
    """Centred reference rows and an orthonormal basis ``(Nt, r)`` of their span."""
    rows = reference_rows(freq, nh, nt, fs, phase)
    yc = rows - rows.mean(axis=1, keepdims=True)
    u, s, _ = np.linalg.svd(yc.T, full_matrices=False)
    rank = int(np.sum(s > s[0] * 1e-10))
    return rows, u[:, :rank]


@dataclass
class ScoreEntry:
    participant: int
    prediction: int
    status: str = OK
    candidate: int = -1
    w_c: Optional[NDArray] = None
    w_y: Optional[NDArray] = None
    rho1: float = 0.0
    rho2: float = 0.0
    score: float = 0.0

    def to_dict(self) -> dict:
        return {"participant": self.participant, "prediction": self.prediction,
                "status": self.status, "candidate": self.candidate,
                "rho1": self.rho1, "rho2": self.rho2, "score": self.score}


@dataclass
class SimilarityReport:
    entries: list
    order: NDArray[np.int64] = field(default=None)

    def __post_init__(self):
        if self.order is None:
            self.order = descending_order(self.scores)

    @property
    def scores(self) -> NDArray[np.float64]:
        return np.array([e.score for e in self.entries], dtype=np.float64)

    @property
    def predictions(self) -> NDArray[np.int64]:
        return np.array([e.prediction for e in self.entries], dtype=np.int64)

    @property
    def n_participants(self) -> int:
        return len(self.entries)

    @classmethod
    def from_arrays(cls, scores, predictions) -> "SimilarityReport":
        entries = [ScoreEntry(n, int(p), score=float(s))
                   for n, (s, p) in enumerate(zip(scores, predictions))]
        return cls(entries)

    def to_dict(self) -> dict:
        return {"entries": [e.to_dict() for e in self.entries],
                "order": [int(i) for i in self.order]}


def descending_order(scores) -> NDArray[np.int64]:
    """Indices by non-increasing score; equal scores keep participant order."""
    return np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")


def score_participant(x: FilteredEpoch, n: int, ensemble: Sequence[NetworkWeights],
                      templates: TemplateBank, layout: SpellerLayout, nh: int = 5,
                      prediction: Optional[int] = None, _basis_cache: Optional[dict] = None
                      ) -> ScoreEntry:
    w = ensemble[n]
    if prediction is None:
        prediction = int(predict_batch(w, x.samples)[0][0])
    template = templates.get(n, prediction)
    if template is None:
        return ScoreEntry(n, prediction, ABSENT)
    nt = x.n_samples
    key = (prediction, nt)
    if _basis_cache is not None and key in _basis_cache:
        rows, basis = _basis_cache[key]
    else:
        rows, basis = reference_basis(layout.freqs[prediction], layout.phases[prediction],
                                      nh, nt, x.fs)
        if _basis_cache is not None:
            _basis_cache[key] = (rows, basis)
    xs = subband_combine(x.samples, w.w_s)
    ts = subband_combine(template, w.w_s)
    xc = xs - xs.mean(axis=1, keepdims=True)
    tc = ts - ts.mean(axis=1, keepdims=True)
    rho1, rho2, valid = kernels.candidate_scores(w.w_c, xc @ xc.T, tc @ tc.T, xc @ tc.T,
                                                 xc @ basis)
    if not valid.any():
        return ScoreEntry(n, prediction, DEGENERATE)
    objective = np.where(valid, rho1 ** 2 + rho2 ** 2, -np.inf)
    best = int(np.argmax(objective))
    w_c = w.w_c[:, best].copy()
    fit = fit_harmonic_combination(w_c @ xs, rows)
    return ScoreEntry(n, prediction, OK, best, w_c, fit.weights, float(rho1[best]),
                      float(rho2[best]), float(objective[best]))


def ensemble_predictions(x: FilteredEpoch, ensemble: Sequence[NetworkWeights]) -> NDArray:
    return np.array([int(predict_batch(w, x.samples)[0][0]) for w in ensemble])


def rank_participants(x: FilteredEpoch, ensemble: Sequence[NetworkWeights],
                      templates: TemplateBank, layout: SpellerLayout, nh: int = 5,
                      predictions: Optional[Sequence[int]] = None) -> SimilarityReport:
    """Score every participant and sort them by decreasing similarity.

    ``predictions`` may carry precomputed ensemble predictions for ``x``.
    """
    if len(ensemble) == 0:
        raise ValueError("empty ensemble")
    if predictions is None:
        predictions = ensemble_predictions(x, ensemble)
    cache: dict = {}
    entries = [score_participant(x, n, ensemble, templates, layout, nh, int(predictions[n]),
                                 cache) for n in range(len(ensemble))]
    if all(e.status == DEGENERATE for e in entries):
        raise DegenerateInputError("instance is degenerate for every participant")
    return SimilarityReport(entries)
