"""Training-free reference identifiers: CCA, filter-bank CCA and tt-CCA."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from numpy.typing import NDArray

from .signal import (CohortDataset, DegenerateInputError, FilteredEpoch, SpellerLayout,
                     canonical_correlation, pearson, reference_rows)


def fbcca_weights(n_subbands: int, a: float = 1.25, b: float = 0.25) -> NDArray:
    s = np.arange(1, n_subbands + 1, dtype=np.float64)
    return s ** (-a) + b


@dataclass(frozen=True)
class BaselineConfig:
    nh: int = 5
    fb_weights: Optional[tuple] = None
    band: int = 0
    ttcca_combine: str = "signed-square"

    def weights_for(self, n_subbands: int) -> NDArray:
        if self.fb_weights is None:
            return fbcca_weights(n_subbands)
        w = np.asarray(self.fb_weights, dtype=np.float64)
        if np.any(w <= 0):
            raise ValueError("filter-bank weights must be positive")
        return w


def _references(layout: SpellerLayout, nh: int, nt: int, fs: float) -> list:
    return [reference_rows(f, nh, nt, fs, p) for f, p in zip(layout.freqs, layout.phases)]


def cca_scores(x: NDArray, layout: SpellerLayout, nh: int, fs: float) -> NDArray:
    """Canonical correlation between ``x`` (C, Nt) and each character's reference."""
    x = np.asarray(x, dtype=np.float64)
    return np.array([canonical_correlation(x, y).corr
                     for y in _references(layout, nh, x.shape[1], fs)])


def cca_classify(x: NDArray, layout: SpellerLayout, nh: int = 5, fs: float = 250.0) -> int:
    return int(np.argmax(cca_scores(x, layout, nh, fs)))


def fbcca_classify(x: FilteredEpoch, layout: SpellerLayout, nh: int = 5,
                   fb_weights: Optional[Sequence[float]] = None) -> int:
    """Per-sub-band CCA, fused as ``sum_s weight_s * rho_s**2``."""
    ns = x.n_subbands
    weights = fbcca_weights(ns) if fb_weights is None else np.asarray(fb_weights, float)
    if weights.size != ns:
        raise ValueError(f"{weights.size} filter-bank weights for {ns} sub-bands")
    rho = np.stack([cca_scores(x.samples[:, :, s], layout, nh, x.fs) for s in range(ns)])
    return int(np.argmax(weights @ rho ** 2))


def cross_participant_templates(cohort: CohortDataset) -> NDArray:
    """Mean epoch per character over every participant: ``(M, C, Nt, Ns)``."""
    m = cohort.layout.n_classes
    sums = np.zeros((m,) + cohort.epoch_shape)
    counts = np.zeros(m)
    for rec in cohort.participants:
        for i in range(m):
            sel = rec.labels == i
            sums[i] += np.asarray(rec.data[sel], dtype=np.float64).sum(axis=0)
            counts[i] += sel.sum()
    if np.any(counts == 0):
        raise ValueError("some characters have no epochs in the cohort")
    return sums / counts[:, None, None, None]


@dataclass
class TTCCAModel:
    """Templates at one sub-band plus their transferred channel weights."""

    templates: NDArray  # (M, C, Nt)
    transferred: NDArray  # (M, C)
    layout: SpellerLayout
    nh: int
    fs: float
    combine: str = "signed-square"


def ttcca_fit(cross_templates: NDArray, layout: SpellerLayout, nh: int = 5,
              fs: float = 250.0, band: int = 0, combine: str = "signed-square") -> TTCCAModel:
    t = np.asarray(cross_templates, dtype=np.float64)
    if t.ndim == 4:
        t = t[..., band]
    if t.shape[0] != layout.n_classes:
        raise ValueError("need one template per character")
    weights = []
    for i, y in enumerate(_references(layout, nh, t.shape[2], fs)):
        try:
            weights.append(canonical_correlation(t[i], y).x_weights)
        except DegenerateInputError:
            raise DegenerateInputError(f"degenerate template for character {i}") from None
    return TTCCAModel(t, np.stack(weights), layout, nh, fs, combine)


def ttcca_scores(x: NDArray, model: TTCCAModel) -> NDArray:
    x = np.asarray(x, dtype=np.float64)
    out = np.empty(model.layout.n_classes)
    for i, y in enumerate(_references(model.layout, model.nh, x.shape[1], model.fs)):
        tmpl = model.templates[i]
        direct = canonical_correlation(x, y)
        wx, wt = direct.x_weights, model.transferred[i]
        rho = np.array([direct.corr, pearson(wx @ x, wx @ tmpl), pearson(wt @ x, wt @ tmpl)])
        if model.combine == "signed-square":
            out[i] = np.sum(np.sign(rho) * rho ** 2)
        elif model.combine == "sum":
            out[i] = np.sum(rho)
        else:
            raise ValueError(f"unknown combination rule {model.combine!r}")
    return out


def ttcca_classify(x, cross_templates, layout: SpellerLayout, nh: int = 5,
                   fs: Optional[float] = None, band: int = 0) -> int:
    """Transfer-template CCA label for one epoch.

    ``x`` is a ``FilteredEpoch`` (sub-band ``band`` is used) or a (C, Nt)
    matrix; ``cross_templates`` is a ready ``TTCCAModel`` or a template array.
    """
    if isinstance(x, FilteredEpoch):
        fs = x.fs if fs is None else fs
        x = x.samples[:, :, band]
    fs = 250.0 if fs is None else fs
    model = cross_templates if isinstance(cross_templates, TTCCAModel) else ttcca_fit(
        cross_templates, layout, nh, fs, band)
    return int(np.argmax(ttcca_scores(x, model)))
