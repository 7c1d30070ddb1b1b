"""Signal data model, filter bank, reference signals and correlation primitives.

Array conventions
-----------------
A filtered epoch is a ``(n_channels, n_samples, n_subbands)`` float64 array.
Character indices are 0-based throughout the library.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Sequence

import numpy as np
from numpy.typing import NDArray
from scipy import signal as sps

# Electrodes used by the constituent network, in this order.
OCCIPITAL_CHANNELS = ("Pz", "PO3", "PO5", "PO4", "PO6", "POz", "O1", "Oz", "O2")


class DegenerateInputError(ValueError):
    """Raised when an input has zero variance or is otherwise unusable."""


class IllConditionedWarning(RuntimeWarning):
    """Emitted when a ridge term had to be added to a singular Gram matrix."""


@dataclass(frozen=True)
class SpellerLayout:
    """Frequency/phase tagging of the ``M`` speller characters."""

    freqs: tuple
    phases: tuple = ()
    labels: tuple = ()

    def __post_init__(self):
        freqs = tuple(float(f) for f in self.freqs)
        m = len(freqs)
        phases = tuple(float(p) for p in self.phases) if len(self.phases) else (0.0,) * m
        labels = tuple(str(s) for s in self.labels) if len(self.labels) else tuple(
            str(i + 1) for i in range(m))
        object.__setattr__(self, "freqs", freqs)
        object.__setattr__(self, "phases", phases)
        object.__setattr__(self, "labels", labels)
        if m < 2:
            raise ValueError("a speller layout needs at least 2 characters")
        if min(freqs) <= 0:
            raise ValueError("stimulation frequencies must be strictly positive")
        if len(set(freqs)) != m:
            raise ValueError("stimulation frequencies must be pairwise distinct")
        if len(phases) != m or len(labels) != m:
            raise ValueError("freqs, phases and labels must all have length M")

    @property
    def n_classes(self) -> int:
        return len(self.freqs)

    @classmethod
    def linear(cls, n_classes: int, f0: float = 8.0, df: float = 0.2,
               dphase: float = 0.5 * np.pi) -> "SpellerLayout":
        """Joint frequency-phase layout ``f_i = f0 + i*df``, ``phi_i = i*dphase mod 2pi``."""
        idx = np.arange(n_classes)
        return cls(freqs=tuple(np.round(f0 + idx * df, 10)),
                   phases=tuple(np.mod(idx * dphase, 2 * np.pi)))

    def to_dict(self) -> dict:
        return {"freqs": list(self.freqs), "phases": list(self.phases),
                "labels": list(self.labels)}

    @classmethod
    def from_dict(cls, d: dict) -> "SpellerLayout":
        return cls(freqs=tuple(d["freqs"]), phases=tuple(d.get("phases", ())),
                   labels=tuple(d.get("labels", ())))


@dataclass
class RawEpoch:
    samples: NDArray[np.float64]  # (C, Nt_raw)
    fs: float
    channel_names: Sequence[str] = ()

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 2 or min(self.samples.shape) < 1:
            raise ValueError("raw samples must be a non-empty (channels, time) matrix")
        if not self.fs > 0:
            raise ValueError("sampling rate must be positive")
        if self.channel_names and len(self.channel_names) != self.samples.shape[0]:
            raise ValueError("channel_names length does not match channel count")


@dataclass
class FilteredEpoch:
    samples: NDArray[np.float64]  # (C, Nt, Ns)
    fs: float

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 3 or min(self.samples.shape) < 1:
            raise ValueError("filtered samples must be a (channels, time, subbands) tensor")
        if not self.fs > 0:
            raise ValueError("sampling rate must be positive")

    @property
    def n_channels(self) -> int:
        return self.samples.shape[0]

    @property
    def n_samples(self) -> int:
        return self.samples.shape[1]

    @property
    def n_subbands(self) -> int:
        return self.samples.shape[2]

    @property
    def duration_s(self) -> float:
        return self.n_samples / self.fs


@dataclass
class ParticipantRecords:
    """All epochs of one participant, stacked as ``(n_epochs, C, Nt, Ns)``."""

    participant_id: str
    data: NDArray[np.float64]
    labels: NDArray[np.int64]
    blocks: NDArray[np.int64]

    def __post_init__(self):
        self.data = np.asarray(self.data)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.blocks = np.asarray(self.blocks, dtype=np.int64)
        if self.data.ndim != 4:
            raise ValueError("participant data must be (n_epochs, C, Nt, Ns)")
        if not len(self.data) == len(self.labels) == len(self.blocks):
            raise ValueError("epochs, labels and block ids must have equal length")

    def __len__(self) -> int:
        return len(self.labels)

    def epoch(self, i: int, fs: float) -> FilteredEpoch:
        return FilteredEpoch(self.data[i], fs)


@dataclass
class CohortDataset:
    layout: SpellerLayout
    fs: float
    participants: list
    channel_names: tuple = ()
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.participants:
            return
        shape = self.participants[0].data.shape[1:]
        for rec in self.participants:
            if rec.data.shape[1:] != shape:
                raise ValueError(f"participant {rec.participant_id} has epoch shape "
                                 f"{rec.data.shape[1:]}, expected {shape}")
            if len(rec) and (rec.labels.min() < 0 or rec.labels.max() >= self.layout.n_classes):
                raise ValueError(f"participant {rec.participant_id} has labels outside 0..M-1")

    @property
    def n_participants(self) -> int:
        return len(self.participants)

    @property
    def epoch_shape(self) -> tuple:
        return self.participants[0].data.shape[1:]

    @property
    def participant_ids(self) -> list:
        return [p.participant_id for p in self.participants]

    def subset(self, indices: Sequence[int]) -> "CohortDataset":
        return CohortDataset(self.layout, self.fs, [self.participants[i] for i in indices],
                             self.channel_names, dict(self.provenance))

    def truncate(self, duration_s: float) -> "CohortDataset":
        """Keep only the first ``duration_s`` seconds of every epoch."""
        nt = int(round(duration_s * self.fs))
        if nt < 1 or nt > self.epoch_shape[1]:
            raise ValueError(f"cannot truncate {self.epoch_shape[1]}-sample epochs "
                             f"to {duration_s} s ({nt} samples)")
        parts = [ParticipantRecords(p.participant_id, p.data[:, :, :nt, :], p.labels, p.blocks)
                 for p in self.participants]
        return CohortDataset(self.layout, self.fs, parts, self.channel_names,
                             dict(self.provenance))


@dataclass(frozen=True)
class FilterBankConfig:
    """Sub-band ``s`` (1-based) passes ``[low_step*s, high_hz]`` Hz."""

    n_subbands: int = 3
    low_step_hz: float = 8.0
    high_hz: float = 90.0
    order: int = 4
    ripple_db: float = 1.0
    family: str = "cheby1"
    latency_s: float = 0.14
    pre_stimulus_s: float = 0.0
    duration_s: Optional[float] = None

    def bands(self) -> list:
        return [(self.low_step_hz * s, self.high_hz) for s in range(1, self.n_subbands + 1)]

    def sos(self, fs: float) -> list:
        if fs <= 2 * self.high_hz:
            raise ValueError(f"sampling rate {fs} Hz is too low for the {self.high_hz} Hz "
                             f"upper cut-off (needs fs > {2 * self.high_hz} Hz)")
        out = []
        for lo, hi in self.bands():
            if lo >= hi:
                raise ValueError(f"empty pass band [{lo}, {hi}] Hz")
            if self.family == "cheby1":
                sos = sps.cheby1(self.order, self.ripple_db, [lo, hi], btype="bandpass",
                                 fs=fs, output="sos")
            elif self.family == "butter":
                sos = sps.butter(self.order, [lo, hi], btype="bandpass", fs=fs, output="sos")
            else:
                raise ValueError(f"unknown filter family {self.family!r}")
            out.append(sos)
        return out


def filter_raw(samples: NDArray, fs: float, config: FilterBankConfig = FilterBankConfig()
               ) -> NDArray[np.float64]:
    """Zero-phase filter bank over the last axis; returns ``samples.shape + (Ns,)``.

    Works on any leading shape, so whole blocks of raw data filter in one call.
    """
    samples = np.asarray(samples, dtype=np.float64)
    out = np.empty(samples.shape + (config.n_subbands,))
    for s, sos in enumerate(config.sos(fs)):
        out[..., s] = sps.sosfiltfilt(sos, samples, axis=-1)
    return out


def crop_window(fs: float, n_raw: int, config: FilterBankConfig) -> slice:
    start = int(round((config.pre_stimulus_s + config.latency_s) * fs))
    if config.duration_s is None:
        stop = n_raw
    else:
        stop = start + int(round(config.duration_s * fs))
    if start < 0 or stop > n_raw or stop <= start:
        raise ValueError(f"requested window [{start}, {stop}) lies outside the "
                         f"{n_raw}-sample raw epoch")
    return slice(start, stop)


def apply_filter_bank(raw: RawEpoch, config: FilterBankConfig = FilterBankConfig()
                      ) -> FilteredEpoch:
    """Filter ``raw`` into sub-bands, then crop the analysis window.

    Filtering runs on the full raw epoch before cropping so the forward-backward
    edge transients fall outside the window whenever the raw epoch allows it.
    """
    window = crop_window(raw.fs, raw.samples.shape[1], config)
    filtered = filter_raw(raw.samples, raw.fs, config)
    return FilteredEpoch(np.ascontiguousarray(filtered[:, window, :]), raw.fs)


def epochs_from_raw(raw: NDArray, fs: float, config: FilterBankConfig) -> NDArray[np.float64]:
    """Batch version of ``apply_filter_bank``: ``(E, C, n_raw) -> (E, C, Nt, Ns)``."""
    raw = np.asarray(raw, dtype=np.float64)
    window = crop_window(fs, raw.shape[-1], config)
    return np.ascontiguousarray(filter_raw(raw, fs, config)[:, :, window, :])


@dataclass
class ReferenceSignal:
    rows: NDArray[np.float64]  # (2*nh, Nt)
    character_index: int

    @property
    def n_harmonics(self) -> int:
        return self.rows.shape[0] // 2


def reference_rows(freq: float, nh: int, nt: int, fs: float, phase: float = 0.0
                   ) -> NDArray[np.float64]:
    if nh < 1:
        raise ValueError("need at least one harmonic")
    if nt < 2:
        raise ValueError("need at least two samples")
    if nh * freq >= fs / 2:
        raise ValueError(f"harmonic {nh} of {freq} Hz aliases at fs={fs} Hz")
    t = np.arange(nt) / fs
    h = np.arange(1, nh + 1)[:, None]
    arg = 2 * np.pi * h * freq * t[None, :] + h * phase
    rows = np.empty((2 * nh, nt))
    rows[0::2] = np.sin(arg)
    rows[1::2] = np.cos(arg)
    return rows


def make_reference_signal(layout: SpellerLayout, character: int, nh: int, nt: int,
                          fs: float, use_phase: bool = True) -> ReferenceSignal:
    """Sine/cosine pairs at harmonics ``1..nh`` of ``layout.freqs[character]``.

    Row ``2h`` is ``sin(2*pi*(h+1)*f*t + (h+1)*phi)`` and row ``2h+1`` the
    matching cosine; ``phi`` is the layout phase when ``use_phase`` is set.
    """
    if not 0 <= character < layout.n_classes:
        raise ValueError(f"character {character} outside 0..{layout.n_classes - 1}")
    phase = layout.phases[character] if use_phase else 0.0
    return ReferenceSignal(reference_rows(layout.freqs[character], nh, nt, fs, phase),
                           character)


def _centered(a: NDArray, axis: int = -1) -> NDArray:
    return a - a.mean(axis=axis, keepdims=True)


def _is_degenerate(centered: NDArray, raw: NDArray) -> bool:
    scale = np.linalg.norm(raw)
    return not np.linalg.norm(centered) > 1e-13 * max(scale, np.finfo(float).tiny)


def pearson(a: NDArray, b: NDArray) -> float:
    """Mean-centred Pearson correlation of two equal-length vectors."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError("pearson inputs must have equal length")
    if a.size < 2:
        raise ValueError("pearson needs at least two samples")
    ac, bc = _centered(a), _centered(b)
    if _is_degenerate(ac, a) or _is_degenerate(bc, b):
        raise DegenerateInputError("pearson correlation of a constant vector")
    r = float(ac @ bc / (np.linalg.norm(ac) * np.linalg.norm(bc)))
    return min(1.0, max(-1.0, r))


def _solve_gram(gram: NDArray, rhs: NDArray) -> tuple:
    """Solve ``gram @ w = rhs``; adds a ``1e-8 * trace`` ridge when singular."""
    try:
        if np.linalg.cond(gram) < 1e12:
            return np.linalg.solve(gram, rhs), False
    except np.linalg.LinAlgError:
        pass
    ridge = 1e-8 * np.trace(gram)
    warnings.warn("singular Gram matrix, solving with a ridge term",
                  IllConditionedWarning, stacklevel=3)
    return np.linalg.solve(gram + ridge * np.eye(len(gram)), rhs), True


class HarmonicFit(NamedTuple):
    weights: NDArray[np.float64]
    corr: float
    regularized: bool


def fit_harmonic_combination(x: NDArray, ref: ReferenceSignal | NDArray) -> HarmonicFit:
    """Harmonic weights ``w_Y`` maximising ``pearson(x, w_Y @ rows)``.

    With a one-dimensional signal, CCA reduces to least squares of the centred
    signal on the centred reference rows. The returned correlation is >= 0.
    """
    rows = ref.rows if isinstance(ref, ReferenceSignal) else np.asarray(ref, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64).ravel()
    if rows.shape[1] != x.size:
        raise ValueError("signal and reference lengths differ")
    xc = _centered(x)
    if _is_degenerate(xc, x):
        raise DegenerateInputError("harmonic fit of a constant signal")
    yc = _centered(rows)
    w, regularized = _solve_gram(yc @ yc.T, yc @ xc)
    fitted = w @ yc
    nf = np.linalg.norm(fitted)
    if nf == 0.0:
        return HarmonicFit(w, 0.0, regularized)
    corr = float(xc @ fitted / (np.linalg.norm(xc) * nf))
    return HarmonicFit(w, min(1.0, corr), regularized)


def _whitener(cov: NDArray) -> NDArray:
    """Inverse Cholesky factor of ``cov`` with a ridge fallback."""
    n = len(cov)
    try:
        if np.linalg.cond(cov) < 1e12:
            return np.linalg.inv(np.linalg.cholesky(cov))
    except np.linalg.LinAlgError:
        pass
    warnings.warn("rank-deficient covariance, adding a ridge term",
                  IllConditionedWarning, stacklevel=3)
    ridge = 1e-8 * np.trace(cov) + np.finfo(float).tiny
    return np.linalg.inv(np.linalg.cholesky(cov + ridge * np.eye(n)))


class CanonicalPair(NamedTuple):
    corr: float
    x_weights: NDArray[np.float64]
    y_weights: NDArray[np.float64]


def canonical_correlation(x: NDArray, y: NDArray) -> CanonicalPair:
    """Leading canonical pair between ``x`` (p, Nt) and ``y`` (q, Nt)."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    if x.shape[1] != y.shape[1]:
        raise ValueError("canonical correlation inputs must share the time axis")
    xc, yc = _centered(x), _centered(y)
    if _is_degenerate(xc, x) or _is_degenerate(yc, y):
        raise DegenerateInputError("canonical correlation of a constant signal")
    lx = _whitener(xc @ xc.T)
    ly = _whitener(yc @ yc.T)
    u, s, vt = np.linalg.svd(lx @ (xc @ yc.T) @ ly.T)
    wx = lx.T @ u[:, 0]
    wy = ly.T @ vt[0]
    return CanonicalPair(float(min(s[0], 1.0)), wx, wy)
