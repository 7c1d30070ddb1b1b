"""Synthetic multi-participant SSVEP cohorts.

Each participant belongs to one of ``n_clusters`` spatial clusters. Its
evoked response is a decaying harmonic sum at the character's frequency and
phase, delayed by a participant latency, projected on a participant mixing
vector (cluster direction plus angular jitter), and buried in spatially
mixed pink-plus-white noise.

Every random draw comes from a ``SeedSequence`` keyed by what it belongs to
(cluster layout, participant, or single epoch), so any epoch can be
regenerated on its own and participants can be generated in any order.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence, Union

import numpy as np
from numpy.typing import NDArray

from .signal import (OCCIPITAL_CHANNELS, CohortDataset, FilterBankConfig, FilteredEpoch,
                     ParticipantRecords, RawEpoch, SpellerLayout, apply_filter_bank,
                     epochs_from_raw)


def default_channel_names(n: int) -> tuple:
    if n <= len(OCCIPITAL_CHANNELS):
        return OCCIPITAL_CHANNELS[:n]
    return OCCIPITAL_CHANNELS + tuple(f"X{i + 1}" for i in range(len(OCCIPITAL_CHANNELS), n))


@dataclass(frozen=True)
class SynthParams:
    n_participants: int = 8
    layout: SpellerLayout = field(default_factory=lambda: SpellerLayout.linear(8, 8.0, 1.0))
    fs: float = 250.0
    duration_s: float = 1.0
    n_blocks: int = 6
    n_channels: int = 8
    nh_signal: int = 3
    harmonic_decay: float = 0.5
    snr_db: Union[float, tuple] = 0.0
    mixing_seed: int = 0
    noise_seed: int = 1
    n_clusters: int = 2
    cluster_jitter_deg: float = 15.0
    cluster_latency_spread_s: float = 0.0
    latency_s: float = 0.14
    latency_jitter_s: float = 0.0
    white_fraction: float = 0.5
    pre_stimulus_s: float = 0.5
    tail_s: float = 0.5
    signal_off: bool = False
    filter_bank: FilterBankConfig = field(default_factory=FilterBankConfig)

    def __post_init__(self):
        if isinstance(self.snr_db, (list, tuple, np.ndarray)):
            object.__setattr__(self, "snr_db", tuple(float(v) for v in self.snr_db))
        if self.n_participants < 2:
            raise ValueError("need at least 2 participants")
        if not 1 <= self.n_clusters <= self.n_participants:
            raise ValueError("n_clusters must lie in 1..n_participants")
        if self.n_channels < 1 or self.n_blocks < 1 or self.nh_signal < 1:
            raise ValueError("channels, blocks and harmonics must be positive")
        if self.nh_signal * max(self.layout.freqs) >= self.fs / 2:
            raise ValueError("highest evoked harmonic is above the Nyquist frequency")
        snrs = self.snr_db if isinstance(self.snr_db, tuple) else (self.snr_db,)
        if isinstance(self.snr_db, tuple) and len(snrs) != self.n_participants:
            raise ValueError("per-participant snr_db needs one value per participant")
        if not all(np.isfinite(snrs)):
            raise ValueError("snr_db must be finite; use signal_off for a pure-noise cohort")
        if not 0.0 <= self.white_fraction <= 1.0:
            raise ValueError("white_fraction must lie in [0, 1]")

    def participant_snr(self, n: int) -> float:
        return self.snr_db[n] if isinstance(self.snr_db, tuple) else float(self.snr_db)

    def window_config(self) -> FilterBankConfig:
        fb = self.filter_bank
        return FilterBankConfig(fb.n_subbands, fb.low_step_hz, fb.high_hz, fb.order,
                                fb.ripple_db, fb.family, latency_s=fb.latency_s,
                                pre_stimulus_s=self.pre_stimulus_s,
                                duration_s=self.duration_s)

    @property
    def n_raw(self) -> int:
        span = self.pre_stimulus_s + self.filter_bank.latency_s + self.duration_s + self.tail_s
        return int(round(span * self.fs))

    @property
    def channel_names(self) -> tuple:
        return default_channel_names(self.n_channels)

    def participant_id(self, n: int) -> str:
        return f"S{n + 1:02d}"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["layout"] = self.layout.to_dict()
        d["snr_db"] = list(self.snr_db) if isinstance(self.snr_db, tuple) else self.snr_db
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthParams":
        d = dict(d)
        if "layout" in d:
            d["layout"] = SpellerLayout.from_dict(d["layout"])
        if "filter_bank" in d:
            d["filter_bank"] = FilterBankConfig(**d["filter_bank"])
        if isinstance(d.get("snr_db"), list):
            d["snr_db"] = tuple(d["snr_db"])
        return cls(**d)


@dataclass(frozen=True)
class ParticipantModel:
    """Fixed per-participant quantities shared by all of its epochs."""

    cluster: int
    mixing: NDArray  # (C,), unit norm
    noise_mixing: NDArray  # (C, C)
    latency_s: float
    amplitude: float


def _cluster_layout(params: SynthParams) -> tuple:
    rng = np.random.default_rng(np.random.SeedSequence(params.mixing_seed, spawn_key=(0,)))
    c, k = params.n_channels, params.n_clusters
    raw = rng.standard_normal((c, k))
    if k <= c:
        means = np.linalg.qr(raw)[0][:, :k]
    else:
        means = raw / np.linalg.norm(raw, axis=0)
    spread = params.cluster_latency_spread_s
    offsets = rng.uniform(-spread, spread, size=k) if spread > 0 else np.zeros(k)
    return means.T, offsets


def participant_model(params: SynthParams, n: int) -> ParticipantModel:
    if not 0 <= n < params.n_participants:
        raise KeyError(f"unknown participant index {n}")
    means, offsets = _cluster_layout(params)
    cluster = n % params.n_clusters
    mu = means[cluster]
    rng = np.random.default_rng(np.random.SeedSequence(params.mixing_seed, spawn_key=(1, n)))
    u = rng.standard_normal(params.n_channels)
    u -= (u @ mu) * mu
    nu = np.linalg.norm(u)
    theta = np.deg2rad(params.cluster_jitter_deg) * rng.standard_normal()
    mixing = mu if nu == 0 else np.cos(theta) * mu + np.sin(theta) * u / nu
    a = rng.standard_normal((params.n_channels, params.n_channels))
    a *= np.sqrt(params.n_channels) / np.linalg.norm(a)  # unit mean channel noise power
    latency = params.latency_s + offsets[cluster] + params.latency_jitter_s * rng.standard_normal()
    decay = params.harmonic_decay ** np.arange(params.nh_signal)
    per_channel_power = 0.5 * np.sum(decay ** 2) / params.n_channels
    amp = 0.0 if params.signal_off else float(
        np.sqrt(10 ** (params.participant_snr(n) / 10) / per_channel_power))
    return ParticipantModel(cluster, mixing, a, float(latency), amp)


def _pink(rng: np.random.Generator, shape: tuple) -> NDArray:
    white = rng.standard_normal(shape)
    spec = np.fft.rfft(white, axis=-1)
    f = np.arange(spec.shape[-1], dtype=np.float64)
    f[0] = np.inf
    spec /= np.sqrt(f)
    pink = np.fft.irfft(spec, n=shape[-1], axis=-1)
    pink -= pink.mean(axis=-1, keepdims=True)
    return pink / pink.std(axis=-1, keepdims=True)


def _raw_samples(params: SynthParams, model: ParticipantModel, n: int, character: int,
                 block: int) -> NDArray:
    m = params.layout.n_classes
    if not 0 <= character < m:
        raise ValueError(f"character {character} outside 0..{m - 1}")
    t = np.arange(params.n_raw) / params.fs - params.pre_stimulus_s
    f = params.layout.freqs[character]
    phi = params.layout.phases[character]
    tau = t - model.latency_s
    evoked = np.zeros_like(t)
    for h in range(1, params.nh_signal + 1):
        evoked += params.harmonic_decay ** (h - 1) * np.sin(2 * np.pi * h * f * tau + h * phi)
    evoked[tau < 0] = 0.0
    rng = np.random.default_rng(
        np.random.SeedSequence(params.noise_seed, spawn_key=(n, block, character)))
    shape = (params.n_channels, params.n_raw)
    wf = params.white_fraction
    noise = np.sqrt(wf) * rng.standard_normal(shape) + np.sqrt(1 - wf) * _pink(rng, shape)
    return model.amplitude * np.outer(model.mixing, evoked) + model.noise_mixing @ noise


def generate_raw_instance(params: SynthParams, participant: int, character: int,
                          block: int = 0) -> RawEpoch:
    """Unfiltered epoch starting ``pre_stimulus_s`` before stimulus onset."""
    model = participant_model(params, participant)
    return RawEpoch(_raw_samples(params, model, participant, character, block), params.fs,
                    params.channel_names)


def generate_instance(params: SynthParams, participant: int, character: int,
                      block: int = 0) -> FilteredEpoch:
    """One filtered, window-cropped epoch; identical to the cohort's copy."""
    return apply_filter_bank(generate_raw_instance(params, participant, character, block),
                             params.window_config())


def generate_raw_participant(params: SynthParams, n: int) -> NDArray[np.float64]:
    """Unfiltered epochs of participant ``n`` as ``(n_blocks, M, C, n_raw)``."""
    model = participant_model(params, n)
    m = params.layout.n_classes
    return np.stack([np.stack([_raw_samples(params, model, n, i, b) for i in range(m)])
                     for b in range(params.n_blocks)])


def generate_participant(params: SynthParams, n: int) -> ParticipantRecords:
    m = params.layout.n_classes
    raw = generate_raw_participant(params, n)
    data = epochs_from_raw(raw.reshape((-1,) + raw.shape[2:]), params.fs,
                           params.window_config())
    labels = np.tile(np.arange(m), params.n_blocks)
    blocks = np.repeat(np.arange(params.n_blocks), m)
    return ParticipantRecords(params.participant_id(n), data, labels, blocks)


def generate_cohort(params: SynthParams) -> CohortDataset:
    """Every participant, block-major with each character once per block."""
    parts = [generate_participant(params, n) for n in range(params.n_participants)]
    return CohortDataset(params.layout, params.fs, parts, params.channel_names,
                         {"source": "synthetic", "params": params.to_dict()})


def cluster_of(params: SynthParams, participants: Sequence[int]) -> list:
    return [n % params.n_clusters for n in participants]
