"""Leave-one-participant-out evaluation, ITR and paired significance tests."""
from __future__ import annotations

import hashlib
import json
import logging
import math
import zlib
from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from scipy import stats

from . import baselines
from .ensemble import sweep
from .network import TrainingConfig, fine_tune_all, predict_batch, train_global
from .signal import CohortDataset, DegenerateInputError, FilteredEpoch
from .similarity import build_templates, rank_participants

log = logging.getLogger(__name__)

ENSEMBLE_METHODS = ("ensemble-dynamic", "ensemble-majority")
TRAINED_METHODS = ENSEMBLE_METHODS + ("global-dnn",)
BASELINE_METHODS = ("cca", "fbcca", "ttcca")
ALL_METHODS = TRAINED_METHODS + BASELINE_METHODS


def itr(p: float, m: int, t_total_s: float) -> float:
    """Information transfer rate in bits/min.

    ``p*log2(p)`` is taken as 0 at ``p = 0`` and ``(1-p)*log2((1-p)/(m-1))``
    as 0 at ``p = 1``.
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"accuracy {p} outside [0, 1]")
    if m < 2:
        raise ValueError("need at least two classes")
    if not t_total_s > 0:
        raise ValueError("selection time must be positive")
    bits = math.log2(m)
    if p > 0:
        bits += p * math.log2(p)
    if p < 1:
        bits += (1 - p) * math.log2((1 - p) / (m - 1))
    return bits * 60.0 / t_total_s


def paired_ttest(a: Sequence[float], b: Sequence[float]) -> tuple:
    """Paired t statistic on ``a - b`` and its two-sided p-value (df = n - 1)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or a.size < 2:
        raise ValueError("paired t-test needs two equal-length samples of size >= 2")
    d = a - b
    sd = d.std(ddof=1)
    if not sd > 0:
        raise DegenerateInputError("paired differences have zero variance")
    t = float(d.mean() / (sd / math.sqrt(d.size)))
    p = float(2.0 * stats.t.sf(abs(t), d.size - 1))
    return t, p


def bonferroni(p: float, n_comparisons: int = 4, alpha: float = 0.05,
               n_durations: int = 5) -> str:
    """``'**'`` below ``alpha/(n*n_durations)``, ``'*'`` below ``alpha/n``, else ``''``."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"p-value {p} outside [0, 1]")
    if n_comparisons < 1:
        raise ValueError("need at least one comparison")
    if p < alpha / (n_comparisons * n_durations):
        return "**"
    if p < alpha / n_comparisons:
        return "*"
    return ""


@dataclass(frozen=True)
class EvalConfig:
    durations_s: tuple = (1.0,)
    gaze_shift_s: float = 0.5
    methods: tuple = ALL_METHODS
    fixed_ks: Optional[tuple] = None
    nh: int = 5
    training: TrainingConfig = field(default_factory=TrainingConfig)
    n_jobs: int = 1

    def __post_init__(self):
        object.__setattr__(self, "durations_s", tuple(float(t) for t in self.durations_s))
        object.__setattr__(self, "methods", tuple(self.methods))
        if not self.durations_s or min(self.durations_s) <= 0:
            raise ValueError("durations must be positive")
        if self.gaze_shift_s < 0:
            raise ValueError("gaze shift must be non-negative")
        for m in self.methods:
            if m not in ALL_METHODS and not m.startswith("ensemble-fixed:"):
                raise ValueError(f"unknown method {m!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["training"] = self.training.to_dict()
        d["durations_s"] = list(self.durations_s)
        d["methods"] = list(self.methods)
        d["fixed_ks"] = None if self.fixed_ks is None else list(self.fixed_ks)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EvalConfig":
        d = dict(d)
        if "training" in d:
            d["training"] = TrainingConfig.from_dict(d["training"])
        for key in ("durations_s", "methods", "fixed_ks"):
            if d.get(key) is not None:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class FoldResult:
    """Per-epoch outcome of one left-out participant at one duration."""

    participant_id: str
    duration_s: float
    truth: list
    predictions: dict  # method -> list of labels
    chosen_k: list = field(default_factory=list)
    fixed_k_predictions: Optional[list] = None  # (n_epochs, N)

    def accuracy(self, method: str) -> float:
        return float(np.mean(np.asarray(self.predictions[method]) == np.asarray(self.truth)))


@dataclass
class MetricsRow:
    method: str
    duration_s: float
    participant_ids: list
    accuracies: list
    itrs: list
    itrs_no_gaze: list
    mean_acc: float
    se_acc: float
    mean_itr: float
    se_itr: float
    mean_itr_no_gaze: float
    mean_k: Optional[float] = None
    std_k: Optional[float] = None
    user_mean_k: Optional[list] = None
    user_std_k: Optional[list] = None

    def to_dict(self) -> dict:
        return asdict(self)


def _stderr(values) -> float:
    v = np.asarray(values, dtype=np.float64)
    return float(v.std(ddof=1) / math.sqrt(v.size)) if v.size > 1 else float("nan")


def _fold_seed(base: int, participant_id: str, duration_s: float) -> int:
    ss = np.random.SeedSequence([base, zlib.crc32(participant_id.encode()),
                                 int(round(duration_s * 1000))])
    return int(ss.generate_state(1)[0])


def _wanted_ks(cfg: EvalConfig, n: int) -> list:
    ks = set(range(1, n + 1)) if cfg.fixed_ks is None else {k for k in cfg.fixed_ks if k <= n}
    ks |= {int(m.split(":")[1]) for m in cfg.methods if m.startswith("ensemble-fixed:")}
    return sorted(k for k in ks if 1 <= k <= n)


def train_ensemble(cohort: CohortDataset, training: TrainingConfig) -> tuple:
    """Global network, fine-tuned ensemble and template bank for ``cohort``."""
    global_w, _ = train_global(cohort, training)
    ens = fine_tune_all(global_w, cohort, training)
    return global_w, ens, build_templates(cohort, ens)


def evaluate_fold(cohort: CohortDataset, left_out: int, duration_s: float,
                  cfg: EvalConfig, model_cache=None) -> FoldResult:
    """Classify every epoch of one left-out participant.

    The remaining participants are put in participant-id order, so the result
    does not depend on how the cohort is ordered.
    """
    cut = cohort.truncate(duration_s)
    target = cut.participants[left_out]
    others = sorted((i for i in range(cut.n_participants) if i != left_out),
                    key=lambda i: cut.participants[i].participant_id)
    train = cut.subset(others)
    m = cohort.layout.n_classes
    fs = cohort.fs
    epochs = [FilteredEpoch(np.asarray(e, dtype=np.float64), fs) for e in target.data]
    result = FoldResult(target.participant_id, duration_s, target.labels.tolist(), {})
    wanted = set(cfg.methods)

    if wanted & set(TRAINED_METHODS) or any(x.startswith("ensemble-fixed:") for x in wanted):
        training = replace(cfg.training,
                           seed=_fold_seed(cfg.training.seed, target.participant_id, duration_s))
        if model_cache is not None:
            global_w, ens, templates = model_cache(train, training)
        else:
            global_w, ens, templates = train_ensemble(train, training)
        if "global-dnn" in wanted:
            result.predictions["global-dnn"] = predict_batch(global_w, target.data)[0].tolist()
        preds = np.stack([predict_batch(w, target.data)[0] for w in ens], axis=1)
        ks = _wanted_ks(cfg, len(ens))
        dyn, maj, fixed, chosen = [], [], [], []
        for e, pr in zip(epochs, preds):
            try:
                report = rank_participants(e, ens, templates, cohort.layout, cfg.nh, pr)
            except DegenerateInputError:
                dyn.append(-1), maj.append(-1), fixed.append([-1] * len(ens)), chosen.append(0)
                continue
            labels, conf, _ = sweep(report, m)
            best = int(np.argmax(conf))
            dyn.append(int(labels[best]))
            chosen.append(best + 1)
            fixed.append(labels.tolist())
            maj.append(int(np.argmax(np.bincount(pr, minlength=m))))
        if "ensemble-dynamic" in wanted:
            result.predictions["ensemble-dynamic"] = dyn
        if "ensemble-majority" in wanted:
            result.predictions["ensemble-majority"] = maj
        for k in ks:
            result.predictions[f"ensemble-fixed:{k}"] = [row[k - 1] for row in fixed]
        result.chosen_k = chosen
        result.fixed_k_predictions = fixed

    bcfg = baselines.BaselineConfig(nh=cfg.nh)
    if "cca" in wanted:
        result.predictions["cca"] = [baselines.cca_classify(e.samples[:, :, bcfg.band],
                                                            cohort.layout, cfg.nh, fs)
                                     for e in epochs]
    if "fbcca" in wanted:
        w = bcfg.weights_for(cohort.epoch_shape[2])
        result.predictions["fbcca"] = [baselines.fbcca_classify(e, cohort.layout, cfg.nh, w)
                                       for e in epochs]
    if "ttcca" in wanted:
        model = baselines.ttcca_fit(baselines.cross_participant_templates(train),
                                    cohort.layout, cfg.nh, fs, bcfg.band)
        result.predictions["ttcca"] = [baselines.ttcca_classify(e, model, cohort.layout, cfg.nh)
                                       for e in epochs]
    return result


def run_folds(cohort: CohortDataset, cfg: EvalConfig, model_cache=None) -> list:
    """All (left-out participant, duration) folds, sorted by id then duration."""
    if cohort.n_participants < 2:
        raise ValueError("leave-one-participant-out needs at least 2 participants")
    longest = cohort.epoch_shape[1] / cohort.fs
    if max(cfg.durations_s) > longest + 1e-9:
        raise ValueError(f"requested duration {max(cfg.durations_s)} s exceeds the "
                         f"{longest} s epochs")
    jobs = [(u, t) for u in range(cohort.n_participants) for t in cfg.durations_s]
    if cfg.n_jobs == 1:
        folds = [evaluate_fold(cohort, u, t, cfg, model_cache) for u, t in jobs]
    else:
        from joblib import Parallel, delayed
        folds = Parallel(n_jobs=cfg.n_jobs)(
            delayed(evaluate_fold)(cohort, u, t, cfg, model_cache) for u, t in jobs)
    return sorted(folds, key=lambda f: (f.participant_id, f.duration_s))


def summarize(folds: Sequence[FoldResult], n_classes: int, cfg: EvalConfig) -> list:
    rows = []
    durations = sorted({f.duration_s for f in folds})
    methods = []
    for f in folds:
        for mth in f.predictions:
            if mth not in methods:
                methods.append(mth)
    for mth in methods:
        for t in durations:
            sel = sorted((f for f in folds if f.duration_s == t and mth in f.predictions),
                         key=lambda f: f.participant_id)
            if not sel:
                continue
            acc = [f.accuracy(mth) for f in sel]
            itrs = [itr(a, n_classes, t + cfg.gaze_shift_s) for a in acc]
            itrs0 = [itr(a, n_classes, t) for a in acc]
            row = MetricsRow(mth, t, [f.participant_id for f in sel], acc, itrs, itrs0,
                             float(np.mean(acc)), _stderr(acc), float(np.mean(itrs)),
                             _stderr(itrs), float(np.mean(itrs0)))
            ks = None
            if mth == "ensemble-dynamic":
                ks = [np.asarray(f.chosen_k, dtype=float) for f in sel]
            elif mth.startswith("ensemble-fixed:"):
                k = int(mth.split(":")[1])
                ks = [np.full(len(f.truth), float(k)) for f in sel]
            elif mth == "ensemble-majority":
                ks = [np.full(len(f.truth), float(len(f.fixed_k_predictions[0])))
                      for f in sel]
            if ks is not None:
                row.user_mean_k = [float(k.mean()) for k in ks]
                row.user_std_k = [float(k.std()) for k in ks]
                row.mean_k = float(np.mean(row.user_mean_k))
                row.std_k = float(np.mean(row.user_std_k))
            rows.append(row)
    return rows


def loo_evaluate(cohort: CohortDataset, cfg: EvalConfig = EvalConfig(), model_cache=None
                 ) -> list:
    """Leave-one-participant-out metrics, one ``MetricsRow`` per (method, duration)."""
    return summarize(run_folds(cohort, cfg, model_cache), cohort.layout.n_classes, cfg)


def significance_table(rows: Sequence[MetricsRow], reference: str = "ensemble-dynamic",
                       compare: Optional[Sequence[str]] = None, metric: str = "accuracies"
                       ) -> list:
    """Paired t-tests of ``reference`` against each compared method per duration."""
    by_key = {(r.method, r.duration_s): r for r in rows}
    durations = sorted({r.duration_s for r in rows if r.method == reference})
    if compare is None:
        compare = [m for m in ("global-dnn", "cca", "fbcca", "ttcca")
                   if any(r.method == m for r in rows)]
    out = []
    for t in durations:
        ref = by_key[(reference, t)]
        for mth in compare:
            other = by_key.get((mth, t))
            if other is None:
                continue
            try:
                tstat, p = paired_ttest(getattr(ref, metric), getattr(other, metric))
                flag = bonferroni(p, max(len(compare), 1), n_durations=max(len(durations), 1))
            except DegenerateInputError:
                tstat, p, flag = float("nan"), float("nan"), ""
            out.append({"duration_s": t, "reference": reference, "method": mth,
                        "metric": metric, "t": tstat, "p": p, "flag": flag})
    return out


def config_digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]
