import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ssvep_ensemble import network as N
from ssvep_ensemble import similarity as S
from ssvep_ensemble.signal import (CohortDataset, DegenerateInputError, FilteredEpoch,
                                   ParticipantRecords, SpellerLayout, fit_harmonic_combination,
                                   pearson, reference_rows)

FS = 250.0
LAYOUT = SpellerLayout.linear(3, 8.0, 2.0)
ARCH = N.Architecture(4, 100, 3, 3, n_combinations=6, conv3_maps=2, conv4_maps=2)


def constant_net(label, seed=0):
    """A network that predicts ``label`` for every input, with random combiners."""
    w = N.init_weights(ARCH, seed)
    rng = np.random.default_rng(seed)
    for k in w.params:
        w.params[k] = np.zeros_like(w.params[k])
    w.params["subband"][:] = rng.uniform(0.5, 1.5, 3)
    w.params["channel"][:] = rng.standard_normal((4, 6))
    w.params["fc_bias"][label] = 1.0
    return w


def random_epoch(rng, scale=1.0):
    return FilteredEpoch(scale * rng.standard_normal((4, 100, 3)), FS)


def bank_with(template, n_classes=3, character=0):
    templates = np.zeros((1, n_classes) + template.shape)
    counts = np.zeros((1, n_classes), dtype=np.int64)
    templates[0, character] = template
    counts[0, character] = 1
    return S.TemplateBank(templates, counts)


def test_subband_combine_examples():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((4, 20, 3))
    np.testing.assert_array_equal(S.subband_combine(x, [1, 0, 0]), x[..., 0])
    same = np.repeat(x[..., :1], 3, axis=2)
    np.testing.assert_allclose(S.subband_combine(same, [1, 1, 1]), 3 * x[..., 0], atol=1e-12)
    w = rng.standard_normal(3)
    loop = np.zeros((4, 20))
    for s in range(3):
        loop += w[s] * x[:, :, s]
    np.testing.assert_allclose(S.subband_combine(x, w), loop, atol=1e-12)
    with pytest.raises(ValueError):
        S.subband_combine(x, [1, 1])


def test_templates_are_means_of_correct_epochs():
    rng = np.random.default_rng(1)
    data = rng.standard_normal((9, 4, 100, 3))
    labels = np.array([0, 1, 2] * 3)
    cohort = CohortDataset(LAYOUT, FS, [ParticipantRecords("a", data, labels, np.repeat([0, 1, 2], 3))])
    bank = S.build_templates(cohort, [constant_net(1)])
    assert bank.counts.tolist() == [[0, 3, 0]]
    assert bank.get(0, 0) is None and bank.get(0, 2) is None
    assert not bank.templates[0, 0].any()
    np.testing.assert_allclose(bank.get(0, 1), data[labels == 1].mean(axis=0), atol=1e-12)
    with pytest.raises(ValueError):
        S.build_templates(cohort, [constant_net(1), constant_net(2)])


def test_score_arithmetic_and_selection():
    # the objective is the sum of squares and the larger candidate wins
    assert 0.6 ** 2 + 0.8 ** 2 == pytest.approx(1.0)
    objective = np.array([0.5 ** 2 + 0.5 ** 2, 0.9 ** 2 + 0.1 ** 2])
    assert int(np.argmax(objective)) == 1


def pure_template(character=0, seed=0):
    rng = np.random.default_rng(seed)
    wave = reference_rows(LAYOUT.freqs[character], 2, 100, FS, LAYOUT.phases[character])
    s = 1.0 * wave[0] + 0.4 * wave[3]
    return np.einsum("c,t,s->cts", rng.standard_normal(4), s, rng.uniform(0.5, 1, 3))


def test_identical_pure_instance_scores_at_least_one():
    t = pure_template()
    entry = S.score_participant(FilteredEpoch(t, FS), 0, [constant_net(0)], bank_with(t),
                                LAYOUT, nh=3)
    assert entry.status == S.OK
    assert entry.rho1 == pytest.approx(1.0, abs=1e-12)
    assert entry.score >= 1.0


def independent_scores(x, w, template, character, nh):
    xs = np.einsum("cts,s->ct", x, w.w_s)
    ts = np.einsum("cts,s->ct", template, w.w_s)
    rows = reference_rows(LAYOUT.freqs[character], nh, x.shape[1], FS, LAYOUT.phases[character])
    out = []
    for col in w.w_c.T:
        r1 = pearson(col @ xs, col @ ts)
        r2 = fit_harmonic_combination(col @ xs, rows).corr
        out.append((r1, r2))
    return np.array(out)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.integers(0, 2))
def test_selected_candidate_is_exhaustive_maximum(seed, character):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((4, 100, 3))
    t = pure_template(character, seed) + 0.5 * rng.standard_normal((4, 100, 3))
    w = constant_net(character, seed)
    entry = S.score_participant(FilteredEpoch(x, FS), 0, [w], bank_with(t, character=character),
                                LAYOUT, nh=3)
    ref = independent_scores(x, w, t, character, 3)
    obj = np.sum(ref ** 2, axis=1)
    assert entry.candidate == int(np.argmax(obj))
    assert entry.rho1 == pytest.approx(ref[entry.candidate, 0], abs=1e-10)
    assert entry.rho2 == pytest.approx(ref[entry.candidate, 1], abs=1e-10)
    assert entry.score == pytest.approx(obj.max(), abs=1e-10)
    assert 0.0 <= entry.score <= 2.0
    assert -1.0 <= entry.rho1 <= 1.0 and 0.0 <= entry.rho2 <= 1.0
    fit = fit_harmonic_combination(entry.w_c @ S.subband_combine(x, w.w_s),
                                   reference_rows(LAYOUT.freqs[character], 3, 100, FS,
                                                  LAYOUT.phases[character]))
    np.testing.assert_allclose(entry.w_y, fit.weights)


def test_absent_template_scores_zero():
    rng = np.random.default_rng(3)
    entry = S.score_participant(random_epoch(rng), 0, [constant_net(2)],
                                bank_with(pure_template()), LAYOUT)
    assert entry.status == S.ABSENT and entry.score == 0.0 and entry.prediction == 2


def test_ranking_is_stable_and_scale_invariant():
    assert S.descending_order([0.2, 0.9, 0.9, 0.1]).tolist() == [1, 2, 0, 3]
    assert S.descending_order([0.0]).tolist() == [0]
    rng = np.random.default_rng(4)
    nets = [constant_net(0, s) for s in range(4)]
    templates = np.stack([bank_with(pure_template(0, s) + rng.standard_normal((4, 100, 3)))
                          .templates[0] for s in range(4)])
    bank = S.TemplateBank(templates, np.tile([[1, 0, 0]], (4, 1)))
    x = random_epoch(rng)
    base = S.rank_participants(x, nets, bank, LAYOUT, nh=3)
    scaled = S.rank_participants(FilteredEpoch(2.5 * x.samples, FS), nets, bank, LAYOUT, nh=3)
    np.testing.assert_array_equal(base.order, scaled.order)
    np.testing.assert_allclose(base.scores, scaled.scores, atol=1e-10)
    assert sorted(base.to_dict()["order"]) == [0, 1, 2, 3]
    assert np.all(np.diff(base.scores[base.order]) <= 0)


def test_all_degenerate_instance_raises():
    t = pure_template()
    with pytest.raises(DegenerateInputError):
        S.rank_participants(FilteredEpoch(np.ones((4, 100, 3)), FS), [constant_net(0)],
                            bank_with(t), LAYOUT, nh=3)
    with pytest.raises(ValueError):
        S.rank_participants(FilteredEpoch(t, FS), [], bank_with(t), LAYOUT)


def test_report_from_arrays():
    rep = S.SimilarityReport.from_arrays([0.1, 0.5], [2, 1])
    assert rep.order.tolist() == [1, 0]
    assert rep.predictions.tolist() == [2, 1]
