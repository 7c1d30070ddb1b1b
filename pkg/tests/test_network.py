import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ssvep_ensemble import network as N
from ssvep_ensemble import synth
from ssvep_ensemble.signal import SpellerLayout

from oracles import finite_difference_check

TINY = N.Architecture(3, 25, 2, 3, n_combinations=4, conv3_maps=5, conv4_maps=4)


def test_gradient_check_eval_mode():
    assert finite_difference_check(TINY) < 1e-4


def test_gradient_check_with_dropout_masks():
    assert finite_difference_check(TINY, seed=2, train=True) < 1e-4


def test_init_weights():
    arch = N.Architecture(8, 50, 3, 4)
    w = N.init_weights(arch, 3)
    assert np.all(w.w_s == 1.0) and w.w_s.shape == (3,)
    assert w.w_c.shape == (8, 120)
    assert w.params["conv3"].size >= 10 ** 4
    assert w.params["conv3"].std() == pytest.approx(0.01, rel=0.2)
    assert not any(w.params[k].any() for k in N.PARAM_KEYS if k.endswith("_bias"))
    assert w.equals(N.init_weights(arch, 3))
    assert not w.equals(N.init_weights(arch, 4))


def test_architecture_shapes():
    arch = N.Architecture(9, 250, 3, 40)
    assert arch.conv3_len == 125 and arch.conv4_pad == (4, 5)
    assert arch.param_shapes()["fc"] == (40, 120 * 125)
    with pytest.raises(ValueError):
        N.Architecture(9, 1, 3, 40)


def test_forward_properties():
    rng = np.random.default_rng(0)
    w = N.init_weights(TINY, 0)
    for k in N.WEIGHT_KEYS[1:]:
        w.params[k] *= 30
    x = rng.standard_normal((5,) + TINY.input_shape)
    a = N.forward(w, x)
    b = N.forward(w, x)
    np.testing.assert_array_equal(a.softmax, b.softmax)
    np.testing.assert_allclose(a.softmax.sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_array_equal(N.forward(w, 2 * x).a1, 2 * a.a1)
    single = N.forward(w, x[0])
    np.testing.assert_allclose(single.softmax[0], a.softmax[0], atol=1e-14)
    with pytest.raises(ValueError):
        N.forward(w, x[:, :2])
    with pytest.raises(ValueError):
        N.forward(w, x, train=True)


def test_dropout_rate_and_scaling():
    rng = np.random.default_rng(0)
    a = np.ones(200_000)
    out, (keep, scale) = N._dropout(a, 0.1, rng)
    assert keep.mean() == pytest.approx(0.9, abs=0.005)
    assert out.mean() == pytest.approx(1.0, abs=0.01)
    out, (keep, scale) = N._dropout(np.ones(200_000), 0.95, rng)
    assert keep.mean() == pytest.approx(0.05, abs=0.003)
    assert N._dropout(np.ones(3), 0.0, rng)[1] is None


def test_loss_reference_values():
    m = 4
    w = N.init_weights(N.Architecture(2, 10, 3, m, n_combinations=2, conv3_maps=2,
                                      conv4_maps=2), 0)
    uniform = N.ForwardTrace(*[None] * 8, softmax=np.full((3, m), 1 / m))
    assert N.loss(uniform, [0, 1, 2], w, 0.0) == pytest.approx(np.log(m), abs=1e-12)
    onehot = N.ForwardTrace(*[None] * 8, softmax=np.eye(m)[:3])
    assert N.loss(onehot, [0, 1, 2], w, 0.0, clamp=None) <= 1e-9
    for k in w.params:
        w.params[k] = np.zeros_like(w.params[k])
    w.params["subband"][:] = 1.0
    w.params["fc_bias"][:] = 5.0  # biases stay out of the penalty
    assert N.loss(uniform, [0, 1, 2], w, 0.001) - np.log(m) == pytest.approx(0.003, abs=1e-15)


def test_loss_clamp_warns():
    w = N.init_weights(TINY, 0)
    tr = N.ForwardTrace(*[None] * 8, softmax=np.array([[1.0, 0.0, 0.0]]))
    with pytest.warns(RuntimeWarning):
        val = N.loss(tr, [1], w, 0.0)
    assert val == pytest.approx(-np.log(1e-12))


def test_prediction_tie_goes_to_lowest_index():
    w = N.init_weights(TINY, 0)
    for k in w.params:
        w.params[k] = np.zeros_like(w.params[k])
    x = np.ones(TINY.input_shape)
    label, s = N.predict(w, x)
    assert label == 0 and np.allclose(s, 1 / 3)
    labels, s = N.predict_batch(w, np.stack([x, x]))
    assert labels.tolist() == [0, 0] and np.array_equal(np.argmax(s, axis=1), labels)


def test_zero_epochs_return_init():
    layout = SpellerLayout.linear(3, 8.0, 2.0)
    params = synth.SynthParams(n_participants=2, n_blocks=1, layout=layout, n_channels=3)
    cohort = synth.generate_cohort(params)
    cfg = N.TrainingConfig(epochs_global=0, epochs_finetune=0, n_combinations=4,
                           conv3_maps=3, conv4_maps=3)
    w, hist = N.train_global(cohort, cfg)
    assert w.equals(N.init_weights(N.architecture_for(cohort, cfg), cfg.seed))
    assert hist.loss == []
    ens = N.fine_tune_all(w, cohort, cfg)
    assert len(ens) == cohort.n_participants and all(e.equals(w) for e in ens)


def test_divergence_is_reported():
    layout = SpellerLayout.linear(3, 8.0, 2.0)
    cohort = synth.generate_cohort(synth.SynthParams(n_participants=2, n_blocks=1,
                                                     layout=layout, n_channels=3))
    cfg = N.TrainingConfig(epochs_global=1, n_combinations=4, conv3_maps=3, conv4_maps=3)
    w = N.init_weights(N.architecture_for(cohort, cfg), 0)
    w.params["fc"][:] = np.nan
    with pytest.raises(N.TrainingDivergedError):
        N.fit(w, cohort.participants[0].data, cohort.participants[0].labels, cfg, 1, 1e-3, 0)


def test_training_config_round_trip():
    cfg = N.TrainingConfig(conv3_maps=8, dropout=[0.2, 0.1, 0.5])
    assert N.TrainingConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError):
        N.TrainingConfig(dropout=(0.1, 1.0, 0.2))


def test_weights_array_round_trip():
    w = N.init_weights(TINY, 2)
    back = N.weights_from_arrays(TINY, N.weights_to_arrays(w, "g/"), "g/")
    assert back.equals(w)
    assert N.arch_from_dict(N.arch_to_dict(TINY)) == TINY
    assert w.n_parameters() == sum(int(np.prod(s)) for s in TINY.param_shapes().values())


# -- end-to-end behaviour on a high-SNR cohort ---------------------------------------------

FAST = N.TrainingConfig(epochs_global=40, epochs_finetune=20, learning_rate=1e-3,
                        finetune_learning_rate=1e-3, conv3_maps=8, conv4_maps=8,
                        batch_size=32, seed=3)


@pytest.fixture(scope="module")
def high_snr():
    params = synth.SynthParams(n_participants=4, snr_db=-5.0, n_blocks=6)
    cohort = synth.generate_cohort(params)
    w, hist = N.train_global(cohort, FAST)
    return params, cohort, w, hist


def test_global_training_fits_high_snr_cohort(high_snr):
    _, cohort, w, hist = high_snr
    data = np.concatenate([p.data for p in cohort.participants])
    labels = np.concatenate([p.labels for p in cohort.participants])
    assert np.mean(N.predict_batch(w, data)[0] == labels) >= 0.95
    assert hist.loss[-1] < hist.loss[0]


def test_fine_tuning_helps_on_held_out_block(high_snr):
    params, cohort, _, _ = high_snr
    train = cohort.subset(range(cohort.n_participants))
    train.participants = [type(p)(p.participant_id, p.data[p.blocks < 5], p.labels[p.blocks < 5],
                                  p.blocks[p.blocks < 5]) for p in cohort.participants]
    cfg = FAST
    g, _ = N.train_global(train, cfg)
    ens = N.fine_tune_all(g, train, cfg)
    wins = 0
    for n, p in enumerate(cohort.participants):
        sel = p.blocks == 5
        acc_ft = np.mean(N.predict_batch(ens[n], p.data[sel])[0] == p.labels[sel])
        acc_g = np.mean(N.predict_batch(g, p.data[sel])[0] == p.labels[sel])
        wins += acc_ft >= acc_g
    assert wins > cohort.n_participants / 2


def test_own_network_recognises_new_instances(high_snr):
    params, cohort, g, _ = high_snr
    own = N.fine_tune(g, cohort, 0, FAST)[0]
    hits = []
    for block in range(6, 11):  # blocks never seen in training
        for i in range(params.layout.n_classes):
            x = synth.generate_instance(params, 0, i, block)
            hits.append(N.predict(own, x)[0] == i)
    assert np.mean(hits) >= 0.9


def test_fine_tune_all_is_job_count_invariant(high_snr):
    _, cohort, g, _ = high_snr
    cfg = N.TrainingConfig(epochs_finetune=1, conv3_maps=8, conv4_maps=8, seed=3)
    a = N.fine_tune_all(g, cohort.subset([0, 1]), cfg, n_jobs=1)
    b = N.fine_tune_all(g, cohort.subset([0, 1]), cfg, n_jobs=2)
    assert all(x.equals(y) for x, y in zip(a, b))
