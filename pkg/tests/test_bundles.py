import json

import numpy as np
import pytest
from scipy.io import savemat

from ssvep_ensemble import bundles as BD
from ssvep_ensemble import network as N
from ssvep_ensemble import similarity as S
from ssvep_ensemble import synth
from ssvep_ensemble.signal import OCCIPITAL_CHANNELS, SpellerLayout

PARAMS = synth.SynthParams(n_participants=2, n_blocks=2, n_channels=9, snr_db=-5.0,
                           layout=SpellerLayout.linear(4, 8.0, 2.0, dphase=0.5))


@pytest.fixture(scope="module")
def cohort():
    return synth.generate_cohort(PARAMS)


def edit_manifest(path, fn):
    mpath = path / "manifest.json"
    m = json.loads(mpath.read_text())
    fn(m)
    mpath.write_text(json.dumps(m))


def test_f64_round_trip_is_bitwise(cohort, tmp_path):
    BD.save_cohort(cohort, tmp_path, dtype="f64le")
    back = BD.load_cohort(tmp_path)
    for a, b in zip(cohort.participants, back.participants):
        assert a.data.tobytes() == b.data.tobytes()
        assert a.participant_id == b.participant_id
        np.testing.assert_array_equal(a.labels, b.labels)
    assert back.layout == cohort.layout and back.channel_names == cohort.channel_names
    assert BD.read_fingerprint(tmp_path) == BD.cohort_fingerprint(cohort)


def test_f32_bundle_is_stable_under_resave(cohort, tmp_path):
    BD.save_cohort(cohort, tmp_path / "a")
    once = BD.load_cohort(tmp_path / "a")
    np.testing.assert_allclose(once.participants[0].data, cohort.participants[0].data,
                               rtol=1e-6, atol=1e-6 * np.abs(cohort.participants[0].data).max())
    BD.save_cohort(once, tmp_path / "b")
    assert ((tmp_path / "a" / "manifest.json").read_bytes()
            == (tmp_path / "b" / "manifest.json").read_bytes())
    with pytest.raises(ValueError):
        BD.save_cohort(cohort, tmp_path / "c", dtype="int16")


def test_channel_count_edit_is_a_dimension_error(cohort, tmp_path):
    BD.save_cohort(cohort, tmp_path)
    edit_manifest(tmp_path, lambda m: (m["shape"].update(channel=64),
                                       m.update(channel_names=[f"E{i}" for i in range(64)])))
    with pytest.raises(BD.BundleDimensionError, match="64"):
        BD.load_cohort(tmp_path)


def test_future_version_is_rejected(cohort, tmp_path):
    BD.save_cohort(cohort, tmp_path)
    edit_manifest(tmp_path, lambda m: m.update(format_version="2"))
    with pytest.raises(BD.BundleVersionError):
        BD.load_cohort(tmp_path)


def test_truncated_and_padded_blobs(cohort, tmp_path):
    BD.save_cohort(cohort, tmp_path)
    blob = tmp_path / "p001.f32le"
    payload = blob.read_bytes()
    blob.write_bytes(payload[:-4])
    with pytest.raises(BD.BundleTruncatedError):
        BD.load_cohort(tmp_path)
    blob.write_bytes(payload + b"\0" * 4)
    with pytest.raises(BD.BundleDimensionError):
        BD.load_cohort(tmp_path)
    blob.unlink()
    with pytest.raises(BD.BundleTruncatedError):
        BD.load_cohort(tmp_path)


def test_tampered_samples_fail_the_fingerprint(cohort, tmp_path):
    BD.save_cohort(cohort, tmp_path)
    blob = tmp_path / "p000.f32le"
    a = np.fromfile(blob, dtype="<f4")
    a[10] += 1.0
    a.tofile(blob)
    with pytest.raises(BD.FingerprintMismatchError):
        BD.load_cohort(tmp_path)
    BD.load_cohort(tmp_path, verify=False)


def test_not_a_bundle(tmp_path):
    with pytest.raises(BD.BundleError):
        BD.load_cohort(tmp_path)
    (tmp_path / "manifest.json").write_text("{nope")
    with pytest.raises(BD.BundleError):
        BD.load_cohort(tmp_path)


def mapping(names, **kw):
    m = {"dim_order": ["channel", "sample", "character", "block"], "channel_names": names,
         "freqs": list(PARAMS.layout.freqs), "phases": list(PARAMS.layout.phases),
         "fs": PARAMS.fs, "pre_stimulus_s": PARAMS.pre_stimulus_s,
         "latency_s": PARAMS.latency_s, "duration_s": PARAMS.duration_s}
    m.update(kw)
    return m


def write_dumps(tmp_path, names, rng=None, fmt="npy"):
    """Raw synthetic recordings, channel-major, optionally inside extra channels."""
    for n in range(PARAMS.n_participants):
        raw = synth.generate_raw_participant(PARAMS, n)  # (block, char, ch, sample)
        full = np.zeros(raw.shape[:2] + (len(names), raw.shape[3]))
        if rng is not None:
            full[:] = rng.standard_normal(full.shape)
        for c, ch in enumerate(PARAMS.channel_names):
            full[:, :, names.index(ch)] = raw[:, :, c]
        arr = full.transpose(2, 3, 1, 0)
        stem = PARAMS.participant_id(n)
        if fmt == "npy":
            np.save(tmp_path / f"{stem}.npy", arr)
        else:
            savemat(tmp_path / f"{stem}.mat", {"eeg": arr})


def test_import_matches_direct_generation(cohort, tmp_path):
    names = list(OCCIPITAL_CHANNELS)[::-1]
    write_dumps(tmp_path, names)
    imported = BD.import_matrix_dump(tmp_path, mapping(names))
    assert imported.channel_names == OCCIPITAL_CHANNELS
    for a, b in zip(cohort.participants, imported.participants):
        assert a.participant_id == b.participant_id
        np.testing.assert_array_equal(a.data, b.data)
        np.testing.assert_array_equal(a.labels, b.labels)


def test_import_picks_nine_channels_from_sixty_four(tmp_path):
    rng = np.random.default_rng(0)
    names = [f"E{i}" for i in range(55)] + list(OCCIPITAL_CHANNELS)
    names = [names[i] for i in rng.permutation(64)]
    write_dumps(tmp_path, names, rng, fmt="mat")
    cfgpath = tmp_path / "mapping.json"
    cfgpath.write_text(json.dumps(mapping(names, variable="eeg")))
    imported = BD.import_matrix_dump(tmp_path, cfgpath)
    assert imported.channel_names == OCCIPITAL_CHANNELS
    assert imported.epoch_shape == (9, 250, 3)


def test_import_errors(tmp_path):
    names = [ch for ch in OCCIPITAL_CHANNELS if ch != "Oz"] + ["Fz"]
    write_dumps(tmp_path, list(OCCIPITAL_CHANNELS))
    with pytest.raises(BD.MissingChannelError, match="Oz"):
        BD.import_matrix_dump(tmp_path, mapping(names))
    with pytest.raises(BD.InconsistentDumpError):
        BD.import_matrix_dump(tmp_path, mapping(list(OCCIPITAL_CHANNELS) + ["Fz"],
                                                select_channels=["Fz"]))
    np.save(tmp_path / "S9.npy", np.zeros((9, 10, 4, 2)))
    with pytest.raises(BD.InconsistentDumpError, match="differs"):
        BD.import_matrix_dump(tmp_path, mapping(list(OCCIPITAL_CHANNELS)))
    with pytest.raises(BD.BundleError):
        BD.import_matrix_dump(tmp_path, mapping(list(OCCIPITAL_CHANNELS), dim_order=["a"]))


def small_model(cohort):
    cfg = N.TrainingConfig(epochs_global=1, epochs_finetune=1, conv3_maps=2, conv4_maps=2,
                           n_combinations=4, seed=5)
    g, _ = N.train_global(cohort, cfg)
    ens = N.fine_tune_all(g, cohort, cfg)
    bank = S.build_templates(cohort, ens)
    return BD.ModelBundle(g, ens, bank, cfg, cohort.layout, cohort.fs, cohort.participant_ids,
                          BD.cohort_fingerprint(cohort), nh=4,
                          channel_names=cohort.channel_names)


def test_model_bundle_round_trip_and_determinism(cohort, tmp_path):
    bundle = small_model(cohort)
    BD.save_model(bundle, tmp_path / "a.zip")
    BD.save_model(small_model(cohort), tmp_path / "b.zip")
    assert (tmp_path / "a.zip").read_bytes() == (tmp_path / "b.zip").read_bytes()
    back = BD.load_model(tmp_path / "a.zip")
    assert back.global_weights.equals(bundle.global_weights)
    assert all(x.equals(y) for x, y in zip(back.ensemble, bundle.ensemble))
    np.testing.assert_array_equal(back.templates.templates, bundle.templates.templates)
    np.testing.assert_array_equal(back.templates.counts, bundle.templates.counts)
    assert back.training == bundle.training and back.nh == 4
    assert back.participant_ids == bundle.participant_ids
    back.check_cohort(BD.cohort_fingerprint(cohort))
    with pytest.raises(BD.FingerprintMismatchError):
        back.check_cohort("0" * 64)
    with pytest.raises(BD.BundleDimensionError):
        BD.ModelBundle(bundle.global_weights, bundle.ensemble[:1], bundle.templates,
                       bundle.training, cohort.layout, cohort.fs, ["S1"], "x")
