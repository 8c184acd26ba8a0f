import time

import numpy as np
import pytest

from securelink import harness, ocsvm
from securelink.errors import ConfigError, DataError, InvalidInputError
from securelink.signal_core import AlignedSample, PreprocessConfig, build_samples


def identity_device(k=8, **overrides):
    fields = dict(
        scale=np.ones(3),
        cross_axis=np.eye(3),
        bias=np.zeros(3),
        baro_offset=0.0,
        tof_offset=0.0,
        phase_signature=np.zeros(k),
        phase_noise_std=0.0,
        sensor_noise_std=0.0,
    )
    fields.update(overrides)
    return harness.DeviceImperfection(**fields)


def stationary_profile(duration=5.0, **overrides):
    return harness.MotionProfile(schedule=((duration, "stationary"),), **overrides)


class TestDeviceValidation:
    def test_scale_must_be_positive(self):
        with pytest.raises(InvalidInputError):
            identity_device(scale=np.array([1.0, -0.1, 1.0]))

    def test_cross_axis_needs_unit_diagonal(self):
        with pytest.raises(InvalidInputError):
            identity_device(cross_axis=np.eye(3) * 2.0)

    def test_signature_must_survive_detrending(self):
        idx = np.arange(-4, 4)
        with pytest.raises(InvalidInputError):
            identity_device(phase_signature=0.1 * np.arange(8))
        sig = harness.make_phase_signature(np.random.default_rng(0), 8, 0.2)
        identity_device(phase_signature=sig)  # valid by construction

    def test_profile_validation(self):
        with pytest.raises(ConfigError):
            harness.MotionProfile(schedule=())
        with pytest.raises(ConfigError):
            harness.MotionProfile(schedule=((1.0, "warp"),))
        with pytest.raises(ConfigError):
            stationary_profile(csi_drop_prob=1.0)


class TestGenerator:
    def test_identity_device_stationary_accel_exact(self):
        # unit scale, no cross-axis, no bias, no noise: output is gravity only
        streams = harness.synth_generate([identity_device()], stationary_profile(), seed=0)
        _, telemetry = streams[0]
        for frame in telemetry:
            assert frame.acc_x == 0.0
            assert frame.acc_y == 0.0
            assert frame.acc_z == harness.GRAVITY_ADC

    def test_bias_only_constant_offset(self):
        bias = np.array([3.0, -2.0, 5.0])
        scale = np.array([1.1, 0.9, 1.05])
        cross = np.eye(3) + np.array([[0, 0.02, -0.01], [0.03, 0, 0.01], [0.0, -0.02, 0]])
        dev = identity_device(bias=bias, scale=scale, cross_axis=cross)
        ref = identity_device(scale=scale, cross_axis=cross)
        (_, biased), = harness.synth_generate([dev], stationary_profile(), seed=1)
        (_, ideal), = harness.synth_generate([ref], stationary_profile(), seed=1)
        # offset equals diag(c) @ D @ b exactly (same seed, zero noise)
        expected = (cross @ bias) * scale
        for fb, fi in zip(biased, ideal):
            got = np.array([fb.acc_x - fi.acc_x, fb.acc_y - fi.acc_y, fb.acc_z - fi.acc_z])
            np.testing.assert_allclose(got, expected, atol=1e-9)

    def test_signature_recovered_by_mean_extracted_errors(self):
        rng = np.random.default_rng(2)
        sig = harness.make_phase_signature(rng, 16, 0.3)
        noise = 0.2
        dev = identity_device(k=16, phase_signature=sig, phase_noise_std=noise)
        profile = stationary_profile(duration=60.0, csi_rate=10.0, csi_drop_prob=0.0)
        (csi, _), = harness.synth_generate([dev], profile, seed=3)
        from securelink.signal_core import preprocess_csi

        errors = np.stack(
            [f.errors for f in preprocess_csi(csi, PreprocessConfig(eta=4.0))]
        )
        n = errors.shape[0]
        assert n > 500
        tol = 5 * noise / np.sqrt(n)
        np.testing.assert_allclose(errors.mean(axis=0), sig, atol=tol + 1e-3)

    def test_deterministic_given_seed(self):
        fleet = harness.make_fleet(harness.FleetConfig(n_devices=2, k_subcarriers=8))
        profile = stationary_profile()
        devices = [fleet[i] for i in sorted(fleet)]
        a = harness.synth_generate(devices, profile, seed=42)
        b = harness.synth_generate(devices, profile, seed=42)
        for (csi_a, tel_a), (csi_b, tel_b) in zip(a, b):
            assert len(csi_a) == len(csi_b)
            for fa, fb in zip(csi_a, csi_b):
                assert np.array_equal(fa.phases, fb.phases)
            for fa, fb in zip(tel_a, tel_b):
                assert fa == fb

    def test_dropout_makes_rf_sparser_and_alignment_fills(self):
        fleet = harness.make_fleet(harness.FleetConfig(n_devices=1, k_subcarriers=8))
        profile = stationary_profile(duration=30.0, csi_rate=9.0, csi_drop_prob=0.3)
        (csi, telemetry), = harness.synth_generate(list(fleet.values()), profile, seed=4)
        assert len(csi) < len(telemetry)
        cfg = PreprocessConfig(eta=4.0, sample_len=6)
        samples, stats = build_samples(csi, telemetry, cfg)
        assert stats.telemetry_kept == len(telemetry)
        assert stats.samples == len(telemetry) // 6

    def test_zeroed_imperfections_statistically_indistinguishable(self):
        # discriminative signal must come only from DeviceImperfection
        dev = identity_device(sensor_noise_std=4.0, phase_noise_std=0.2)
        profile = stationary_profile(duration=120.0)
        (_, tel_a), (_, tel_b) = harness.synth_generate([dev, dev], profile, seed=5)
        fields = ["acc_x", "acc_y", "acc_z", "baro", "tof"]
        n = len(tel_a)
        for name in fields:
            a = np.array([getattr(f, name) for f in tel_a])
            b = np.array([getattr(f, name) for f in tel_b])
            pooled = np.sqrt(a.var() / n + b.var() / n)
            z = abs(a.mean() - b.mean()) / max(pooled, 1e-12)
            # alpha = 0.01 two-sided with Bonferroni over 5 fields
            assert z < 3.3, name


class TestSplits:
    def samples(self, per_device, n_devices=3):
        out = []
        for d in range(n_devices):
            for i in range(per_device):
                out.append(AlignedSample(rf=np.full((2, 4), float(i)),
                                         mems=np.zeros((2, 8)),
                                         device_id=f"dev{d}"))
        return out

    def test_closed_60_20_20(self):
        split = harness.split_closed(self.samples(100), seed=0)
        assert len(split.train) == 180 and len(split.val) == 60 and len(split.test) == 60

    def test_closed_rounding_rule(self):
        split = harness.split_closed(self.samples(5, n_devices=1), seed=0)
        assert (len(split.train), len(split.val), len(split.test)) == (3, 1, 1)

    def test_closed_disjoint_exhaustive_deterministic(self):
        samples = self.samples(20)
        a = harness.split_closed(samples, seed=7)
        b = harness.split_closed(samples, seed=7)
        assert [id(s) for s in a.train] == [id(s) for s in b.train]
        everything = a.train + a.val + a.test
        assert len(everything) == len(samples)
        assert {id(s) for s in everything} == {id(s) for s in samples}

    def test_closed_too_few(self):
        with pytest.raises(DataError):
            harness.split_closed(self.samples(4, n_devices=1), seed=0)

    def test_open_excludes_impostors_from_training(self):
        samples = self.samples(20, n_devices=5)
        split = harness.split_open(samples, ["dev0", "dev3"], seed=0)
        assert split.registered_ids == ("dev1", "dev2", "dev4")
        train_ids = {s.device_id for s in split.train + split.val}
        assert train_ids == set(split.registered_ids)
        assert len(split.test_impostor) == 40
        for sample, claimed in split.test_impostor:
            assert sample.device_id in ("dev0", "dev3")
            assert claimed in split.registered_ids

    def test_open_empty_impostors_degenerates(self):
        samples = self.samples(20, n_devices=3)
        split = harness.split_open(samples, [], seed=0)
        assert split.test_impostor == []
        assert len(split.train) + len(split.val) == 3 * (12 + 4)

    def test_open_all_impostors_rejected(self):
        samples = self.samples(10, n_devices=2)
        with pytest.raises(DataError):
            harness.split_open(samples, ["dev0", "dev1"], seed=0)

    def test_open_unknown_impostor(self):
        with pytest.raises(ConfigError):
            harness.split_open(self.samples(10), ["ghost"], seed=0)


def onehot_embedder(n_labels):
    def embed(sample):
        label = int(sample.device_id.replace("dev", ""))
        g = np.zeros(n_labels)
        g[label] = 1.0
        return g

    return embed


def stub_registry(ids, scorer_factory):
    reg = ocsvm.UavRegistry(b_min=1)
    for uid in ids:
        reg.models[uid] = scorer_factory(uid)
    return reg


class TestEvaluateClosed:
    def samples(self, per_device=10, n_devices=3):
        out = []
        for d in range(n_devices):
            for _ in range(per_device):
                out.append(AlignedSample(rf=np.zeros((2, 4)), mems=np.zeros((2, 8)),
                                         device_id=f"dev{d}"))
        return out

    def test_perfect_scorer(self):
        n = 3
        reg = stub_registry(
            [f"dev{d}" for d in range(n)],
            lambda uid: (lambda g, uid=uid: g[int(uid[3:])] - 0.5),
        )
        report = harness.evaluate_closed(reg, onehot_embedder(n), self.samples(), seed=0)
        assert report.accuracy == 1.0
        assert report.tnr == 1.0
        assert report.recall == 1.0
        assert report.precision == 1.0

    def test_always_accept_scorer_has_zero_tnr(self):
        n = 3
        reg = stub_registry([f"dev{d}" for d in range(n)], lambda uid: (lambda g: 1.0))
        report = harness.evaluate_closed(reg, onehot_embedder(n), self.samples(), seed=0)
        assert report.tnr == 0.0
        assert report.recall == 1.0

    def test_uncovered_label_rejected(self):
        reg = stub_registry(["dev0"], lambda uid: (lambda g: 1.0))
        with pytest.raises(DataError):
            harness.evaluate_closed(reg, onehot_embedder(3), self.samples(), seed=0)

    def test_metrics_consistent_with_confusion(self):
        n = 3
        rng_local = np.random.default_rng(0)
        reg = stub_registry(
            [f"dev{d}" for d in range(n)],
            lambda uid: (lambda g, uid=uid: g[int(uid[3:])] - 0.5 + rng_local.normal(0, 0.7)),
        )
        report = harness.evaluate_closed(reg, onehot_embedder(n), self.samples(), seed=1)
        assert report.accuracy == pytest.approx(
            np.trace(report.confusion) / report.confusion.sum(), abs=1e-12
        )
        assert report.confusion.sum(axis=1).tolist() == [10, 10, 10]


class TestEvaluateOpenPlumbing:
    def test_round_report_with_zero_impostors_has_absent_tnr(self):
        reg = stub_registry(["dev0"], lambda uid: (lambda g: 1.0))
        genuine = [AlignedSample(rf=np.zeros((2, 4)), mems=np.zeros((2, 8)),
                                 device_id="dev0") for _ in range(4)]
        report = harness.evaluate_authentication(reg, onehot_embedder(1), genuine, [])
        assert report.tnr is None
        assert report.accuracy == 1.0

    def test_malformed_round_spec(self):
        samples = [AlignedSample(rf=np.zeros((2, 4)), mems=np.zeros((2, 8)),
                                 device_id="dev0")]
        with pytest.raises(ConfigError):
            harness.evaluate_open(samples, [], harness.PipelineSettings())
        with pytest.raises(ConfigError):
            harness.evaluate_open(samples, [["ghost"]], harness.PipelineSettings())


class TestRuntime:
    def test_sleep_stubs(self):
        stages = harness.PipelineStages(
            preprocessing=lambda x: time.sleep(0.001) or x,
            fusion=lambda x: time.sleep(0.001) or x,
            identification=lambda x: x,
        )
        out = harness.measure_runtime(stages, [0], min_count=50)
        assert 0.8 < out["preprocessing_ms"] < 5.0
        assert 0.8 < out["fusion_ms"] < 5.0
        assert out["identification_ms"] < 0.5
        assert out["count"] == 50

    def test_empty_inputs_rejected(self):
        stages = harness.PipelineStages(lambda x: x, lambda x: x, lambda x: x)
        with pytest.raises(InvalidInputError):
            harness.measure_runtime(stages, [])


class TestBaseline:
    def test_separable_toy_case(self):
        rng = np.random.default_rng(0)
        train, test = [], []
        for d in range(3):
            off = rng.normal(0, 1.0, 8)
            for i in range(30):
                rf = off[:4] + rng.normal(0, 0.2, (2, 4))
                me = np.concatenate([off[4:], off[4:]]) + rng.normal(0, 0.2, (2, 8))
                sample = AlignedSample(rf=rf, mems=me, device_id=f"dev{d}")
                (train if i < 20 else test).append(sample)
        assert harness.nearest_centroid_baseline(train, test) > 0.9
