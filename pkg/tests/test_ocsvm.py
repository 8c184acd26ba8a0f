import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st

from securelink import ocsvm
from securelink.errors import (
    ConfigError,
    ConflictError,
    DataError,
    StateError,
    UnknownIdError,
)
from securelink.signal_core import AlignedSample


def unit_rows(a):
    a = np.asarray(a, dtype=float)
    return a / np.linalg.norm(a, axis=1, keepdims=True)


def random_cluster(rng, n, dim=8, spread=0.2):
    center = rng.normal(size=dim)
    return unit_rows(center + spread * rng.normal(size=(n, dim)))


def brute_force_dual(x, tau, gamma):
    """Exact dual optimum by enumerating active sets (free / zero / capped).

    For each pattern, the free coefficients solve the equality-constrained
    stationarity system; feasible candidates are compared on objective value.
    Independent of the iterative solver.
    """
    b = x.shape[0]
    cbox = 1.0 / (tau * b)
    k = ocsvm._kernel_matrix(x, x, gamma)
    best = np.inf
    for pattern in itertools.product((0, 1, 2), repeat=b):  # 0 zero, 1 free, 2 capped
        free = [i for i, p in enumerate(pattern) if p == 1]
        capped = [i for i, p in enumerate(pattern) if p == 2]
        mass = 1.0 - len(capped) * cbox
        alpha = np.zeros(b)
        alpha[capped] = cbox
        if free:
            # stationarity: K_ff a_f + K_fc * cbox = mu * 1, sum(a_f) = mass
            nf = len(free)
            a_mat = np.zeros((nf + 1, nf + 1))
            a_mat[:nf, :nf] = k[np.ix_(free, free)]
            a_mat[:nf, nf] = -1.0
            a_mat[nf, :nf] = 1.0
            rhs = np.zeros(nf + 1)
            if capped:
                rhs[:nf] = -k[np.ix_(free, capped)].sum(axis=1) * cbox
            rhs[nf] = mass
            try:
                sol = np.linalg.solve(a_mat, rhs)
            except np.linalg.LinAlgError:
                continue
            af = sol[:nf]
            if np.any(af < -1e-10) or np.any(af > cbox + 1e-10):
                continue
            alpha[free] = np.clip(af, 0.0, cbox)
        if abs(alpha.sum() - 1.0) > 1e-8:
            continue
        obj = 0.5 * alpha @ k @ alpha
        best = min(best, obj)
    return best


class TestKernel:
    def test_identical_points(self):
        v = np.ones(4)
        assert ocsvm.gaussian_kernel(v, v, 0.3) == pytest.approx(1.0)

    def test_orthogonal_unit_vectors(self):
        a = np.array([1.0, 0.0])
        b = np.array([0.0, 1.0])
        assert ocsvm.gaussian_kernel(a, b, 0.5) == pytest.approx(np.exp(-1.0), abs=1e-9)

    def test_large_gamma_limit(self):
        a, b = np.zeros(3), np.ones(3)
        assert 0.0 < ocsvm.gaussian_kernel(a, b, 1e4) < 1e-300 or \
            ocsvm.gaussian_kernel(a, b, 1e4) == 0.0

    def test_gamma_validation(self):
        with pytest.raises(ConfigError):
            ocsvm.gaussian_kernel(np.ones(2), np.ones(2), 0.0)

    @given(st.integers(0, 2**31 - 1))
    def test_symmetry_and_range(self, seed):
        rng = np.random.default_rng(seed)
        a, b = rng.normal(size=5), rng.normal(size=5)
        g = float(rng.uniform(0.01, 2.0))
        k1 = ocsvm.gaussian_kernel(a, b, g)
        assert k1 == pytest.approx(ocsvm.gaussian_kernel(b, a, g), abs=1e-15)
        assert 0.0 < k1 <= 1.0


class TestFit:
    def test_two_identical_points_tau_one(self):
        x = np.tile(unit_rows(np.ones((1, 4))), (2, 1))
        model, diag = ocsvm.fit_ocsvm(x, tau=1.0, gamma=0.5, return_diagnostics=True)
        np.testing.assert_allclose(diag.alpha, [0.5, 0.5])
        # decision value at the training point is maximal (kernel peak)
        assert ocsvm.score(model, x[0]) == pytest.approx(1.0 - model.rho)

    def test_dual_feasibility_and_kkt(self):
        rng = np.random.default_rng(0)
        x = random_cluster(rng, 60)
        for tau in (0.05, 0.2, 0.7):
            model, diag = ocsvm.fit_ocsvm(x, tau=tau, gamma=0.5, return_diagnostics=True)
            cbox = 1.0 / (tau * len(x))
            assert diag.kkt_gap < 1e-5
            assert np.all(diag.alpha >= 0.0)
            assert np.all(diag.alpha <= cbox + 1e-12)
            assert diag.alpha.sum() == pytest.approx(1.0, abs=1e-6)
            assert model.dual_coeffs.sum() == pytest.approx(1.0, abs=1e-6)

    def test_brute_force_equivalence_small_instances(self):
        rng = np.random.default_rng(1)
        for trial in range(20):
            b = int(rng.integers(2, 7))
            dim = int(rng.integers(2, 4))
            x = unit_rows(rng.normal(size=(b, dim)))
            tau = float(rng.uniform(0.3, 1.0))
            gamma = float(rng.choice([1.0 / 256.0, 0.1, 0.5, rng.uniform(0.2, 2.0)]))
            _, diag = ocsvm.fit_ocsvm(x, tau=tau, gamma=gamma, return_diagnostics=True)
            ref = brute_force_dual(x, tau, gamma)
            assert diag.objective == pytest.approx(ref, abs=1e-4), (trial, b, tau, gamma)

    def test_nu_property_quick(self):
        rng = np.random.default_rng(2)
        tau = 0.1
        rejected = []
        for _ in range(5):
            x = random_cluster(rng, 100, spread=0.3)
            model = ocsvm.fit_ocsvm(x, tau=tau, gamma=0.5)
            rejected.append((ocsvm.score_many(model, x) < 0).mean())
        assert np.mean(rejected) <= tau + 0.05

    def test_input_validation(self):
        with pytest.raises(DataError):
            ocsvm.fit_ocsvm(np.ones((1, 4)))
        with pytest.raises(ConfigError):
            ocsvm.fit_ocsvm(np.ones((3, 4)), tau=0.0)
        with pytest.raises(ConfigError):
            ocsvm.fit_ocsvm(np.ones((3, 4)), gamma=-1.0)


class TestScoreDecide:
    @pytest.fixture()
    def fitted(self):
        rng = np.random.default_rng(3)
        x = random_cluster(rng, 80, spread=0.15)
        model, diag = ocsvm.fit_ocsvm(x, tau=0.1, gamma=0.5, return_diagnostics=True)
        return x, model, diag

    def test_centroid_positive(self, fitted):
        x, model, _ = fitted
        centroid = x.mean(axis=0)
        centroid /= np.linalg.norm(centroid)
        assert ocsvm.score(model, centroid) > 0
        assert ocsvm.decide(model, centroid)

    def test_far_point_scores_minus_rho(self, fitted):
        x, model, _ = fitted
        far = -x.mean(axis=0)
        far /= np.linalg.norm(far)
        s = ocsvm.score(model, 100.0 * far)
        assert s == pytest.approx(-model.rho, abs=1e-9)
        assert model.rho > 0
        assert not ocsvm.decide(model, 100.0 * far)

    def test_margin_support_vector_scores_near_zero(self, fitted):
        x, model, diag = fitted
        cbox = 1.0 / (model.tau * len(x))
        margin = (diag.alpha > 1e-9) & (diag.alpha < cbox - 1e-9)
        assert margin.any()
        scores = ocsvm.score_many(model, x[margin])
        assert np.max(np.abs(scores)) < 1e-4

    def test_gamma_to_zero_flattens_scores(self):
        rng = np.random.default_rng(4)
        x = random_cluster(rng, 40, spread=0.5)
        spreads = []
        for gamma in (1.0, 0.1, 0.01, 0.001):
            model = ocsvm.fit_ocsvm(x, tau=0.5, gamma=gamma)
            s = ocsvm.score_many(model, x)
            spreads.append(s.max() - s.min())
        assert spreads == sorted(spreads, reverse=True)


class TestRegistry:
    def embeddings(self, seed, n=60):
        return random_cluster(np.random.default_rng(seed), n, spread=0.1)

    def test_register_adds_and_conflicts(self):
        reg = ocsvm.UavRegistry(tau=0.1, gamma=0.5, b_min=10)
        ocsvm.register_uav(reg, "dev1", self.embeddings(0))
        assert reg.ids() == ["dev1"]
        with pytest.raises(ConflictError):
            ocsvm.register_uav(reg, "dev1", self.embeddings(1))
        ocsvm.register_uav(reg, "dev1", self.embeddings(1), overwrite=True)
        assert len(reg.models) == 1

    def test_b_min_enforced(self):
        reg = ocsvm.UavRegistry(b_min=50)
        with pytest.raises(DataError):
            ocsvm.register_uav(reg, "dev1", self.embeddings(0, n=20))

    def test_authenticate_unknown_id(self):
        reg = ocsvm.UavRegistry(b_min=10)
        sample = AlignedSample(rf=np.zeros((2, 4)), mems=np.zeros((2, 8)))
        with pytest.raises(UnknownIdError):
            ocsvm.authenticate(reg, "ghost", sample, lambda s: np.ones(8))

    def test_identify_single_and_tie_break(self):
        reg = ocsvm.UavRegistry(tau=0.1, gamma=0.5, b_min=10)
        emb = self.embeddings(5)
        ocsvm.register_uav(reg, "b", emb)
        sample = AlignedSample(rf=np.zeros((2, 4)), mems=np.zeros((2, 8)))
        embedder = lambda s: emb[0]
        assert ocsvm.identify(reg, sample, embedder) == "b"
        reg.models["a"] = reg.models["b"]  # exact duplicate -> tie
        assert ocsvm.identify(reg, sample, embedder) == "a"

    def test_identify_empty_registry(self):
        sample = AlignedSample(rf=np.zeros((2, 4)), mems=np.zeros((2, 8)))
        with pytest.raises(StateError):
            ocsvm.identify(ocsvm.UavRegistry(), sample, lambda s: np.ones(4))

    def test_pick_best_monotone_invariance(self):
        rng = np.random.default_rng(6)
        scores = {f"d{i}": float(rng.normal()) for i in range(8)}
        transformed = {k: np.tanh(3.0 * v) + 2.0 for k, v in scores.items()}
        assert ocsvm.pick_best(scores) == ocsvm.pick_best(transformed)

    def test_registry_round_trip_bit_exact(self, tmp_path):
        reg = ocsvm.UavRegistry(model_version="abc123", tau=0.1, gamma=0.5, b_min=10,
                                checkpoint_ref="ckpt")
        for i in range(3):
            ocsvm.register_uav(reg, f"dev{i}", self.embeddings(i))
        p1, p2 = tmp_path / "r1.json", tmp_path / "r2.json"
        ocsvm.save_registry(reg, p1)
        clone = ocsvm.load_registry(p1)
        ocsvm.save_registry(clone, p2)
        assert p1.read_bytes() == p2.read_bytes()
        for uid in reg.ids():
            np.testing.assert_array_equal(
                reg.models[uid].support_vectors, clone.models[uid].support_vectors
            )
            np.testing.assert_array_equal(
                reg.models[uid].dual_coeffs, clone.models[uid].dual_coeffs
            )
            assert reg.models[uid].rho == clone.models[uid].rho
