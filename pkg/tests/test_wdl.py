import numpy as np
import pytest

from uotdl import _engine
from uotdl.barycenter import BarycenterConfig, barycenter_batch
from uotdl.wdl import (
    AdamParams,
    AdamState,
    TrainConfig,
    adam_step,
    gradients,
    init_state,
    load_checkpoint,
    reconstruct,
    reconstruction_loss,
    save_checkpoint,
    softmax_rows,
    train,
)

from oracles import central_difference


def small_cost(d, seed=0, scale=2.0):
    rng = np.random.default_rng(seed)
    grid = np.sort(rng.uniform(0, 1, d))
    C = (grid[:, None] - grid[None, :]) ** 2
    return C * (scale / C.max())


def make_cfg(d, k, L=5, tau=1.0, eps=0.1, seed=0, **kw):
    return TrainConfig(
        barycenter=BarycenterConfig(
            epsilon=eps, tau=tau, cost=small_cost(d, seed), inner_iters=L
        ),
        atoms=k,
        seed=seed,
        **kw,
    )


class TestInitState:
    def test_k_equals_n_is_permutation(self):
        rng = np.random.default_rng(0)
        X = rng.uniform(0.1, 1.0, (5, 7))
        D, _ = init_state(X, 5, seed=3)
        # atoms are the inputs up to the 1e-6 jitter, in some order
        dist = np.abs(D[:, None, :] - X[None, :, :]).max(axis=2)
        matched = (dist < 1e-5).any(axis=1)
        assert matched.all()
        assert len({int(dist[i].argmin()) for i in range(5)}) == 5

    def test_deterministic(self):
        X = np.random.default_rng(1).uniform(0.1, 1.0, (6, 4))
        a = init_state(X, 3, seed=9)
        b = init_state(X, 3, seed=9)
        np.testing.assert_array_equal(a[0], b[0])
        np.testing.assert_array_equal(a[1], b[1])

    def test_k_too_large(self):
        with pytest.raises(ValueError):
            init_state(np.ones((2, 3)), 3, seed=0)


class TestReconstructionLoss:
    def test_zero_at_equality(self):
        X = np.random.default_rng(2).uniform(0.1, 1, (3, 4))
        for kind in ("quadratic", "tv", "kl"):
            assert reconstruction_loss(X, X, kind) == pytest.approx(0.0, abs=1e-12)

    def test_all_ones_difference(self):
        X = np.full((2, 3), 2.0)
        P = X + 1.0
        assert reconstruction_loss(P, X, "quadratic") == pytest.approx(6.0)
        assert reconstruction_loss(P, X, "tv") == pytest.approx(6.0)

    def test_matches_summation_oracle(self):
        rng = np.random.default_rng(3)
        P = rng.uniform(0.1, 1, (3, 4))
        X = rng.uniform(0.1, 1, (3, 4))
        quad = sum((P[i, j] - X[i, j]) ** 2 for i in range(3) for j in range(4))
        tv = sum(abs(P[i, j] - X[i, j]) for i in range(3) for j in range(4))
        kl = sum(
            X[i, j] * np.log(X[i, j] / P[i, j]) - X[i, j] + P[i, j]
            for i in range(3)
            for j in range(4)
        )
        assert reconstruction_loss(P, X, "quadratic") == pytest.approx(quad, abs=1e-12)
        assert reconstruction_loss(P, X, "tv") == pytest.approx(tv, abs=1e-12)
        assert reconstruction_loss(P, X, "kl") == pytest.approx(kl, abs=1e-12)

    def test_kl_infinite_on_dead_support(self):
        X = np.array([[1.0, 0.5]])
        P = np.array([[0.0, 0.5]])
        assert reconstruction_loss(P, X, "kl") == np.inf


class TestGradients:
    def fd_check(self, cfg, n=2, d=4, k=2, seed=0, rtol=1e-4):
        rng = np.random.default_rng(seed)
        X = rng.uniform(0.05, 1.0, (n, d)) * 1e-2
        D = np.maximum(rng.uniform(0.05, 1.0, (k, d)) * 1e-2, cfg.floor)
        Z = rng.standard_normal((n, k))
        _, dD, dZ = gradients(D, Z, X, cfg)

        def loss_of_D(Dv):
            val, _, _ = gradients(Dv, Z, X, cfg)
            return val

        def loss_of_Z(Zv):
            val, _, _ = gradients(D, Zv, X, cfg)
            return val

        fd_D = central_difference(loss_of_D, D.copy(), h=1e-7)
        fd_Z = central_difference(loss_of_Z, Z.copy(), h=1e-6)
        for got, ref in ((dD, fd_D), (dZ, fd_Z)):
            mask = np.abs(got) > 1e-8
            if np.any(mask):
                rel = np.abs(got[mask] - ref[mask]) / np.abs(got[mask])
                assert rel.max() < rtol, f"max rel {rel.max():.2e}"

    def test_finite_difference_agreement_many_instances(self):
        # >= 20 random instances across tau/eps stiffness regimes
        combos = [(1.0, 0.1), (1.0, 0.05), (5.0, 0.1), (0.5, 0.2)]
        count = 0
        for tau, eps in combos:
            for seed in range(5):
                cfg = make_cfg(4, 2, L=5, tau=tau, eps=eps, seed=seed)
                self.fd_check(cfg, seed=seed)
                count += 1
        assert count >= 20

    def test_balanced_mode_finite_differences(self):
        cfg = make_cfg(4, 2, L=5, tau=1.0, eps=0.1, mode="balanced")
        self.fd_check(cfg, seed=11)

    def test_single_atom_logits_gradient_zero(self):
        cfg = make_cfg(4, 1, L=5)
        rng = np.random.default_rng(5)
        X = rng.uniform(0.05, 1.0, (3, 4))
        D = rng.uniform(0.05, 1.0, (1, 4))
        Z = rng.standard_normal((3, 1))
        _, _, dZ = gradients(D, Z, X, cfg)
        np.testing.assert_allclose(dZ, 0.0, atol=1e-14)

    def test_perfect_reconstruction_has_tiny_gradient(self):
        cfg = make_cfg(5, 2, L=6)
        rng = np.random.default_rng(6)
        D = rng.uniform(0.1, 1.0, (2, 5))
        Z = rng.standard_normal((4, 2))
        X = reconstruct(D, Z, cfg)
        loss, dD, dZ = gradients(D, Z, X, cfg)
        assert loss == pytest.approx(0.0, abs=1e-20)
        assert np.abs(dD).max() < 1e-9
        assert np.abs(dZ).max() < 1e-9
        # one tiny step cannot increase the loss away from a minimum
        opt = AdamState.zeros(2, 5, 4)
        D2, Z2 = adam_step(D.copy(), Z.copy(), dD, dZ, opt, 1e-6, AdamParams())
        loss2, _, _ = gradients(D2, Z2, X, cfg)
        assert loss2 <= loss + 1e-12

    def test_forward_matches_barycenter_batch(self):
        cfg = make_cfg(6, 3, L=40, tau=1.0, eps=0.08)
        rng = np.random.default_rng(7)
        D = rng.uniform(0.05, 1.0, (3, 6))
        Lam = rng.dirichlet(np.ones(3), size=5)
        P, _ = _engine.forward(
            D, Lam, cfg.barycenter.kernel(), 1.0, 0.08, 40, balanced=False
        )
        ref = barycenter_batch(D, Lam, cfg.barycenter)
        np.testing.assert_allclose(P, ref, rtol=1e-9, atol=1e-12)

    def test_f32_engine_matches_f64(self):
        cfg64 = make_cfg(12, 3, L=8, tau=5.0, eps=0.1)
        cfg32 = make_cfg(12, 3, L=8, tau=5.0, eps=0.1, engine="f32")
        rng = np.random.default_rng(8)
        X = rng.uniform(0.05, 1.0, (6, 12))
        D = rng.uniform(0.05, 1.0, (3, 12))
        Z = rng.standard_normal((6, 3))
        l64, dD64, dZ64 = gradients(D, Z, X, cfg64)
        l32, dD32, dZ32 = gradients(D, Z, X, cfg32)
        assert l32 == pytest.approx(l64, rel=1e-4)
        np.testing.assert_allclose(dD32, dD64, rtol=2e-2, atol=1e-6)
        np.testing.assert_allclose(dZ32, dZ64, rtol=2e-2, atol=1e-6)


class TestAdamStep:
    def test_zero_gradients_fresh_state_no_move(self):
        D = np.full((2, 3), 0.5)
        Z = np.zeros((2, 2))
        opt = AdamState.zeros(2, 3, 2)
        D2, Z2 = adam_step(
            D.copy(), Z.copy(), np.zeros((2, 3)), np.zeros((2, 2)), opt, 0.1, AdamParams()
        )
        np.testing.assert_array_equal(D2, D)
        np.testing.assert_array_equal(Z2, Z)

    def test_first_step_closed_form(self):
        g = 0.37
        D = np.array([[1.0]])
        opt = AdamState.zeros(1, 1, 1)
        params = AdamParams()
        D2, _ = adam_step(
            D.copy(), np.zeros((1, 1)), np.array([[g]]), np.zeros((1, 1)), opt, 0.01, params
        )
        expected = 1.0 - 0.01 * g / (abs(g) + params.eps)
        assert D2[0, 0] == pytest.approx(expected, rel=1e-9)

    def test_negative_atom_clamped_to_floor(self):
        D = np.array([[1e-14]])
        opt = AdamState.zeros(1, 1, 1)
        D2, _ = adam_step(
            D, np.zeros((1, 1)), np.array([[1.0]]), np.zeros((1, 1)), opt, 0.5, AdamParams()
        )
        assert D2[0, 0] == 1e-15


class TestTrain:
    def spike_data(self, k=3, reps=4, d=12, seed=0, sigma=0.08):
        # one concentrated bump per class, near-constant mass so a single
        # atom can represent every row of its class
        rng = np.random.default_rng(seed)
        grid = np.linspace(0, 1, d)
        rows = []
        for i in range(k):
            center = (i + 0.5) / k
            base = np.exp(-((grid - center) ** 2) / (2 * sigma**2)) + 1e-4
            for _ in range(reps):
                rows.append(base * rng.uniform(0.85, 1.0))
        return np.array(rows)

    def test_separable_fixture_loss_drops(self):
        X = self.spike_data()
        grid = np.linspace(0, 1, 12)
        C = (grid[:, None] - grid[None, :]) ** 2
        C *= 2.0 / C.max()
        cfg = TrainConfig(
            barycenter=BarycenterConfig(epsilon=0.02, tau=10.0, cost=C, inner_iters=10),
            atoms=3,
            seed=0,
            iterations=200,
            learning_rate=0.05,
        )
        result = train(X, cfg)
        assert result.loss_trace[-1] < 0.1 * result.loss_trace[0]

    def test_loss_trend_decreases(self):
        rng = np.random.default_rng(4)
        X = rng.uniform(0.05, 1.0, (8, 10))
        cfg = make_cfg(10, 3, L=6, tau=1.0, eps=0.1, iterations=120, learning_rate=0.03)
        result = train(X, cfg)
        head = result.loss_trace[:12].mean()
        tail = result.loss_trace[-12:].mean()
        assert tail < head
        assert np.all(np.isfinite(result.loss_trace))

    def test_invariants_after_training(self):
        X = self.spike_data(seed=5)
        cfg = make_cfg(12, 3, L=6, iterations=40)
        result = train(X, cfg)
        assert result.dictionary.min() >= 1e-15
        np.testing.assert_allclose(result.weights.sum(axis=1), 1.0, atol=1e-9)

    def test_deterministic(self):
        X = self.spike_data(seed=6)
        cfg = make_cfg(12, 3, L=6, iterations=25)
        a = train(X, cfg)
        b = train(X, cfg)
        np.testing.assert_array_equal(a.dictionary, b.dictionary)
        np.testing.assert_array_equal(a.weights, b.weights)
        np.testing.assert_array_equal(a.loss_trace, b.loss_trace)

    def test_zero_iterations_rejected(self):
        with pytest.raises(ValueError):
            make_cfg(4, 2, iterations=0)

    def test_checkpoint_round_trip(self, tmp_path):
        X = self.spike_data(seed=7)
        cfg = make_cfg(12, 3, L=6, iterations=10)
        result = train(X, cfg)
        opt = AdamState.zeros(3, 12, X.shape[0])
        opt.step = 10
        path = tmp_path / "state.uwdl"
        save_checkpoint(path, result.dictionary, result.logits, opt, cfg)
        D, Z, opt2, header = load_checkpoint(path)
        np.testing.assert_array_equal(D, result.dictionary)
        np.testing.assert_array_equal(Z, result.logits)
        assert opt2.step == 10
        assert header["config"]["tau"] == cfg.barycenter.tau

    def test_softmax_rows(self):
        Z = np.array([[1000.0, 1000.0], [0.0, -50.0]])
        lam = softmax_rows(Z)
        np.testing.assert_allclose(lam.sum(axis=1), 1.0)
        assert lam.min() > 0
