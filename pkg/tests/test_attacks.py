import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from jointcert.attacks import (AttackConfig, fgsm_random_init, fosc, fosc_batch, fosc_from_grad,
                               fosc_values, loss_and_input_grad, pgd)
from jointcert.data_io import synthetic_blobs
from jointcert.errors import ContractError
from jointcert.network import Network, cross_entropy_per_example, forward, init_network, mlp
from jointcert.training import TrainConfig, train

from conftest import random_mlp


@pytest.fixture(scope="module")
def trained():
    """A small MLP trained on overlapping blobs, plus held-out points."""
    cfg = TrainConfig(T_nat=300, total_steps=0, batch_size=32, lr_schedule=[[0, 1e-2]],
                      model=[{"type": "affine", "out_dim": 16}, {"type": "relu"},
                             {"type": "affine", "out_dim": 2}])
    net = train(cfg, synthetic_blobs(200, 4, 3.0, 0)).net
    test = synthetic_blobs(100, 4, 3.0, 5)
    return net, test.images, test.labels


def losses(net, x, y):
    return cross_entropy_per_example(forward(net, x)[0], y)


class TestAttackConfig:
    def test_default_step(self):
        assert AttackConfig(0.2).step_size == pytest.approx(0.05)

    @pytest.mark.parametrize("kw", [dict(eps=-0.1), dict(eps=0.1, pgd_steps=0),
                                    dict(eps=0.1, pgd_step_size=0.0), dict(eps=0.1, fgsm_step_factor=-1)])
    def test_invalid(self, kw):
        with pytest.raises(ContractError):
            AttackConfig(**kw)


class TestInputGradient:
    def test_per_example_rows(self, rng):
        net = random_mlp(rng, in_dim=3)
        x = rng.uniform(size=(4, 3))
        y = rng.integers(0, net.num_classes, size=4)
        _, g, _ = loss_and_input_grad(net, x, y)
        for i in range(4):
            for j in range(3):
                e = np.zeros(3)
                e[j] = 1e-6
                num = (losses(net, (x[i] + e)[None], y[i:i + 1])[0]
                       - losses(net, (x[i] - e)[None], y[i:i + 1])[0]) / 2e-6
                assert num == pytest.approx(g[i, j], rel=1e-4, abs=1e-8)


class TestFGSM:
    def test_eps_zero_identity(self, rng):
        net = random_mlp(rng, in_dim=5)
        x = rng.uniform(size=(3, 5))
        assert np.array_equal(fgsm_random_init(net, x, [0, 1, 0], 0.0, rng), x)

    def test_zero_gradient_keeps_random_start(self):
        net = Network(mlp(4, [3], 2), (4,))            # all-zero params: zero input gradient
        x = np.full((6, 4), 0.5)
        a = fgsm_random_init(net, x, np.zeros(6, int), 0.1, np.random.default_rng(3))
        delta = np.random.default_rng(3).uniform(-0.1, 0.1, size=x.shape)
        np.testing.assert_allclose(a, np.clip(x + delta, 0, 1), atol=1e-15)

    def test_step_formula(self, rng):
        net = random_mlp(rng, in_dim=5)
        x, y = rng.uniform(size=(4, 5)), rng.integers(0, net.num_classes, size=4)
        a = fgsm_random_init(net, x, y, 0.08, np.random.default_rng(9))
        delta = np.random.default_rng(9).uniform(-0.08, 0.08, size=x.shape)
        _, g, _ = loss_and_input_grad(net, x + delta, y)
        expected = np.clip(x + np.clip(delta + 1.25 * 0.08 * np.sign(g), -0.08, 0.08), 0, 1)
        np.testing.assert_array_equal(a, expected)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.floats(0.0, 0.5))
    def test_in_ball_and_box(self, seed, eps):
        rng = np.random.default_rng(seed)
        net = random_mlp(rng)
        x = rng.uniform(size=(5,) + net.input_shape)
        a = fgsm_random_init(net, x, rng.integers(0, net.num_classes, 5), eps, rng)
        assert np.all(np.abs(a - x) <= eps + 1e-12) and np.all((a >= 0) & (a <= 1))

    def test_deterministic(self, rng):
        net = random_mlp(rng, in_dim=4)
        x = rng.uniform(size=(3, 4))
        a = fgsm_random_init(net, x, [0, 1, 1], 0.1, np.random.default_rng(5))
        b = fgsm_random_init(net, x, [0, 1, 1], 0.1, np.random.default_rng(5))
        assert a.tobytes() == b.tobytes()

    def test_increases_loss_on_trained_net(self, trained):
        net, x, y = trained
        wins = []
        for seed in range(5):
            a = fgsm_random_init(net, x, y, 0.05, np.random.default_rng(seed))
            wins.append(losses(net, a, y) >= losses(net, x, y))
        assert np.mean(wins) >= 0.7


class TestPGD:
    def test_one_step_from_center_is_fgsm(self, rng):
        net = random_mlp(rng, in_dim=6)
        x = rng.uniform(0.2, 0.8, size=(5, 6))
        y = rng.integers(0, net.num_classes, size=5)
        out = pgd(net, x, y, 0.1, 1, 0.1, None, random_start=False, include_clean=False)
        _, g, _ = loss_and_input_grad(net, x, y)
        fgsm = np.clip(x + 0.1 * np.sign(g), 0, 1)
        # the best of {start, fgsm point} is returned; it is the FGSM point unless FGSM lowers the loss
        step_better = (losses(net, fgsm, y) >= losses(net, x, y)) | (np.argmax(forward(net, fgsm)[0], 1) != y)
        np.testing.assert_array_equal(out[step_better], fgsm[step_better])

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.floats(0.0, 0.4), st.integers(1, 10))
    def test_projection_contract(self, seed, eps, steps):
        rng = np.random.default_rng(seed)
        net = random_mlp(rng)
        x = rng.uniform(size=(4,) + net.input_shape)
        a = pgd(net, x, rng.integers(0, net.num_classes, 4), eps, steps, None, rng)
        assert np.all(np.abs(a - x) <= eps + 1e-12) and np.all((a >= 0) & (a <= 1))

    def test_at_least_clean_loss(self, trained):
        net, x, y = trained
        a = pgd(net, x, y, 0.05, 5, None, np.random.default_rng(0))
        wrong_clean = np.argmax(forward(net, x)[0], 1) != y
        assert np.all(np.argmax(forward(net, a)[0], 1)[wrong_clean] != y[wrong_clean])
        still_right = np.argmax(forward(net, a)[0], 1) == y
        assert np.all(losses(net, a, y)[still_right] >= losses(net, x, y)[still_right])

    def test_stronger_than_fgsm(self, trained):
        net, x, y = trained
        a_pgd = pgd(net, x, y, 0.05, 40, None, np.random.default_rng(0))
        a_fgsm = fgsm_random_init(net, x, y, 0.05, np.random.default_rng(0))
        assert np.mean(losses(net, a_pgd, y) >= losses(net, a_fgsm, y)) >= 0.9

    def test_deterministic(self, trained):
        net, x, y = trained
        a = pgd(net, x, y, 0.05, 5, None, np.random.default_rng(1))
        b = pgd(net, x, y, 0.05, 5, None, np.random.default_rng(1))
        assert a.tobytes() == b.tobytes()

    def test_zero_steps_rejected(self, rng):
        with pytest.raises(ContractError):
            pgd(random_mlp(rng), np.zeros((1, 2)), [0], 0.1, 0, None, rng)


class TestFOSC:
    def test_maximizer_is_zero(self, rng):
        net = random_mlp(rng, in_dim=5)
        x, y, eps = rng.uniform(0.3, 0.7, size=5), 0, 0.01
        _, g, _ = loss_and_input_grad(net, x[None], [y])
        x_adv = x + eps * np.sign(g[0])
        _, g_adv, _ = loss_and_input_grad(net, x_adv[None], [y])
        assert np.array_equal(np.sign(g_adv), np.sign(g))   # sign constant over the step
        assert abs(fosc(net, x, x_adv, y, eps)) < 1e-9

    def test_center_is_eps_l1(self, rng):
        net = random_mlp(rng, in_dim=5)
        x = rng.uniform(size=5)
        _, g, _ = loss_and_input_grad(net, x[None], [1])
        assert fosc(net, x, x, 1, 0.2) == pytest.approx(0.2 * np.abs(g).sum(), rel=1e-14)

    @pytest.mark.parametrize("d", [1, 3, 6, 10])
    def test_corner_enumeration(self, rng, d):
        net = random_mlp(rng, in_dim=d)
        eps, y = 0.1, 0
        x = rng.uniform(0.2, 0.8, size=d)
        x_adv = x + rng.uniform(-eps, eps, size=d)
        _, g, _ = loss_and_input_grad(net, x_adv[None], [y])
        best = max(float((x + eps * np.array(s) - x_adv) @ g[0]) for s in itertools.product((-1, 1), repeat=d))
        assert abs(fosc(net, x, x_adv, y, eps) - best) < 1e-12

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.floats(0.0, 0.5))
    def test_non_negative(self, seed, eps):
        rng = np.random.default_rng(seed)
        net = random_mlp(rng)
        x = rng.uniform(size=(3,) + net.input_shape)
        x_adv = np.clip(x + rng.uniform(-eps, eps, size=x.shape), 0, 1)
        assert np.all(fosc_values(net, x, x_adv, rng.integers(0, net.num_classes, 3), eps) >= -1e-9)

    def test_outside_ball(self, rng):
        net = random_mlp(rng, in_dim=2)
        with pytest.raises(ContractError):
            fosc(net, np.array([0.5, 0.5]), np.array([0.5, 0.7]), 0, 0.1)

    def test_from_grad_formula(self):
        val = fosc_from_grad(np.zeros((1, 2)), np.array([[0.1, -0.05]]), np.array([[2.0, -1.0]]), 0.1)
        assert val[0] == pytest.approx(0.1 * 3 - (0.2 + 0.05))


class TestFOSCBatch:
    def test_batch_of_one(self, rng):
        net = random_mlp(rng, in_dim=4)
        x = rng.uniform(size=4)
        a = np.clip(x + 0.05, 0, 1)
        assert fosc_batch(net, x[None], a[None], [1], 0.1) == fosc(net, x, a, 1, 0.1)

    def test_mean_and_loop_oracle(self, rng):
        net = random_mlp(rng, in_dim=4)
        x = rng.uniform(size=(7, 4))
        a = np.clip(x + rng.uniform(-0.1, 0.1, size=x.shape), 0, 1)
        y = rng.integers(0, net.num_classes, size=7)
        singles = [fosc(net, x[i], a[i], y[i], 0.1) for i in range(7)]
        assert abs(fosc_batch(net, x, a, y, 0.1) - sum(singles) / 7) < 1e-12
        assert fosc_batch(net, x[:2], a[:2], y[:2], 0.1) == pytest.approx((singles[0] + singles[1]) / 2, abs=1e-15)

    def test_empty(self, rng):
        with pytest.raises(ContractError):
            fosc_batch(random_mlp(rng, in_dim=2), np.zeros((0, 2)), np.zeros((0, 2)), [], 0.1)

    def test_length_mismatch(self, rng):
        with pytest.raises(ContractError):
            fosc_batch(random_mlp(rng, in_dim=2), np.zeros((2, 2)), np.zeros((1, 2)), [0, 0], 0.1)
