import unittest
import itertools
import math
import sys
import os

import numpy as np
import torch
import torch.nn as nn

project_root = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
sys.path.insert(0, project_root)

from src.config import RunConfig
from src.context_decoder import DistributionDecoder, DistributionDecoderCfg
from src.corruption import (
    build_linear_schedule,
    build_mask_replace_transitions,
    forward_sample_continuous,
    sample_tokens,
)
from src.dataset import load_dataset
from src.denoiser import PointPrediction, time_embedding
from src.diffusion_core import (
    ContextDiffusionModel,
    TrainRng,
    assemble_psi_outputs,
    build_model,
    build_process,
    context_continuous_loss,
    context_discrete_loss,
    context_head_config,
    context_loss,
    context_sets,
    discrete_kl_terms,
    fuzz_upper_bound,
    init_train_state,
    lambda_schedule,
    model_psi_outputs,
    train_step,
    verify_upper_bound,
)
from src.errors import DivergenceError, ShapeError
from src.neighborhood import stride_offsets
from src.set_losses import brute_force_w2


def tiny_config(**sections):
    data = {
        'seed': 0,
        'schedule': {'T': 10, 'beta_end': 0.2, 'discrete_T': 5},
        'model': {'base_channels': 8, 'channel_mults': [1, 2], 'time_dim': 16, 'num_tokens': 4, 'token_dim': 4},
        'context': {'stride': 1, 'q': 3, 'hidden': [16, 16]},
        'data': {'n': 16, 'size': 8, 'batch_size': 4},
        'train': {'steps': 2, 'lr': 1e-3},
        'inpaint': {'T': 10, 'r': 2, 'j': 2},
        'eval': {'n_samples': 8},
    }
    for section, values in sections.items():
        if isinstance(values, dict):
            data.setdefault(section, {}).update(values)
        else:
            data[section] = values
    return RunConfig.from_dict(data)


def enumerated_posterior(Q, x0, xt, t):
    """q(x_{t-1} | x_t, x_0) from explicit path sums, or None when x_t is unreachable."""
    n = Q.shape[1]
    prior = [0.0] * n
    for path in itertools.product(range(n), repeat=t - 1):
        p, state = 1.0, x0
        for step, nxt in enumerate(path):
            p *= Q[step][state, nxt]
            state = nxt
        prior[state] += p
    joint = [prior[k] * Q[t - 1][k, xt] for k in range(n)]
    z = sum(joint)
    return None if z <= 0 else [v / z for v in joint]


def enumerated_kl(Q, x0, xt, t, x0_probs):
    """KL between the true posterior and the x0_probs mixture, by summing over states."""
    true_post = enumerated_posterior(Q, x0, xt, t)
    n = Q.shape[1]
    mixture = [0.0] * n
    for candidate, weight in enumerate(x0_probs):
        post = enumerated_posterior(Q, candidate, xt, t)
        if post is not None:
            mixture = [m + weight * v for m, v in zip(mixture, post)]
    total = sum(mixture)
    mixture = [m / total for m in mixture]
    return sum(p * math.log(p / m) for p, m in zip(true_post, mixture) if p > 0)


class TinyDenoiser(nn.Module):
    """Few-parameter continuous stand-in for the U-Net."""

    def __init__(self, time_dim=4):
        super().__init__()
        self.cfg = type('Cfg', (), {'mode': 'continuous'})()
        self.time_dim = time_dim
        self.conv = nn.Conv2d(1, 4, 3, padding=1)
        self.final_conv = nn.Conv2d(4, 1, 1)

    def forward(self, xt, t):
        tap = torch.tanh(self.conv(xt))
        t_emb = time_embedding(t, self.time_dim).to(xt.dtype)
        return PointPrediction(primary=self.final_conv(tap), tap=tap, t_emb=t_emb)


class TestLossAssembly(unittest.TestCase):

    def setUp(self):
        """Set up a tiny continuous model in float64"""
        self.cfg = tiny_config()
        self.model = build_model(self.cfg).double()
        self.schedule = build_linear_schedule(10, 1e-4, 0.2)
        self.x0 = torch.rand(2, 1, 8, 8, generator=torch.Generator().manual_seed(0), dtype=torch.float64) * 2 - 1

    def test_01_total_is_point_plus_weighted_context(self):
        """Test total = point + lambda * context"""
        print("Testing loss breakdown...")

        breakdown = context_continuous_loss(self.model, self.schedule, self.x0, torch.tensor([3, 7]),
                                               TrainRng.from_seed(0), self.cfg)
        point, context, total = (float(breakdown.point_term), float(breakdown.context_term), float(breakdown.total))
        self.assertGreater(context, 0.0)
        self.assertAlmostEqual(breakdown.lambda_t, 0.5, places=12)
        self.assertAlmostEqual(total, point + breakdown.lambda_t * context, delta=1e-9 * max(1.0, total))
        self.assertEqual(tuple(breakdown.per_position.shape), (2, 64))
        self.assertEqual(set(breakdown.as_record()), {'point_term', 'context_term', 'lambda_t', 'total'})

        print("✅ Loss breakdown test passed")

    def test_02_context_term_matches_brute_force(self):
        """Test the per-position context cost is the optimal matching cost"""
        print("Testing context term against brute force...")

        rng = TrainRng.from_seed(5)
        t = torch.tensor([4, 4])
        xt = forward_sample_continuous(self.schedule, self.x0, t, torch.zeros_like(self.x0))
        pred = self.model.denoiser(xt, t)
        targets, preds = context_sets(self.model, pred, self.x0, rng, self.cfg)
        self.assertEqual(tuple(targets.shape), (128, 3, 1))
        self.assertEqual(tuple(preds.shape), (128, 3, 1))

        replay = TrainRng.from_seed(5)
        breakdown_rng = TrainRng(diffusion=torch.Generator().manual_seed(0), context=replay.context)
        per_image, per_position = context_loss(self.model, pred, self.x0, breakdown_rng, self.cfg)
        flat = per_position.reshape(-1)
        for n in range(0, 128, 9):
            self.assertAlmostEqual(float(flat[n]), brute_force_w2(targets[n], preds[n]).value, delta=1e-9)
        self.assertTrue(torch.allclose(per_image, per_position.sum(1)))

        print("✅ Context term brute force test passed")

    def test_03_lambda_schedule(self):
        """Test constant and linear context weights"""
        print("Testing lambda schedule...")

        self.assertEqual(lambda_schedule(1, self.cfg), 0.5)
        self.assertEqual(lambda_schedule(10, self.cfg), 0.5)

        linear = tiny_config(context={'lambda_mode': 'linear', 'lambda_start': 1.0, 'lambda_end': 0.0})
        self.assertAlmostEqual(lambda_schedule(1, linear), 1.0)
        self.assertAlmostEqual(lambda_schedule(10, linear), 0.0)
        self.assertAlmostEqual(lambda_schedule(4, linear), 2.0 / 3.0)
        self.assertAlmostEqual(lambda_schedule(3, linear, T=5), 0.5)

        print("✅ Lambda schedule test passed")

    def test_04_zero_lambda_skips_the_head(self):
        """Test a zero weight never evaluates the context head"""
        print("Testing zero lambda...")

        cfg = tiny_config(context={'lambda_value': 0.0})
        model = build_model(cfg).double()
        breakdown = context_continuous_loss(model, self.schedule, self.x0, 5, TrainRng.from_seed(0), cfg)
        self.assertEqual(float(breakdown.context_term), 0.0)
        self.assertEqual(float(breakdown.total), float(breakdown.point_term))
        self.assertEqual(model.context_head.calls, 0)

        print("✅ Zero lambda test passed")

    def test_05_mu_point_loss(self):
        """Test the mean-matching point loss rescales the x0 loss per timestep"""
        print("Testing mu point loss...")

        simple = context_continuous_loss(self.model, self.schedule, self.x0, 6, TrainRng.from_seed(1), self.cfg)
        mu_cfg = tiny_config(train={'point_loss': 'mu'})
        mu = context_continuous_loss(self.model, self.schedule, self.x0, 6, TrainRng.from_seed(1), mu_cfg)
        ab_prev, ab = self.schedule.alpha_bar[4], self.schedule.alpha_bar[5]
        c0 = np.sqrt(ab_prev) * self.schedule.beta[5] / (1 - ab)
        weight = c0 ** 2 / (2 * self.schedule.sigma2[5])
        self.assertAlmostEqual(float(mu.point_term), float(simple.point_term) * weight,
                               delta=1e-9 * max(1.0, float(mu.point_term)))

        print("✅ Mu point loss test passed")


class TestDiscreteObjective(unittest.TestCase):

    def setUp(self):
        """Set up a small mask-and-replace chain"""
        self.transitions = build_mask_replace_transitions(4, 5)
        self.x0 = torch.randint(4, (2, 4, 4), generator=torch.Generator().manual_seed(0))

    def test_01_kl_zero_for_exact_prediction(self):
        """Test the KL vanishes when the model puts all mass on the true x0"""
        print("Testing exact discrete prediction...")

        t = torch.tensor([2, 5])
        xt = sample_tokens(self.transitions, self.x0, t, torch.Generator().manual_seed(1))
        exact = torch.nn.functional.one_hot(self.x0, 4).permute(0, 3, 1, 2).double()
        kl = discrete_kl_terms(self.transitions, self.x0, xt, exact, t)
        self.assertTrue(torch.allclose(kl, torch.zeros_like(kl), atol=1e-12))

        noisy = torch.softmax(torch.randn(2, 4, 4, 4, generator=torch.Generator().manual_seed(2),
                                          dtype=torch.float64), dim=1)
        self.assertTrue(bool((discrete_kl_terms(self.transitions, self.x0, xt, noisy, t) >= -1e-12).all()))

        print("✅ Exact discrete prediction test passed")

    def test_02_first_step_is_negative_log_likelihood(self):
        """Test at t = 1 from a fully masked map the KL equals -log p(x0)"""
        print("Testing first-step KL...")

        xt = torch.full_like(self.x0, 4)
        t = torch.tensor([1, 1])
        probs = torch.softmax(torch.randn(2, 4, 4, 4, generator=torch.Generator().manual_seed(3),
                                          dtype=torch.float64), dim=1)
        kl = discrete_kl_terms(self.transitions, self.x0, xt, probs, t)
        expected = -torch.log(torch.gather(probs, 1, self.x0.unsqueeze(1)).squeeze(1))
        self.assertTrue(torch.allclose(kl, expected, atol=1e-10))

        print("✅ First-step KL test passed")

    def test_03_discrete_loss_with_context(self):
        """Test the discrete objective trains the head on token embeddings"""
        print("Testing discrete objective...")

        cfg = tiny_config(mode='discrete')
        model = build_model(cfg)
        breakdown = context_discrete_loss(model, self.transitions, self.x0, torch.tensor([2, 4]),
                                             TrainRng.from_seed(0), cfg)
        self.assertTrue(np.isfinite(float(breakdown.total)))
        self.assertGreater(float(breakdown.context_term), 0.0)
        breakdown.total.backward()
        self.assertIsNotNone(model.context_head.fnn_mu.weight.grad)
        self.assertEqual(context_head_config(cfg).d, 4)

        print("✅ Discrete objective test passed")

    def test_04_kl_matches_state_enumeration(self):
        """Test the KL against explicit sums over every path and state on a K = 3, 2x2 map"""
        print("Testing discrete KL against enumeration...")

        K, T = 3, 4
        transitions = build_mask_replace_transitions(K, T)
        x0 = torch.tensor([[[0, 1], [2, 1]]])
        probs = torch.softmax(torch.randn(1, K, 2, 2, generator=torch.Generator().manual_seed(4),
                                          dtype=torch.float64), dim=1)

        for t in range(1, T + 1):
            for xt in (torch.tensor([[[3, 1], [0, 3]]]), torch.tensor([[[0, 3], [2, 2]]])):
                kl = discrete_kl_terms(transitions, x0, xt, probs, torch.tensor([t]))
                for y in range(2):
                    for x in range(2):
                        expected = enumerated_kl(transitions.Q, int(x0[0, y, x]), int(xt[0, y, x]), t,
                                                 probs[0, :, y, x].tolist())
                        self.assertAlmostEqual(float(kl[0, y, x]), expected, delta=1e-9)

        print("✅ Discrete KL enumeration test passed")

    def test_05_discrete_loss_matches_enumeration(self):
        """Test the discrete point term equals the enumerated KL summed over the map"""
        print("Testing discrete loss against enumeration...")

        cfg = tiny_config(mode='discrete', schedule={'discrete_T': 4}, model={'num_tokens': 3},
                          context={'stride': 0}, data={'size': 4})
        model = build_model(cfg).double()
        transitions = build_process(cfg)
        x0 = torch.tensor([[[0, 1], [2, 1]]])

        for t in range(1, 5):
            breakdown = context_discrete_loss(model, transitions, x0, t, TrainRng.from_seed(t), cfg)
            replay = TrainRng.from_seed(t)
            xt = sample_tokens(transitions, x0, torch.tensor([t]), replay.diffusion)
            with torch.no_grad():
                probs = model.denoiser(xt, torch.tensor([t])).primary
            expected = sum(
                enumerated_kl(transitions.Q, int(x0[0, y, x]), int(xt[0, y, x]), t, probs[0, :, y, x].tolist())
                for y in range(2) for x in range(2)
            )
            self.assertAlmostEqual(float(breakdown.point_term), expected, delta=1e-9)
            self.assertEqual(float(breakdown.context_term), 0.0)

        print("✅ Discrete loss enumeration test passed")


class TestUpperBound(unittest.TestCase):

    def test_01_fuzzed_bound_holds(self):
        """Test random inputs never violate the mean-pooling bound"""
        print("Testing bound on fuzzed inputs...")

        summary = fuzz_upper_bound(10_000, seed=0)
        self.assertEqual(summary['cases'], 10_000)
        self.assertEqual(summary['violations'], 0)
        self.assertGreaterEqual(summary['min_slack'], -1e-9)
        self.assertLess(summary['max_equality_gap'], 1e-9)

        print("✅ Fuzzed bound test passed")

    def test_02_equality_case(self):
        """Test the bound is tight when every slot predicts the same value"""
        print("Testing bound equality...")

        generator = torch.Generator().manual_seed(1)
        x0 = torch.randn(3, 4, 2, generator=generator, dtype=torch.float64)
        shared = torch.randn(3, 4, 1, 2, generator=generator, dtype=torch.float64)
        check = verify_upper_bound(x0, shared.expand(-1, -1, 9, -1))
        self.assertTrue(check.holds)
        self.assertAlmostEqual(check.lhs, check.rhs, delta=1e-9)

        with self.assertRaises(ShapeError):
            verify_upper_bound(x0, torch.zeros(3, 4, 9, 3, dtype=torch.float64))

        print("✅ Bound equality test passed")

    def test_03_psi_assembly(self):
        """Test slot k of a unit holds the prediction made by the neighbor at offset -k"""
        print("Testing Psi assembly...")

        index = stride_offsets(1)
        generator = torch.Generator().manual_seed(2)
        point = torch.randn(6, 6, 2, generator=generator)
        neighbor_preds = torch.randn(6, 6, 8, 2, generator=generator)
        psi = assemble_psi_outputs(point, neighbor_preds, index)
        self.assertEqual(tuple(psi.shape), (6, 6, 9, 2))
        self.assertTrue(torch.equal(psi[:, :, 0], point))
        for k, (dy, dx) in enumerate(index.offsets):
            self.assertTrue(torch.equal(psi[3, 3, k + 1], neighbor_preds[3 - dy, 3 - dx, k]))

        print("✅ Psi assembly test passed")

    def test_04_model_psi_outputs(self):
        """Test the bound holds on a model's own predictions"""
        print("Testing bound on model outputs...")

        for decoder in ('feature', 'distribution'):
            cfg = tiny_config(context={'decoder': decoder})
            model = build_model(cfg).double()
            schedule = build_linear_schedule(10, 1e-4, 0.2)
            x0 = torch.rand(1, 8, 8, generator=torch.Generator().manual_seed(0), dtype=torch.float64) * 2 - 1
            psi = model_psi_outputs(model, schedule, x0, 5, torch.zeros_like(x0))
            self.assertEqual(tuple(psi.shape), (8, 8, 9, 1))
            self.assertTrue(verify_upper_bound(x0.permute(1, 2, 0), psi).holds)

        print("✅ Model bound test passed")


class TestGradients(unittest.TestCase):

    def setUp(self):
        """Set up a model with fewer than a thousand parameters"""
        torch.manual_seed(0)
        self.cfg = tiny_config(context={'q': 2, 'lambda_value': 0.5, 'hidden': [8, 8]})
        head = DistributionDecoder(DistributionDecoderCfg(in_dim=4, d=1, hidden=(8, 8), time_dim=4))
        self.model = ContextDiffusionModel(TinyDenoiser(), head, stride_offsets(1)).double()
        self.schedule = build_linear_schedule(10, 1e-4, 0.2)

    def _loss(self, x0, t):
        return context_continuous_loss(self.model, self.schedule, x0, t, TrainRng.from_seed(3), self.cfg).total

    def _assignment_gap(self, x0, t):
        """Smallest margin between the best and second-best matching over all positions."""
        rng = TrainRng.from_seed(3)
        t_batch = torch.tensor([t])
        noise = torch.randn(x0.shape, generator=rng.diffusion, dtype=x0.dtype)
        xt = forward_sample_continuous(self.schedule, x0, t_batch, noise)
        with torch.no_grad():
            pred = self.model.denoiser(xt, t_batch)
            targets, preds = context_sets(self.model, pred, x0, rng, self.cfg)
        q = targets.shape[1]
        costs = torch.stack([((targets - preds[:, list(perm)]) ** 2).sum(dim=(1, 2))
                             for perm in itertools.permutations(range(q))], dim=1)
        ordered = costs.sort(dim=1).values
        return float((ordered[:, 1] - ordered[:, 0]).min())

    def test_01_finite_differences(self):
        """Test autograd against central differences on the combined objective"""
        print("Testing gradients against finite differences...")

        params = [p for p in self.model.parameters()]
        self.assertLessEqual(sum(p.numel() for p in params), 1000)
        rng = np.random.default_rng(0)
        eps = 1e-6

        # only points whose optimal matching is unique by a clear margin
        points = []
        for seed in range(200):
            x0 = torch.rand(1, 1, 4, 4, generator=torch.Generator().manual_seed(seed), dtype=torch.float64) * 2 - 1
            t = int(rng.integers(1, 11))
            if self._assignment_gap(x0, t) > 1e-3:
                points.append((x0, t))
            if len(points) == 20:
                break
        self.assertEqual(len(points), 20)

        for x0, t in points:
            self.model.zero_grad()
            self._loss(x0, t).backward()

            for _ in range(5):
                p = params[int(rng.integers(len(params)))]
                i = int(rng.integers(p.numel()))
                analytic = float(p.grad.reshape(-1)[i])
                with torch.no_grad():
                    p.view(-1)[i] += eps
                    plus = float(self._loss(x0, t))
                    p.view(-1)[i] -= 2 * eps
                    minus = float(self._loss(x0, t))
                    p.view(-1)[i] += eps
                numeric = (plus - minus) / (2 * eps)
                tolerance = 1e-4 * max(abs(analytic), abs(numeric)) + 1e-7
                self.assertLessEqual(abs(analytic - numeric), tolerance)

        print("✅ Finite difference test passed")


class TestTrainStep(unittest.TestCase):

    def setUp(self):
        """Set up a fixed batch"""
        self.batch = torch.rand(4, 1, 8, 8, generator=torch.Generator().manual_seed(0)) * 2 - 1

    def _train(self, cfg, steps=3):
        state = init_train_state(cfg)
        for _ in range(steps):
            state, _ = train_step(state, self.batch, cfg)
        return state

    def test_01_zero_lambda_equals_plain_backbone(self):
        """Test lambda = 0 with a head trains the denoiser exactly like stride 0"""
        print("Testing zero lambda against the plain backbone...")

        with_head = self._train(tiny_config(context={'lambda_value': 0.0}))
        plain = self._train(tiny_config(context={'stride': 0}))
        self.assertIsNone(plain.model.context_head)
        for a, b in zip(with_head.model.denoiser.parameters(), plain.model.denoiser.parameters()):
            self.assertTrue(torch.equal(a, b))

        print("✅ Zero lambda plain backbone test passed")

    def test_02_step_updates_parameters(self):
        """Test a step changes the weights and increments the counter"""
        print("Testing train step...")

        cfg = tiny_config()
        state = init_train_state(cfg)
        before = [p.detach().clone() for p in state.model.parameters()]
        state, breakdown = train_step(state, self.batch, cfg)
        self.assertEqual(state.step, 1)
        self.assertTrue(any(not torch.equal(a, b) for a, b in zip(before, state.model.parameters())))
        self.assertTrue(np.isfinite(float(breakdown.total)))

        print("✅ Train step test passed")

    def test_03_divergence_leaves_state_untouched(self):
        """Test a diverging loss raises before the optimizer runs"""
        print("Testing divergence guard...")

        cfg = tiny_config(train={'divergence_threshold': 1e-12})
        state = init_train_state(cfg)
        before = [p.detach().clone() for p in state.model.parameters()]
        with self.assertRaises(DivergenceError):
            train_step(state, self.batch, cfg)
        self.assertEqual(state.step, 0)
        for a, b in zip(before, state.model.parameters()):
            self.assertTrue(torch.equal(a, b))

        print("✅ Divergence guard test passed")

    def test_04_head_does_not_change_denoiser_init(self):
        """Test the denoiser initialization is independent of the head"""
        print("Testing denoiser initialization...")

        a = build_model(tiny_config(context={'stride': 0}))
        b = build_model(tiny_config(context={'stride': 3, 'decoder': 'feature'}))
        for p, q in zip(a.denoiser.parameters(), b.denoiser.parameters()):
            self.assertTrue(torch.equal(p, q))
        self.assertEqual(b.neighbor_index.count, 48)

        print("✅ Denoiser initialization test passed")

    def test_05_zero_learning_rate_keeps_parameters(self):
        """Test a step with lr = 0 leaves every parameter bit-identical"""
        print("Testing zero learning rate...")

        cfg = tiny_config(train={'lr': 0.0})
        state = init_train_state(cfg)
        before = {k: v.clone() for k, v in state.model.state_dict().items()}
        state, breakdown = train_step(state, self.batch, cfg)
        self.assertEqual(state.step, 1)
        self.assertGreater(float(breakdown.total), 0.0)
        after = state.model.state_dict()
        self.assertEqual(set(before), set(after))
        for key, value in before.items():
            self.assertTrue(torch.equal(value, after[key]), key)

        print("✅ Zero learning rate test passed")

    def test_06_loss_falls_on_a_frozen_batch(self):
        """Test 200 steps on one fixed batch of blobs lower the combined loss"""
        print("Testing loss trend on a frozen batch...")

        cfg = tiny_config()
        batch = load_dataset(cfg.data, seed=0).batch_for_step(0)
        state = init_train_state(cfg)
        totals, context_terms = [], []
        for _ in range(200):
            state, breakdown = train_step(state, batch, cfg)
            totals.append(float(breakdown.total))
            context_terms.append(float(breakdown.context_term))

        self.assertLess(np.mean(totals[-20:]), 0.5 * np.mean(totals[:20]))
        self.assertLess(np.mean(context_terms[-20:]), np.mean(context_terms[:20]))

        print("✅ Frozen batch loss trend test passed")


def run_tests():
    """Run all tests"""
    unittest.main(argv=[''], exit=False, verbosity=2)


if __name__ == "__main__":
    run_tests()
