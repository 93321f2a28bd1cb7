import unittest
import itertools
import sys
import os

import numpy as np
import torch

project_root = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
sys.path.insert(0, project_root)

from src.corruption import (
    TokenMap,
    build_linear_schedule,
    build_mask_replace_transitions,
    discrete_posterior,
    forward_sample_continuous,
    forward_sample_discrete,
    forward_step_continuous,
    posterior_given_x0_probs,
    posterior_mean_continuous,
    respace_schedule,
    sample_tokens,
)
from src.errors import InconsistencyError, ParameterError, ScheduleError, ShapeError


class TestContinuousSchedule(unittest.TestCase):

    def setUp(self):
        """Set up a short schedule with large steps"""
        self.schedule = build_linear_schedule(10, beta_start=1e-2, beta_end=0.2)

    def test_01_linear_schedule_shapes(self):
        """Test the default schedule decays almost to pure noise"""
        print("Testing linear schedule...")

        schedule = build_linear_schedule(2000)
        self.assertEqual(schedule.T, 2000)
        self.assertEqual(len(schedule.alpha_bar), 2000)
        self.assertTrue(np.all(np.diff(schedule.alpha_bar) < 0))
        self.assertLess(schedule.alpha_bar[-1], 1e-4)
        np.testing.assert_allclose(schedule.alpha, 1.0 - schedule.beta)

        print("✅ Linear schedule test passed")

    def test_02_invalid_parameters(self):
        """Test out-of-range schedule parameters are rejected"""
        print("Testing schedule parameter validation...")

        with self.assertRaises(ParameterError):
            build_linear_schedule(0)
        with self.assertRaises(ParameterError):
            build_linear_schedule(10, beta_start=0.0)
        with self.assertRaises(ParameterError):
            build_linear_schedule(10, beta_end=1.0)
        with self.assertRaises(ParameterError):
            build_linear_schedule(10, beta_start=0.1, beta_end=0.01)
        with self.assertRaises(ParameterError):
            build_linear_schedule(10, variance='learned')

        print("✅ Schedule parameter validation test passed")

    def test_03_forward_sample_closed_form(self):
        """Test q(x_t | x_0) with zero noise is the scaled input"""
        print("Testing closed-form forward sample...")

        x0 = torch.linspace(-1, 1, 16, dtype=torch.float64).reshape(1, 1, 4, 4)
        xt = forward_sample_continuous(self.schedule, x0, 5, torch.zeros_like(x0))
        expected = np.sqrt(self.schedule.alpha_bar[4]) * x0
        self.assertTrue(torch.allclose(xt, expected, atol=1e-12))

        with self.assertRaises(ParameterError):
            forward_sample_continuous(self.schedule, x0, 11, torch.zeros_like(x0))
        with self.assertRaises(ShapeError):
            forward_sample_continuous(self.schedule, x0, 1, torch.zeros(3))

        print("✅ Closed-form forward sample test passed")

    def test_04_iterated_kernel_matches_marginal(self):
        """Test iterating the one-step kernel reproduces the closed-form marginal"""
        print("Testing iterated kernel against the marginal...")

        n, t_final, x0_value = 10_000, 5, 0.7
        generator = torch.Generator().manual_seed(0)
        x = torch.full((n,), x0_value, dtype=torch.float64)
        for t in range(1, t_final + 1):
            x = forward_step_continuous(self.schedule, x, t, torch.randn(n, generator=generator, dtype=torch.float64))

        alpha_bar = self.schedule.alpha_bar[t_final - 1]
        expected_mean = np.sqrt(alpha_bar) * x0_value
        expected_var = 1.0 - alpha_bar
        mean_se = np.sqrt(expected_var / n)
        var_se = expected_var * np.sqrt(2.0 / (n - 1))
        self.assertLess(abs(float(x.mean()) - expected_mean), 4 * mean_se)
        self.assertLess(abs(float(x.var()) - expected_var), 4 * var_se)

        print("✅ Iterated kernel test passed")

    def test_05_posterior_mean(self):
        """Test the posterior mean reduces to x0 at t = 1 and matches the coefficients otherwise"""
        print("Testing posterior mean...")

        generator = torch.Generator().manual_seed(1)
        x0 = torch.randn(2, 1, 4, 4, generator=generator, dtype=torch.float64)
        xt = torch.randn(2, 1, 4, 4, generator=generator, dtype=torch.float64)
        self.assertTrue(torch.equal(posterior_mean_continuous(self.schedule, x0, xt, 1), x0))

        t = 3
        ab, ab_prev = self.schedule.alpha_bar[t - 1], self.schedule.alpha_bar[t - 2]
        beta, alpha = self.schedule.beta[t - 1], self.schedule.alpha[t - 1]
        expected = (np.sqrt(ab_prev) * beta / (1 - ab)) * x0 + (np.sqrt(alpha) * (1 - ab_prev) / (1 - ab)) * xt
        self.assertTrue(torch.allclose(posterior_mean_continuous(self.schedule, x0, xt, t), expected, atol=1e-12))

        batched = posterior_mean_continuous(self.schedule, x0, xt, torch.tensor([1, 3]))
        self.assertTrue(torch.allclose(batched[0], x0[0], atol=1e-12))
        self.assertTrue(torch.allclose(batched[1], expected[1], atol=1e-12))

        print("✅ Posterior mean test passed")

    def test_06_respaced_schedule(self):
        """Test respacing keeps alpha_bar at the retained training timesteps"""
        print("Testing schedule respacing...")

        schedule = build_linear_schedule(2000)
        respaced = respace_schedule(schedule, 250)
        self.assertEqual(respaced.T, 250)
        self.assertEqual(int(respaced.timesteps[0]), 1)
        self.assertEqual(int(respaced.timesteps[-1]), 2000)
        np.testing.assert_allclose(respaced.alpha_bar, schedule.alpha_bar[respaced.timesteps - 1], rtol=1e-10)
        self.assertEqual(respaced.model_t(250), 2000)
        self.assertIs(respace_schedule(schedule, 2000), schedule)

        with self.assertRaises(ParameterError):
            respace_schedule(schedule, 0)

        print("✅ Schedule respacing test passed")

    def test_07_posterior_variance_option(self):
        """Test the posterior variance choice is positive everywhere"""
        print("Testing posterior variance...")

        schedule = build_linear_schedule(100, variance='posterior')
        self.assertTrue(np.all(schedule.sigma2 > 0))
        self.assertTrue(np.all(schedule.sigma2 <= schedule.beta + 1e-15))

        print("✅ Posterior variance test passed")


class TestDiscreteTransitions(unittest.TestCase):

    def setUp(self):
        """Set up a small mask-and-replace chain"""
        self.K, self.T = 3, 4
        self.transitions = build_mask_replace_transitions(self.K, self.T)

    def test_01_rows_are_stochastic(self):
        """Test every transition matrix row is a distribution and mask is absorbing"""
        print("Testing transition matrices...")

        self.assertTrue(np.allclose(self.transitions.Q.sum(-1), 1.0, atol=1e-12))
        self.assertTrue(np.allclose(self.transitions.Q_bar.sum(-1), 1.0, atol=1e-12))
        self.assertTrue(np.all(self.transitions.Q >= 0))
        for t in range(self.T):
            self.assertEqual(self.transitions.Q[t, self.K, self.K], 1.0)
            self.assertTrue(np.all(self.transitions.Q[t, self.K, :self.K] == 0))

        print("✅ Transition matrix test passed")

    def test_02_cumulative_product(self):
        """Test Q_bar equals the explicit matrix product"""
        print("Testing cumulative products...")

        for t in range(1, self.T + 1):
            explicit = np.linalg.multi_dot([np.eye(self.K + 1)] + [self.transitions.Q[s] for s in range(t)])
            self.assertTrue(np.allclose(self.transitions.Q_bar[t - 1], explicit, atol=1e-10))

        final = self.transitions.Q_bar[-1]
        self.assertAlmostEqual(final[0, self.K], 0.9, places=10)
        self.assertAlmostEqual(final[0, 0], 0.05 + 0.05 / self.K, places=10)
        self.assertAlmostEqual(final[0, 1], 0.05 / self.K, places=10)

        print("✅ Cumulative product test passed")

    def test_03_invalid_schedule(self):
        """Test probabilities summing past one are rejected"""
        print("Testing invalid discrete schedule...")

        with self.assertRaises(ScheduleError):
            build_mask_replace_transitions(3, 4, gamma_end=0.9, beta_uniform_end=0.2)
        with self.assertRaises(ParameterError):
            build_mask_replace_transitions(1, 4)

        print("✅ Invalid discrete schedule test passed")

    def _enumerated_posterior(self, transitions, xt_token, x0_token, t):
        """Sum path probabilities of x_1..x_t starting at x0"""
        n = transitions.K + 1
        joint = np.zeros(n)
        for path in itertools.product(range(n), repeat=t):
            if path[-1] != xt_token:
                continue
            prob, prev = 1.0, x0_token
            for s, state in enumerate(path):
                prob *= transitions.Q[s][prev, state]
                prev = state
            previous_state = path[-2] if t > 1 else x0_token
            joint[previous_state] += prob
        return joint / joint.sum()

    def test_04_posterior_matches_enumeration(self):
        """Test the closed-form posterior against exhaustive path enumeration"""
        print("Testing discrete posterior against enumeration...")

        for K, T in ((2, 3), (3, 4)):
            transitions = build_mask_replace_transitions(K, T)
            for t in range(1, T + 1):
                for x0 in range(K):
                    for xt in range(K + 1):
                        expected = self._enumerated_posterior(transitions, xt, x0, t)
                        actual = discrete_posterior(transitions, xt, x0, t)
                        np.testing.assert_allclose(actual, expected, atol=1e-9)

        print("✅ Discrete posterior enumeration test passed")

    def test_05_unreachable_state(self):
        """Test an impossible (x_t, x_0) pair raises"""
        print("Testing unreachable posterior...")

        no_replace = build_mask_replace_transitions(3, 4, gamma_end=0.9, beta_uniform_end=0.0)
        with self.assertRaises(InconsistencyError):
            discrete_posterior(no_replace, 1, 0, 2)
        with self.assertRaises(ParameterError):
            discrete_posterior(no_replace, 1, 3, 2)

        print("✅ Unreachable posterior test passed")

    def test_06_batched_posterior_with_one_hot(self):
        """Test the batched model posterior with a one-hot x0 equals the exact posterior"""
        print("Testing batched posterior...")

        generator = torch.Generator().manual_seed(0)
        x0 = torch.randint(self.K, (2, 3, 3), generator=generator)
        t = torch.tensor([2, 4])
        xt = sample_tokens(self.transitions, x0, t, generator)
        one_hot = torch.nn.functional.one_hot(x0, self.K).permute(0, 3, 1, 2).double()
        posterior = posterior_given_x0_probs(self.transitions, xt, one_hot, t)

        self.assertEqual(tuple(posterior.shape), (2, self.K + 1, 3, 3))
        for b in range(2):
            for y in range(3):
                for x in range(3):
                    expected = discrete_posterior(self.transitions, int(xt[b, y, x]), int(x0[b, y, x]), int(t[b]))
                    np.testing.assert_allclose(posterior[b, :, y, x].numpy(), expected, atol=1e-12)

        print("✅ Batched posterior test passed")

    def test_07_forward_marginal(self):
        """Test sampled tokens follow the Q_bar row"""
        print("Testing discrete forward marginal...")

        generator = torch.Generator().manual_seed(3)
        x0 = torch.ones(1, 100, 100, dtype=torch.long)
        xt = sample_tokens(self.transitions, x0, torch.tensor([4]), generator)
        n = xt.numel()
        expected = self.transitions.Q_bar[3][1]
        counts = np.bincount(xt.reshape(-1).numpy(), minlength=self.K + 1) / n
        se = np.sqrt(expected * (1 - expected) / n)
        self.assertTrue(np.all(np.abs(counts - expected) <= 4 * se + 1e-12))

        print("✅ Discrete forward marginal test passed")

    def test_08_token_map(self):
        """Test TokenMap validation and single-map forward sampling"""
        print("Testing TokenMap...")

        tokens = torch.zeros(4, 5, dtype=torch.long)
        token_map = TokenMap(4, 5, tokens, self.K)
        self.assertFalse(token_map.has_mask)
        noised = forward_sample_discrete(self.transitions, token_map, 3, torch.Generator().manual_seed(0))
        self.assertEqual(tuple(noised.tokens.shape), (4, 5))
        self.assertTrue(int(noised.tokens.max()) <= self.K)

        with self.assertRaises(ShapeError):
            TokenMap(5, 4, tokens, self.K)
        with self.assertRaises(ParameterError):
            forward_sample_discrete(self.transitions, TokenMap(4, 5, torch.full((4, 5), self.K), self.K), 1)

        print("✅ TokenMap test passed")


def run_tests():
    """Run all tests"""
    unittest.main(argv=[''], exit=False, verbosity=2)


if __name__ == "__main__":
    run_tests()
