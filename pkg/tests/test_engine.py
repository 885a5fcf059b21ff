"""Trial engine behavior: phases, selection statistics, feedback gating."""

import copy

import numpy as np
import pytest
from scipy import stats

from qagrel.engine import (
    BatchResult,
    Network,
    backward_feedback,
    build_network,
    compute_reward,
    compute_rpe,
    forward_pass,
    predict,
    run_batch,
    run_trial,
    select_action,
    select_actions,
    selected_q,
    softmax,
    trial_grads,
)
from qagrel.errors import ConfigError, ShapeError, StaleTraceError
from qagrel.layers import LayerWeights, conv2d, dropout, fully_connected, locally_connected2d
from qagrel.tensor import make_rng


def one_hot(i, k):
    z = np.zeros(k)
    z[i] = 1.0
    return z


def mlp_specs(sizes, drop_after=None, drop_rate=0.5):
    specs = []
    for i in range(len(sizes) - 1):
        act = "linear" if i == len(sizes) - 2 else "relu"
        specs.append(fully_connected(sizes[i], sizes[i + 1], activation=act))
        if drop_after is not None and i == drop_after:
            specs.append(dropout(sizes[i + 1], drop_rate))
    return specs


def tiny_fixed_network():
    """2-2-2 net with hand-picked weights used by the frozen examples."""
    specs = (fully_connected(2, 2), fully_connected(2, 2, activation="linear"))
    w1 = np.array([[1.0, -1.0], [0.5, 1.0]])
    w2 = np.array([[1.0, 0.0], [0.0, 1.0]])
    return Network(specs, [LayerWeights(w1, w1.T.copy()), LayerWeights(w2, w2.T.copy())])


class TestBuildNetwork:
    def test_chain_mismatch_rejected(self):
        with pytest.raises(ConfigError):
            build_network([fully_connected(4, 3), fully_connected(5, 2, activation="linear")], make_rng(0))

    def test_nonlinear_output_rejected(self):
        with pytest.raises(ConfigError):
            build_network([fully_connected(4, 3), fully_connected(3, 2)], make_rng(0))

    def test_linear_hidden_rejected(self):
        with pytest.raises(ConfigError):
            build_network(
                [fully_connected(4, 3, activation="linear"), fully_connected(3, 2, activation="linear")],
                make_rng(0),
            )

    def test_empty_rejected(self):
        with pytest.raises(ConfigError):
            build_network([], make_rng(0))

    def test_init_scales_by_kind(self):
        net = build_network(
            [
                conv2d((8, 8, 1), 4, (3, 3)),
                fully_connected((6, 6, 4), 10),
                fully_connected(10, 3, activation="linear"),
            ],
            make_rng(1),
        )
        assert np.abs(net.weights[0].forward_w).max() <= 0.02
        assert np.abs(net.weights[1].forward_w).max() <= 0.05
        assert net.num_actions == 3
        assert net.in_shape == (8, 8, 1)
        assert net.version == 0


class TestForwardPass:
    def test_frozen_one_hidden_layer_example(self):
        # x = [1, 0], hidden weights [[1, -1], [0, 0]], output column [2, 3]:
        # hidden y = [1, 0], q = [2].
        specs = (fully_connected(2, 2), fully_connected(2, 1, activation="linear"))
        u = np.array([[1.0, -1.0], [0.0, 0.0]])
        w = np.array([[2.0], [3.0]])
        net = Network(specs, [LayerWeights(u, u.T.copy()), LayerWeights(w, w.T.copy())])
        trace = forward_pass(net, np.array([1.0, 0.0]))
        np.testing.assert_array_equal(trace.activities[1], [1.0, 0.0])
        np.testing.assert_array_equal(trace.q_values, [2.0])

    def test_frozen_tiny_example(self):
        net = tiny_fixed_network()
        trace = forward_pass(net, np.array([1.0, 2.0]))
        np.testing.assert_array_equal(trace.activities[1], [2.0, 1.0])
        np.testing.assert_array_equal(trace.q_values, [2.0, 1.0])
        np.testing.assert_array_equal(trace.gates[0], [1.0, 1.0])
        np.testing.assert_array_equal(trace.gates[1], [1.0, 1.0])

    def test_zero_input_gives_zero_q(self):
        # No biases anywhere, so nothing can lift a zero stimulus.
        net = build_network(mlp_specs([6, 5, 3]), make_rng(1))
        np.testing.assert_array_equal(forward_pass(net, np.zeros(6)).q_values, np.zeros(3))

    def test_q_values_are_last_pre_activation(self):
        net = build_network(mlp_specs([6, 5, 3]), make_rng(2))
        trace = forward_pass(net, make_rng(3).standard_normal(6))
        np.testing.assert_array_equal(trace.q_values, trace.pre_activations[-1])

    def test_batched_matches_single(self):
        net = build_network(mlp_specs([6, 5, 3]), make_rng(2))
        xs = make_rng(3).standard_normal((4, 6))
        batch = forward_pass(net, xs)
        for i in range(4):
            single = forward_pass(net, xs[i])
            np.testing.assert_allclose(batch.q_values[i], single.q_values, rtol=1e-12)

    def test_injected_masks_replay_trial(self):
        net = build_network(mlp_specs([6, 5, 3], drop_after=0), make_rng(4))
        x = make_rng(5).standard_normal(6)
        t1 = forward_pass(net, x, rng=make_rng(6), training=True)
        t2 = forward_pass(net, x, training=True, dropout_masks=t1.dropout_masks)
        np.testing.assert_array_equal(t1.q_values, t2.q_values)

    def test_eval_mode_has_no_masks(self):
        net = build_network(mlp_specs([6, 5, 3], drop_after=0), make_rng(7))
        trace = forward_pass(net, np.ones(6), training=False)
        assert all(m is None for m in trace.dropout_masks)


class TestSoftmax:
    def test_matches_definition(self):
        q = np.array([0.0, 1.0, 2.0])
        np.testing.assert_allclose(softmax(q), np.exp(q) / np.exp(q).sum(), rtol=1e-12)

    def test_frozen_log_two_example(self):
        np.testing.assert_allclose(softmax(np.array([np.log(2.0), 0.0])), [2 / 3, 1 / 3], rtol=1e-12)

    def test_shift_invariant_and_stable(self):
        q = np.array([1000.0, 1001.0])
        p = softmax(q)
        np.testing.assert_allclose(p, softmax(np.array([0.0, 1.0])), rtol=1e-12)
        assert np.isfinite(p).all()


class TestSelectAction:
    def test_greedy_when_epsilon_zero(self):
        rng = make_rng(10)
        for _ in range(100):
            q = rng.standard_normal(7)
            out = select_action(q, 0.0, rng)
            assert out.selected == int(np.argmax(q))
            assert out.greedy
            np.testing.assert_array_equal(out.z, one_hot(out.selected, 7))

    def test_ties_resolve_to_lowest_index(self):
        out = select_action(np.array([5.0, 5.0, 1.0]), 0.0, make_rng(11))
        assert out.selected == 0

    def test_epsilon_one_matches_boltzmann_chi_square(self):
        q = np.array([0.0, 1.0, 2.0, 0.5])
        rng = make_rng(12)
        n = 100_000
        counts = np.zeros(4)
        for _ in range(n):
            out = select_action(q, 1.0, rng)
            assert not out.greedy
            counts[out.selected] += 1
        res = stats.chisquare(counts, softmax(q) * n)
        assert res.pvalue > 0.01

    def test_two_equal_values_split_evenly(self):
        rng = make_rng(13)
        picks = [select_action(np.zeros(2), 1.0, rng).selected for _ in range(20_000)]
        assert abs(np.mean(picks) - 0.5) < 0.01

    def test_batched_epsilon_one_matches_boltzmann_chi_square(self):
        q = np.array([0.0, 1.0, 2.0, 0.5])
        n = 100_000
        out = select_actions(np.tile(q, (n, 1)), 1.0, make_rng(13))
        assert not out.greedy.any()
        counts = np.bincount(out.selected, minlength=4)
        res = stats.chisquare(counts, softmax(q) * n)
        assert res.pvalue > 0.01

    def test_batched_greedy_when_epsilon_zero(self):
        qs = make_rng(14).standard_normal((100, 5))
        out = select_actions(qs, 0.0, make_rng(15))
        np.testing.assert_array_equal(out.selected, np.argmax(qs, axis=1))
        assert out.greedy.all()
        np.testing.assert_array_equal(out.z[np.arange(100), out.selected], np.ones(100))
        assert out.z.sum() == 100

    def test_exploration_rate_near_epsilon(self):
        qs = make_rng(16).standard_normal((50_000, 3))
        out = select_actions(qs, 0.05, make_rng(17))
        assert abs((~out.greedy).mean() - 0.05) < 0.005

    def test_rejects_bad_shape(self):
        with pytest.raises(ShapeError):
            select_action(np.ones((2, 2)), 0.0, make_rng(18))
        with pytest.raises(ShapeError):
            select_action(np.ones(0), 0.0, make_rng(18))
        with pytest.raises(ShapeError):
            select_actions(np.ones(3), 0.0, make_rng(19))


class TestRewardAndRpe:
    def test_reward_is_indicator_of_correct_class(self):
        assert compute_reward(3, 3) == 1.0
        assert compute_reward(3, 4) == 0.0
        np.testing.assert_array_equal(compute_reward([0, 1, 2], [0, 2, 2]), [1.0, 0.0, 1.0])

    def test_rpe_frozen_examples(self):
        assert compute_rpe(1.0, 0.3) == pytest.approx(0.7)
        assert compute_rpe(0.0, 0.3) == pytest.approx(-0.3)
        assert compute_rpe(1.0, 1.0) == 0.0

    def test_rpe_bounded_for_unit_interval_q(self):
        rng = make_rng(20)
        q = rng.random(1000)
        r = rng.integers(0, 2, size=1000).astype(float)
        d = compute_rpe(r, q)
        assert d.min() >= -1.0 and d.max() <= 1.0

    def test_selected_q_single_and_batched(self):
        q = np.array([0.2, 0.9, -0.3])
        assert selected_q(q, 1) == pytest.approx(0.9)
        qb = np.array([[0.2, 0.9], [0.5, -1.0]])
        np.testing.assert_allclose(selected_q(qb, [1, 0]), [0.9, 0.5])


def feedback_loop_reference(net, trace, action):
    """Layer-by-layer loop transcription of the feedback recursion for a
    fully connected stack (no dropout)."""
    sizes = [s.out_size for s in net.specs]
    arriving = np.zeros(sizes[-1])
    arriving[action] = 1.0
    fbs = [None] * len(net.specs)
    for l in range(len(net.specs) - 1, -1, -1):
        gate = trace.gates[l]
        fbs[l] = gate * arriving
        if l == 0:
            break
        wfb = net.weights[l].feedback_w
        nxt = np.zeros(net.specs[l].in_size)
        for m in range(nxt.size):
            for qi in range(sizes[l]):
                nxt[m] += gate[qi] * wfb[qi, m] * arriving[qi]
        arriving = nxt
    return fbs


class TestBackwardFeedback:
    def test_matches_loop_reference_on_random_nets(self):
        for seed in range(10):
            rng = make_rng(100 + seed)
            net = build_network(mlp_specs([4, 5, 3]), rng)
            x = rng.standard_normal(4)
            trace = forward_pass(net, x)
            action = int(rng.integers(3))
            got = backward_feedback(net, trace, one_hot(action, 3))
            want = feedback_loop_reference(net, trace, action)
            for g, w in zip(got.fbs, want):
                np.testing.assert_allclose(g, w, rtol=1e-12, atol=1e-15)

    def test_output_feedback_is_the_attention_signal(self):
        net = build_network(mlp_specs([4, 5, 3]), make_rng(20))
        trace = forward_pass(net, np.ones(4))
        fb = backward_feedback(net, trace, one_hot(2, 3))
        np.testing.assert_array_equal(fb.fbs[-1], [0.0, 0.0, 1.0])

    def test_silent_units_get_zero_feedback(self):
        for seed in range(20):
            rng = make_rng(200 + seed)
            net = build_network(mlp_specs([6, 8, 8, 4]), rng)
            trace = forward_pass(net, rng.standard_normal(6))
            fb = backward_feedback(net, trace, one_hot(int(rng.integers(4)), 4))
            for l in range(len(net.specs) - 1):
                silent = trace.activities[l + 1] == 0.0
                assert np.all(fb.fbs[l][silent] == 0.0)

    def test_dropped_units_get_zero_feedback(self):
        rng = make_rng(21)
        net = build_network(mlp_specs([6, 10, 4], drop_after=0, drop_rate=0.5), rng)
        trace = forward_pass(net, rng.standard_normal(6), rng=rng, training=True)
        fb = backward_feedback(net, trace, one_hot(1, 4))
        dropped = trace.dropout_masks[1] == 0.0
        assert dropped.any()
        assert np.all(fb.fbs[1][dropped] == 0.0)

    def test_bad_z_shape_rejected(self):
        net = build_network(mlp_specs([4, 5, 3]), make_rng(22))
        trace = forward_pass(net, np.ones(4))
        with pytest.raises(ShapeError):
            backward_feedback(net, trace, np.ones(5))


class TestStaleTraces:
    def test_feedback_refuses_trace_from_old_weights(self):
        rng = make_rng(23)
        net = build_network(mlp_specs([6, 8, 4]), rng)
        trace = forward_pass(net, rng.standard_normal(6))
        run_batch(net, rng.standard_normal((3, 6)), np.zeros(3, dtype=int), 0.0, 0.5, rng)
        with pytest.raises(StaleTraceError):
            backward_feedback(net, trace, one_hot(0, 4))

    def test_trial_grads_refuse_stale_feedback(self):
        rng = make_rng(24)
        net = build_network(mlp_specs([6, 8, 4]), rng)
        trace = forward_pass(net, rng.standard_normal(6))
        fb = backward_feedback(net, trace, one_hot(0, 4))
        run_batch(net, rng.standard_normal((3, 6)), np.zeros(3, dtype=int), 0.0, 0.5, rng)
        with pytest.raises(StaleTraceError):
            trial_grads(net, trace, fb, 1.0)


class TestTrialGrads:
    def test_frozen_tiny_example(self):
        # x = [1, 2] drives hidden [2, 1], q = [2, 1]; greedy action 0 with
        # label 0 gives r = 1, delta = 1 - 2 = -1. Feedback: output one-hot
        # [1, 0]; hidden arriving [1, 0]. Hand four-factor products below.
        net = tiny_fixed_network()
        result = run_trial(net, np.array([1.0, 2.0]), 0, epsilon=0.0, rng=make_rng(22))
        assert result.outcome.selected == 0
        assert result.reward == 1.0
        assert result.delta == pytest.approx(-1.0)
        assert result.error == pytest.approx(0.5)
        np.testing.assert_allclose(result.grads[1], [[-2.0, 0.0], [-1.0, 0.0]])
        np.testing.assert_allclose(result.grads[0], [[-1.0, 0.0], [-2.0, 0.0]])

    def test_zero_delta_means_zero_grads(self):
        net = tiny_fixed_network()
        trace = forward_pass(net, np.array([1.0, 2.0]))
        fb = backward_feedback(net, trace, one_hot(0, 2))
        for g in trial_grads(net, trace, fb, 0.0):
            np.testing.assert_array_equal(g, np.zeros_like(g))

    def test_grads_zero_into_and_out_of_silent_units(self):
        rng = make_rng(23)
        net = build_network(mlp_specs([6, 8, 8, 4]), rng)
        result = run_trial(net, rng.standard_normal(6), 1, epsilon=0.0, rng=rng)
        for l in (0, 1, 2):
            silent_out = result.trace.activities[l + 1] == 0.0
            assert np.all(result.grads[l][:, silent_out] == 0.0)
            if l > 0:
                silent_in = result.trace.activities[l] == 0.0
                assert np.all(result.grads[l][silent_in, :] == 0.0)

    def test_only_selected_output_column_updates(self):
        rng = make_rng(24)
        net = build_network(mlp_specs([6, 8, 4]), rng)
        result = run_trial(net, rng.standard_normal(6), 2, epsilon=0.0, rng=rng)
        a = result.outcome.selected
        g = result.grads[-1]
        others = np.delete(g, a, axis=1)
        np.testing.assert_array_equal(others, np.zeros_like(others))

    def test_dropout_layer_has_no_grad(self):
        rng = make_rng(25)
        net = build_network(mlp_specs([6, 8, 4], drop_after=0), rng)
        result = run_trial(net, rng.standard_normal(6), 0, epsilon=0.0, rng=rng)
        assert result.grads[1] is None

    def test_same_seed_identical_grads(self):
        rng_a, rng_b = make_rng(26), make_rng(26)
        net = build_network(mlp_specs([6, 8, 4], drop_after=0), make_rng(27))
        x = make_rng(28).standard_normal(6)
        ra = run_trial(net, x, 1, epsilon=0.3, rng=rng_a)
        rb = run_trial(net, x, 1, epsilon=0.3, rng=rng_b)
        for a, b in zip(ra.grads, rb.grads):
            if a is None:
                assert b is None
            else:
                np.testing.assert_array_equal(a, b)


class TestRunBatch:
    def test_summed_grads_match_sequential_trials(self):
        rng = make_rng(26)
        net = build_network(mlp_specs([6, 8, 4]), rng)
        xs = rng.standard_normal((5, 6))
        ys = rng.integers(0, 4, size=5)
        trace = forward_pass(net, xs, training=True)
        outcome = select_actions(trace.q_values, 0.0, make_rng(27))
        rewards = compute_reward(outcome.selected, ys)
        deltas = compute_rpe(rewards, selected_q(trace.q_values, outcome.selected))
        fb = backward_feedback(net, trace, outcome.z)
        batch_grads = trial_grads(net, trace, fb, deltas)

        summed = [np.zeros_like(g) for g in batch_grads]
        for i in range(5):
            r = run_trial(net, xs[i], int(ys[i]), epsilon=0.0, rng=make_rng(0))
            for l, g in enumerate(r.grads):
                summed[l] += g
        for got, want in zip(batch_grads, summed):
            np.testing.assert_allclose(got, want, rtol=1e-9, atol=1e-12)

    def test_update_changes_weights_and_reports_stats(self):
        rng = make_rng(28)
        net = build_network(mlp_specs([6, 8, 4]), rng)
        before = net.weights[0].forward_w.copy()
        xs = rng.standard_normal((10, 6))
        ys = rng.integers(0, 4, size=10)
        res = run_batch(net, xs, ys, epsilon=0.05, alpha=0.5, rng=rng)
        assert isinstance(res, BatchResult)
        assert res.n == 10
        assert 0.0 <= res.mean_reward <= 1.0
        assert res.mean_error >= 0.0
        assert 0.0 <= res.exploration_fraction <= 1.0
        assert not np.array_equal(before, net.weights[0].forward_w)
        assert net.version == 1

    def test_reciprocity_survives_updates(self):
        rng = make_rng(29)
        net = build_network(mlp_specs([6, 8, 4]), rng)
        xs = rng.standard_normal((8, 6))
        ys = rng.integers(0, 4, size=8)
        for _ in range(20):
            run_batch(net, xs, ys, epsilon=0.1, alpha=0.5, rng=rng)
        for w in net.weights:
            np.testing.assert_array_equal(w.feedback_w, w.forward_w.T)

    def test_same_seed_same_final_weights(self):
        def train(seed):
            rng = make_rng(seed)
            net = build_network(mlp_specs([6, 8, 4], drop_after=0), rng)
            xs = make_rng(1000).standard_normal((12, 6))
            ys = make_rng(1001).integers(0, 4, size=12)
            for _ in range(5):
                run_batch(net, xs, ys, epsilon=0.2, alpha=0.5, rng=rng)
            return net.weights[0].forward_w

        np.testing.assert_array_equal(train(30), train(30))
        assert not np.array_equal(train(30), train(31))

    def test_label_shape_mismatch_rejected(self):
        rng = make_rng(32)
        net = build_network(mlp_specs([6, 8, 4]), rng)
        with pytest.raises(ShapeError):
            run_batch(net, np.ones((3, 6)), np.zeros(2, dtype=int), 0.0, 0.5, rng)


class TestSpatialTrials:
    """The full trial machinery on conv / locally connected stacks."""

    def spatial_net(self, kind, seed):
        maker = conv2d if kind == "conv" else locally_connected2d
        specs = [
            maker((7, 7, 1), 3, (3, 3)),
            maker((5, 5, 3), 2, (3, 3), stride=(2, 2), padding=(1, 1)),
            fully_connected((3, 3, 2), 6),
            fully_connected(6, 4, activation="linear"),
        ]
        return build_network(specs, make_rng(seed))

    @pytest.mark.parametrize("kind", ["conv", "loccon"])
    def test_trial_runs_and_gates_hold(self, kind):
        net = self.spatial_net(kind, 33)
        rng = make_rng(34)
        result = run_trial(net, rng.standard_normal((7, 7, 1)), 1, epsilon=0.0, rng=rng)
        for l in range(len(net.specs)):
            if result.grads[l] is not None:
                assert result.grads[l].shape == net.weights[l].forward_w.shape
        for l in (0, 1):
            silent = result.trace.activities[l + 1] == 0.0
            fb = result.trace.gates[l]  # gate zero exactly where silent
            assert np.all(fb[silent] == 0.0)

    @pytest.mark.parametrize("kind", ["conv", "loccon"])
    def test_batched_grads_match_per_trial_sum(self, kind):
        net = self.spatial_net(kind, 35)
        rng = make_rng(36)
        xs = rng.standard_normal((3, 7, 7, 1))
        ys = np.array([0, 1, 2])
        trace = forward_pass(net, xs, training=True)
        outcome = select_actions(trace.q_values, 0.0, rng)
        deltas = compute_rpe(
            compute_reward(outcome.selected, ys), selected_q(trace.q_values, outcome.selected)
        )
        fb = backward_feedback(net, trace, outcome.z)
        batch = trial_grads(net, trace, fb, deltas)
        summed = None
        for i in range(3):
            r = run_trial(net, xs[i], int(ys[i]), epsilon=0.0, rng=make_rng(0))
            summed = r.grads if summed is None else [a + b for a, b in zip(summed, r.grads)]
        for got, want in zip(batch, summed):
            np.testing.assert_allclose(got, want, rtol=1e-9, atol=1e-12)


class TestPredict:
    def test_greedy_eval_actions(self):
        rng = make_rng(37)
        net = build_network(mlp_specs([6, 8, 4], drop_after=0), rng)
        xs = rng.standard_normal((5, 6))
        actions = predict(net, xs)
        trace = forward_pass(net, xs, training=False)
        np.testing.assert_array_equal(actions, np.argmax(trace.q_values, axis=1))
        assert int(predict(net, xs[0])) == actions[0]
