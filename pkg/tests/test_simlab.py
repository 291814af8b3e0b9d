from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from forklab import simlab
from forklab.errors import TrainingDiverged, ValidationError
from forklab.simlab import SimConfig, SimDataset, SimPolicy


@pytest.mark.property_based
@given(arrays(np.float64, (3, 4), elements=st.floats(-50, 50)))
@settings(max_examples=100)
def test_softmax_rows_sum_to_one(logits):
    probs = simlab.softmax(logits)
    assert np.all(probs >= 0)
    assert np.allclose(probs.sum(axis=1), 1.0)


def test_gradient_matches_finite_differences():
    for case in range(100):
        rng = np.random.default_rng(case)
        B, d, n = rng.integers(2, 5), rng.integers(1, 6), rng.integers(1, 5)
        policy = SimPolicy(rng.normal(0, 0.5, (B, d)), rng.normal(0, 0.5, B))
        cues = rng.integers(0, 2, (n, d))
        labels = rng.integers(0, B, n)
        assert simlab.gradient_check(policy, cues, labels) <= 1e-5


@pytest.mark.parametrize("optimizer", ["sgd", "adam"])
def test_zero_learning_rate_leaves_policy_unchanged(optimizer):
    cfg = SimConfig(d=16, train_size=8, test_size=4)
    train, _ = simlab.make_sim_dataset(cfg, np.random.default_rng(0))
    policy = SimPolicy(np.random.default_rng(1).normal(size=(2, 16)), np.zeros(2))
    after = simlab.sgd_epoch(policy, train, 0.0, optimizer=simlab.make_optimizer(optimizer))
    assert np.array_equal(after.weights, policy.weights)
    assert np.array_equal(after.bias, policy.bias)


def test_single_problem_confidence_rises_to_one():
    train = SimDataset(np.array([[1, 0, 1, 1]]), np.array([1]))
    lr = 0.9 * simlab.stability_threshold(train)
    policy = SimPolicy.uniform(2, 4)
    confidences = []
    for _ in range(500):
        policy = simlab.sgd_epoch(policy, train, lr)
        confidences.append(policy.branch_probs(train.cues[0])[1])
    assert all(b >= a for a, b in zip(confidences, confidences[1:]))
    assert confidences[-1] > 0.99


def test_full_batch_loss_non_increasing_below_threshold():
    cfg = SimConfig()
    train, _ = simlab.make_sim_dataset(cfg, np.random.default_rng(cfg.seed))
    lr = 0.5 * simlab.stability_threshold(train)
    policy = SimPolicy.uniform(cfg.B, cfg.d)
    losses = [simlab.policy_loss(policy, train)]
    for _ in range(50):
        policy = simlab.sgd_epoch(policy, train, lr)
        losses.append(simlab.policy_loss(policy, train))
    assert all(b <= a + 1e-12 for a, b in zip(losses, losses[1:]))


def test_divergence_is_reported():
    train = SimDataset(np.ones((2, 4)), np.array([0, 1]))
    policy = SimPolicy(np.full((2, 4), 1e308), np.zeros(2))
    with pytest.raises(TrainingDiverged):
        simlab.sgd_epoch(policy, train, 1.0)


def test_binary_label_balance():
    cfg = SimConfig(d=32, train_size=256, test_size=4)
    train, _ = simlab.make_sim_dataset(cfg, np.random.default_rng(0))
    assert abs(train.labels.mean() - 0.5) <= 3 * np.sqrt(0.25 / 256)


def test_three_way_label_balance():
    cfg = SimConfig(B=3, d=32, train_size=3000, test_size=4)
    train, _ = simlab.make_sim_dataset(cfg, np.random.default_rng(0))
    counts = np.bincount(train.labels, minlength=3)
    chi2 = float(np.sum((counts - 1000) ** 2 / 1000))
    assert chi2 < 13.82


def test_balanced_test_set_pairs_cues_with_every_label():
    cfg = SimConfig(B=3, d=16, train_size=4, test_size=5)
    _, test = simlab.make_sim_dataset(cfg, np.random.default_rng(0))
    assert len(test) == 15
    assert np.array_equal(test.labels, np.tile([0, 1, 2], 5))
    assert np.array_equal(test.cues[0], test.cues[2])


def test_unbalanced_test_set_samples_labels():
    cfg = SimConfig(d=16, train_size=4, test_size=400, balanced_test=False)
    _, test = simlab.make_sim_dataset(cfg, np.random.default_rng(0))
    assert len(test) == 400
    report = simlab.eval_policy(SimPolicy.fixed([0.9, 0.1], d=16), test, [1], exec_acc=1.0)
    assert report.chosen_correct_rate == pytest.approx(np.mean(test.labels == 0))
    assert report.chosen_correct_rate != 0.5


def test_single_train_problem_is_allowed():
    train, _ = simlab.make_sim_dataset(SimConfig(d=2, train_size=1, test_size=1), np.random.default_rng(0))
    assert len(train) == 1


@pytest.mark.parametrize(
    "overrides",
    [{"d": 4, "train_size": 1000}, {"B": 1}, {"exec_acc": 1.5}, {"regime": "sideways"}, {"ks": (4, 2)}, {"bin_width": 0.0}, {"adam_beta2": 1.0}],
)
def test_config_validation(overrides):
    with pytest.raises(ValidationError):
        SimConfig(**overrides).validate()


def test_reverse_allows_a_single_branch():
    SimConfig(B=1, regime="reverse").validate()


def test_uniform_policy_evaluation():
    cfg = SimConfig(d=16, train_size=4, test_size=64)
    _, test = simlab.make_sim_dataset(cfg, np.random.default_rng(0))
    report = simlab.eval_policy(SimPolicy.uniform(2, 16), test, [1, 32], exec_acc=1.0)
    assert report.pass_at_k[1] == pytest.approx(0.5, abs=1e-12)
    assert report.pass_at_k[32] == pytest.approx(1 - 2.0 ** -32, abs=1e-12)
    assert report.mean_max_confidence == pytest.approx(0.5)


def test_reverse_evaluation_ignores_policy():
    test = SimDataset(np.zeros((4, 8)), np.array([0, 1, 0, 1]))
    report = simlab.eval_policy(SimPolicy.fixed([1.0, 0.0], d=8), test, [4], exec_acc=0.98, regime="reverse")
    assert report.pass_at_k[4] == pytest.approx(1 - 0.02 ** 4)


def test_topk_view():
    collapsed = SimPolicy.fixed([0.999, 0.001], d=8)
    test = SimDataset(np.zeros((2, 8)), np.array([0, 1]))

    spread = simlab.apply_topk_uniform(collapsed, 2)
    assert np.allclose(spread.probs(test.cues), 0.5)
    assert simlab.eval_policy(spread, test, [8], 1.0).pass_at_k[8] == pytest.approx(1 - 2.0 ** -8)

    greedy = simlab.apply_topk_uniform(collapsed, 1)
    assert np.array_equal(greedy.probs(test.cues), [[1.0, 0.0], [1.0, 0.0]])

    assert collapsed.branch_probs(test.cues[0])[0] == pytest.approx(0.999)
    with pytest.raises(ValidationError):
        simlab.apply_topk_uniform(collapsed, 3)


def test_confidence_histogram_of_uniform_policy():
    cfg = SimConfig(d=16, train_size=4, test_size=10)
    _, test = simlab.make_sim_dataset(cfg, np.random.default_rng(0))
    histogram = simlab.confidence_histogram(SimPolicy.uniform(2, 16), test)
    assert histogram.correct_counts[10] == 10 and histogram.wrong_counts[10] == 10
    assert sum(histogram.correct_counts) == 10
    assert histogram.bin_edges[0] == 0.0 and histogram.bin_edges[-1] == 1.0


def test_confidence_histogram_of_always_right_policy():
    test = SimDataset(np.zeros((6, 4)), np.zeros(6, dtype=int))
    histogram = simlab.confidence_histogram(SimPolicy.fixed([1.0, 0.0], d=4), test)
    assert sum(histogram.wrong_counts) == 0
    assert histogram.correct_counts[-1] == 6


@pytest.fixture(scope="module", params=[0, 1, 2])
def forward_reference(request):
    return simlab.run_dynamics(replace(simlab.FORWARD_REFERENCE, seed=request.param))


def test_forward_reference_shape(forward_reference):
    pass_at_1 = [r.pass_at_k[1] for r in forward_reference]
    assert all(b >= a - 1e-9 for a, b in zip(pass_at_1, pass_at_1[1:]))

    pass_at_32 = [r.pass_at_k[32] for r in forward_reference]
    peak = max(pass_at_32)
    assert pass_at_32.index(peak) < len(pass_at_32) // 4
    assert peak - pass_at_32[-1] >= 0.3
    assert pass_at_32[-1] <= 0.6

    final = forward_reference[-1]
    assert final.mean_max_confidence >= 0.95
    assert final.chosen_correct_rate == pytest.approx(0.5)
    assert final.train_confidence >= 0.95


def test_reverse_reference_holds_coverage():
    reports = simlab.run_dynamics(simlab.REVERSE_REFERENCE)
    assert all(r.pass_at_k[1] >= 0.99 for r in reports)
    assert reports[0].pass_at_k == reports[-1].pass_at_k


def test_dynamics_csv(tmp_path):
    cfg = SimConfig(d=16, train_size=8, test_size=8, epochs=3, ks=(1, 2))
    path = tmp_path / "dynamics.csv"
    reports = simlab.run_dynamics(cfg, str(path), meta={"manifest_hash": "h", "seed": 0, "version": "t"})
    lines = path.read_text().splitlines()
    assert lines[0].startswith("# manifest_hash=h")
    assert lines[1] == ",".join(simlab.DYNAMICS_COLUMNS)
    assert len(lines) == 2 + len(reports) * 2
    assert [r.epoch for r in reports] == [0, 1, 2, 3]


def test_train_checkpoints():
    cfg = SimConfig(d=16, train_size=8, test_size=8, epochs=5)
    snapshots = simlab.train_checkpoints(cfg, [0, 5, 2])
    assert sorted(snapshots) == [0, 2, 5]
    assert np.array_equal(snapshots[0].weights, np.zeros((2, 16)))
    assert not np.array_equal(snapshots[5].weights, snapshots[2].weights)
    with pytest.raises(ValidationError):
        simlab.train_checkpoints(cfg, [6])


def test_policy_snapshot_round_trip(tmp_path):
    policy = SimPolicy(np.random.default_rng(0).normal(size=(3, 5)), np.array([0.1, -0.2, 1e-17]), seed=4)
    simlab.save_policy(policy, str(tmp_path / "policy.txt"))
    loaded = simlab.load_policy(str(tmp_path / "policy.txt"))
    assert np.array_equal(loaded.weights, policy.weights)
    assert np.array_equal(loaded.bias, policy.bias)
    assert loaded.seed == 4


def test_cue_vector():
    a = simlab.cue_vector(["v = 3", "b = v + 16"], 64)
    assert a.shape == (64,) and set(np.unique(a)) <= {0, 1}
    assert np.array_equal(a, simlab.cue_vector(["v = 3", "b = v + 16"], 64))
    assert not np.array_equal(a, simlab.cue_vector(["b = v + 16", "v = 3"], 64))
    assert simlab.cue_vector(["v = 3"], 300).shape == (300,)


def test_fit_mode_preferences():
    rows = [
        {"prompt": "p1", "mode": "code"},
        {"prompt": "p1", "mode": "nl"},
        {"prompt": "p2", "mode": "nl"},
    ]
    preferences = simlab.fit_mode_preferences(rows)
    assert preferences[simlab.prompt_key("p1")] == 0.5
    assert preferences[simlab.prompt_key("p2")] == 0.0
    with pytest.raises(ValidationError):
        simlab.fit_mode_preferences([{"prompt": "p", "mode": "latex"}])
