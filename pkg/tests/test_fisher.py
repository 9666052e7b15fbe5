"""Fisher diagnostics: per-sample oracle, score finite differences, energy properties."""

import numpy as np
import pytest

from olier import (
    ContractError,
    LossWeights,
    ShapeError,
    Tensor,
    TrainingConfig,
    backward,
    begin_task,
    cross_entropy,
    fisher_diag,
    fisher_energy,
    finish_task,
    make_stream,
    run_stream,
)
from olier.fisher import cross_task_energy
from olier.model import build_classifier, forward
from olier.training import build_model_for_stream, train_task
from olier.datasets import TaskStream


def trained_model(seed=0):
    stream = make_stream("rotated-gaussians", 1, seed)
    cfg = TrainingConfig(method="olier", loss_weights=LossWeights(0, 0), epochs=3, seed=seed)
    model = build_model_for_stream(stream, cfg)
    begin_task(model)
    train_task(model, stream.tasks[0], cfg)
    finish_task(model)
    return model, stream.tasks[0]


def test_fisher_rejects_empty_data():
    model, _ = trained_model()
    with pytest.raises(ContractError):
        fisher_diag(model, np.zeros((0, 32)), np.zeros(0, dtype=np.int64))


def test_zero_gradient_parameter_has_zero_fisher():
    model, task = trained_model()
    x = np.array(task.train_x[:16])
    x[:, 5] = 0.0  # feature 5 never contributes
    f = fisher_diag(model, x, task.train_y[:16])
    assert np.all(f[0][:, 5] == 0.0)
    assert np.all(f[0][:, 0] >= 0.0)


def test_single_sample_fisher_is_squared_gradient():
    model, task = trained_model()
    x, y = task.train_x[:1], task.train_y[:1]
    f = fisher_diag(model, x, y)

    weights = [Tensor(np.array(layer.effective_weight(model.taylor_order).data), requires_grad=True)
               for layer in model.layers]
    logits = forward(model, Tensor(x), weights=weights)
    grads = backward(cross_entropy(logits, y) * -1.0)
    for fi, w in zip(f, weights):
        g = grads[w].data
        assert np.array_equal(fi, g * g)


def test_batch_fisher_is_mean_of_per_sample():
    model, task = trained_model()
    x, y = task.train_x[:8], task.train_y[:8]
    batch = fisher_diag(model, x, y)
    singles = [fisher_diag(model, x[i:i + 1], y[i:i + 1]) for i in range(8)]
    for li in range(len(batch)):
        mean = np.mean([s[li] for s in singles], axis=0)
        assert np.max(np.abs(batch[li] - mean)) < 1e-10


def test_fisher_matches_finite_difference_score_on_tiny_model():
    """Central-difference scores of log p, squared and averaged, reproduce the diagonal."""
    model = build_classifier(in_dim=1, hidden=1, classes=2, rank=1,
                             update_mode="mult", taylor_order=2, seed=3)
    rng = np.random.default_rng(60)
    x = rng.normal(size=(6, 1))
    y = rng.integers(0, 2, size=6)
    fisher = fisher_diag(model, x, y)

    step = 1e-5
    weights0 = [np.array(layer.effective_weight(2).data) for layer in model.layers]
    totals = [np.zeros_like(w) for w in weights0]
    for s in range(6):
        for li, w0 in enumerate(weights0):
            score = np.zeros_like(w0)
            for idx in np.ndindex(w0.shape):
                def log_p(value):
                    ws = [Tensor(w) for w in weights0]
                    perturbed = np.array(w0)
                    perturbed[idx] = value
                    ws[li] = Tensor(perturbed)
                    logits = forward(model, Tensor(x[s:s + 1]), weights=ws)
                    return -cross_entropy(logits, y[s:s + 1]).item()

                score[idx] = (log_p(w0[idx] + step) - log_p(w0[idx] - step)) / (2 * step)
            totals[li] += score * score
    for fi, total in zip(fisher, totals):
        assert np.max(np.abs(fi - total / 6)) < 1e-10


def test_fisher_energy_values_and_errors():
    assert fisher_energy(np.array([1.0, 2.0]), np.array([0.5, -1.0])) == pytest.approx(2.25)
    assert fisher_energy(np.array([1.0, 2.0]), np.zeros(2)) == 0.0
    with pytest.raises(ShapeError):
        fisher_energy(np.zeros(3), np.zeros(2))
    with pytest.raises(ShapeError):
        fisher_energy([np.zeros(2)], [np.zeros(2), np.zeros(2)])


def test_fisher_energy_matches_loop_oracle():
    rng = np.random.default_rng(61)
    f = [np.abs(rng.normal(size=(3, 4))), np.abs(rng.normal(size=(2, 3)))]
    d = [rng.normal(size=(3, 4)), rng.normal(size=(2, 3))]
    expected = 0.0
    for fi, di in zip(f, d):
        for a, b in zip(fi.reshape(-1), di.reshape(-1)):
            expected += a * b * b
    assert abs(fisher_energy(f, d) - expected) < 1e-12


def test_fisher_energy_sign_flip_invariant():
    rng = np.random.default_rng(62)
    f = [np.abs(rng.normal(size=(4, 4)))]
    d = [rng.normal(size=(4, 4))]
    assert fisher_energy(f, d) == fisher_energy(f, [-d[0]])


def test_cross_task_energy_zero_for_neutral_final_adapter():
    stream = make_stream("rotated-gaussians", 2, 4)
    cfg = TrainingConfig(method="olier", epochs=2, seed=4)
    result = run_stream(stream, cfg)
    model_full = result.model
    # rebuild the "previous" state by dropping the final adapter
    cfg1 = TrainingConfig(method="olier", epochs=2, seed=4)
    model_prev = run_stream(TaskStream(tasks=stream.tasks[:1], kind=stream.kind, seed=stream.seed), cfg1).model
    # neutralize the final adapter: A = 0 makes the merge a no-op
    for layer in model_full.layers:
        f = layer.adapters[-1]
        f.A = Tensor(np.zeros(f.A.shape))
    task = stream.tasks[0]
    report = cross_task_energy(model_prev, model_full, task.train_x[:32], task.train_y[:32])
    assert report.energy == 0.0
    assert report.metadata["delta_convention"] == "effective-weight-delta"


def test_cross_task_energy_nonnegative_after_training():
    stream = make_stream("rotated-gaussians", 2, 5)
    cfg = TrainingConfig(method="olier", epochs=2, seed=5)
    result = run_stream(stream, cfg)
    prev = run_stream(TaskStream(tasks=stream.tasks[:1], kind=stream.kind, seed=stream.seed), cfg)
    task = stream.tasks[0]
    report = cross_task_energy(prev.model, result.model, task.train_x[:32], task.train_y[:32])
    assert report.energy >= 0.0
    assert all((f >= 0).all() for f in report.fisher)
