import json
import math

import numpy as np
import pytest
import torch
from torch import nn

from rmfnet.diffcore import DTYPE
from rmfnet.errors import NonFiniteError
from rmfnet.imagefit import synthetic_band_limited_image
from rmfnet.model import RMFN, ModelConfig, grid_coordinates
from rmfnet.trainer import (
    AdamState,
    StageSchedule,
    TrainingLog,
    _fair_outputs,
    adam_step,
    fit_full_scale,
    gaussian_lowpass,
    make_targets,
    mse,
    staged_fit,
)


def tiny_model(seed=0, **changes):
    config = dict(d_in=2, d_h=8, layers=2, b_max=8.0)
    config.update(changes)
    return RMFN(ModelConfig(**config), rng=seed)


def tiny_targets(model, size=16):
    image = synthetic_band_limited_image(size, model.config.b_max, np.random.default_rng(3))
    bands = [model.scale_band(k) for k in range(1, model.layers + 1)]
    return make_targets(image, bands)


def test_schedule_validation():
    schedule = StageSchedule((10, 20))
    schedule.validate(2)
    assert schedule.total == 30
    with pytest.raises(ValueError):
        schedule.validate(3)
    with pytest.raises(ValueError):
        StageSchedule((10, 0)).validate()
    with pytest.raises(ValueError):
        StageSchedule(()).validate()
    restored = StageSchedule.from_dict({'budgets': [5, 6], 'freeze_below_stage': True})
    assert restored.budgets == (5, 6)
    assert restored.freeze_below_stage


def test_adam_first_step_moves_by_learning_rate():
    w = nn.Parameter(torch.tensor([1.0, -2.0], dtype=DTYPE))
    state = AdamState({'w': w}, lr=0.1)
    adam_step(state, {'w': torch.tensor([0.5, -3.0], dtype=DTYPE)})
    assert state.step_count == 1
    np.testing.assert_allclose(w.detach().numpy(), [0.9, -1.9], atol=1e-6)
    m, v = state.moments('w')
    np.testing.assert_allclose(m.numpy(), [0.05, -0.3])
    np.testing.assert_allclose(v.numpy(), [0.00025, 0.009])


def test_adam_zero_gradient_only_counts_the_step():
    w = nn.Parameter(torch.tensor([1.5, -0.5], dtype=DTYPE))
    state = AdamState({'w': w}, lr=0.1)
    adam_step(state, {'w': torch.zeros(2, dtype=DTYPE)})
    assert state.step_count == 1
    assert w.detach().tolist() == [1.5, -0.5]


def test_adam_converges_on_a_quadratic_bowl():
    w = nn.Parameter(torch.tensor(0.0, dtype=DTYPE))
    state = AdamState({'w': w}, lr=0.1)
    for _ in range(500):
        adam_step(state, {'w': 2.0 * (w.detach() - 3.0)})
    assert state.step_count == 500
    assert abs(w.item() - 3.0) <= 1e-3


def test_adam_skips_parameters_without_gradient():
    a = nn.Parameter(torch.ones(2, dtype=DTYPE))
    b = nn.Parameter(torch.ones(2, dtype=DTYPE))
    state = AdamState([('a', a), ('b', b)], lr=0.1)
    (a.sum() * 2).backward()
    adam_step(state)
    assert torch.equal(b.detach(), torch.ones(2, dtype=DTYPE))
    assert not torch.equal(a.detach(), torch.ones(2, dtype=DTYPE))
    assert state.lr == 0.1


def test_adam_rejects_non_finite_gradient():
    w = nn.Parameter(torch.zeros(3, dtype=DTYPE))
    state = AdamState({'w': w})
    with pytest.raises(NonFiniteError, match="'w'"):
        adam_step(state, {'w': torch.tensor([0.0, math.nan, 1.0], dtype=DTYPE)})
    with pytest.raises(ValueError):
        AdamState({})


def test_lowpass_keeps_dc_and_attenuates_band_edge():
    n, band = 64, 8.0
    x = (np.arange(n) + 0.5) / n - 0.5
    np.testing.assert_allclose(gaussian_lowpass(np.full(n, 2.5), band), 2.5)
    signal = np.sin(2 * np.pi * band * x)
    np.testing.assert_allclose(gaussian_lowpass(signal, band), math.exp(-2.0) * signal, atol=1e-12)
    with pytest.raises(ValueError):
        gaussian_lowpass(signal, 0.0)


def test_lowpass_only_touches_given_axes(rng):
    image = rng.standard_normal((8, 8, 3))
    filtered = gaussian_lowpass(image, 2.0, axes=(0, 1))
    for c in range(3):
        np.testing.assert_allclose(filtered[..., c], gaussian_lowpass(image[..., c], 2.0), atol=1e-12)


def test_make_targets(rng):
    image = rng.uniform(0, 1, (16, 16, 1))
    targets = make_targets(image, [2.0, 4.0, 8.0])
    assert len(targets) == 3
    np.testing.assert_array_equal(targets[2], image)
    np.testing.assert_allclose(targets[0], gaussian_lowpass(image, 2.0, axes=(0, 1)))
    assert all(np.array_equal(t, image) for t in make_targets(image, [2.0, 4.0], lowpass=False))


def test_training_log_writes_json_lines(tmp_path):
    path = tmp_path / 'log.jsonl'
    with TrainingLog(path) as log:
        log.write(iteration=1, loss=0.5)
        log.write(iteration=2, loss=0.25)
    lines = path.read_text().splitlines()
    assert [json.loads(line) for line in lines] == [{'iteration': 1, 'loss': 0.5}, {'iteration': 2, 'loss': 0.25}]
    assert len(log.records) == 2
    assert TrainingLog().path is None


def test_staged_fit_records_snapshots():
    model = tiny_model()
    result = staged_fit(model, tiny_targets(model), StageSchedule((5, 5)), lr=1e-3, log_every=2)
    assert result.snapshot_iterations == [5, 10]
    assert set(result.snapshots[1]) == {1}
    assert set(result.snapshots[2]) == {1, 2}
    assert set(result.final_spectra) == {1, 2}
    assert result.stage_scales == {1: [1], 2: [2]}
    drift = result.drift()
    assert drift[2] == 0.0
    assert drift[1] >= 0.0
    losses = [r for r in result.history if 'loss' in r]
    assert losses[0]['iteration'] == 1
    assert any(r.get('snapshot') == 'stage1' for r in result.history)


def test_stage_only_evaluates_its_own_scale():
    model = tiny_model()
    calls = []
    for scale, head in enumerate(model.heads, start=1):
        head.register_forward_hook(
            lambda module, args, output, scale=scale: calls.append(scale) if torch.is_grad_enabled() else None)
    staged_fit(model, tiny_targets(model), StageSchedule((4, 3)), log_every=100)
    assert calls == [1] * 4 + [1, 2] * 3


def test_staged_fit_is_deterministic():
    def run():
        model = tiny_model(seed=2)
        staged_fit(model, tiny_targets(model), StageSchedule((5, 5)), lr=1e-2)
        return model.state_dict()

    first, second = run(), run()
    for name, value in first.items():
        assert torch.equal(value, second[name]), name


def test_fair_mode_supervises_every_scale():
    model = tiny_model()
    result = staged_fit(model, tiny_targets(model), StageSchedule((3, 3)), mode='fair')
    assert result.stage_scales == {1: [1, 2], 2: [1, 2]}


def test_fair_outputs_only_reach_current_layer():
    model = tiny_model()
    x = torch.as_tensor(grid_coordinates((6, 6)), dtype=DTYPE)
    outputs = _fair_outputs(model, x, stage=1)
    outputs[1].pow(2).mean().backward()
    assert model.linears[1].weight.grad is None
    assert model.heads[1].weight.grad is not None
    with torch.no_grad():
        for fair, plain in zip(outputs, model.forward_outputs(x)):
            assert torch.allclose(fair, plain)


def test_frozen_lower_layers_stay_fixed():
    def run(budgets):
        model = tiny_model(seed=4)
        staged_fit(model, tiny_targets(model), StageSchedule(budgets, freeze_below_stage=True), lr=1e-2)
        return model

    short, long = run((4, 1)), run((4, 6))
    for a, b in zip(short.trainable_groups(1), long.trainable_groups(1)):
        assert torch.equal(a, b)
    assert not torch.equal(short.heads[1].weight, long.heads[1].weight)
    assert all(p.requires_grad for p in long.parameters())


def test_staged_fit_validates_inputs():
    model = tiny_model()
    targets = tiny_targets(model)
    with pytest.raises(ValueError):
        staged_fit(model, targets, StageSchedule((5, 5)), mode='joint')
    with pytest.raises(ValueError):
        staged_fit(model, targets[:1], StageSchedule((5, 5)))
    with pytest.raises(ValueError):
        staged_fit(model, targets, StageSchedule((5, 5, 5)))


def test_full_scale_fit_reduces_loss():
    model = tiny_model()
    target = tiny_targets(model)[-1]
    with TrainingLog() as log:
        fit_full_scale(model, target, 60, lr=1e-2, log=log, log_every=20)
    losses = [r['loss'] for r in log.records]
    assert len(losses) == 4
    assert losses[-1] < losses[0]
    with pytest.raises(ValueError):
        fit_full_scale(model, target, 0)


def test_mse():
    assert mse(torch.ones(4, dtype=DTYPE), torch.zeros(4, dtype=DTYPE)).item() == 1.0
