import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from flowmid.core_types import StateLayout
from flowmid.dataset import NormStats, TupleSet
from flowmid.flow_model import (
    FULL_SCALE_ARCH,
    Arch,
    FlowBatch,
    FlowModel,
    TrainConfig,
    TrainingDivergence,
    flow_interpolate,
    loss_and_grads,
    train,
    weighted_velocity_loss,
)

LAYOUT = StateLayout(2, False)
D, K = LAYOUT.total_dim, 4


def tiny(seed=0):
    torch.manual_seed(seed)
    return FlowModel(LAYOUT, K, 0.2, Arch(2, 2, 32), dtype=torch.float64).randomize(torch.Generator().manual_seed(seed))


def batch(N=3, seed=1, weights=None):
    g = torch.Generator().manual_seed(seed)
    r = lambda *s: torch.randn(*s, generator=g, dtype=torch.float64)  # noqa: E731
    w = torch.rand(N, K, D, generator=g, dtype=torch.float64) + 0.1 if weights is None else weights
    return FlowBatch(r(N, K, D), r(N, 2 * D), w, torch.rand(N, generator=g, dtype=torch.float64), r(N, K, D))


def single_tuple_set(seed=0):
    rng = np.random.default_rng(seed)
    res = rng.normal(size=(1, K, D))
    res[:, 0] = 0
    return TupleSet(LAYOUT, K, 0.2, rng.normal(size=(1, 2 * D)), res, np.ones((1, K, D)), np.zeros(1, int),
                    np.zeros(1, int), {"H": 10})


def test_interpolation_examples():
    x0, x1 = np.full(3, 0.2), np.ones(3)
    np.testing.assert_array_equal(flow_interpolate(x0, x1, 0.0), x0)
    np.testing.assert_array_equal(flow_interpolate(x0, x1, 1.0), x1)
    np.testing.assert_allclose(flow_interpolate(x0, x1, 0.5), 0.6)
    t = torch.tensor([0.0, 1.0], dtype=torch.float64)
    a, b = torch.zeros(2, K, D, dtype=torch.float64), torch.ones(2, K, D, dtype=torch.float64)
    out = flow_interpolate(a, b, t)
    assert torch.all(out[0] == 0) and torch.all(out[1] == 1)


def test_forward_contracts():
    model, b = tiny(), batch(5)
    x = flow_interpolate(b.x0, b.x1, b.t)
    out = model(x, b.t, b.cond)
    assert out.shape == (5, K, D)
    assert torch.equal(out, model(x, b.t, b.cond))
    perm = torch.tensor([3, 0, 4, 1, 2])
    torch.testing.assert_close(model(x[perm], b.t[perm], b.cond[perm]), out[perm], rtol=0, atol=1e-12)
    with pytest.raises(ValueError):
        model(x[:, :3], b.t, b.cond)
    with pytest.raises(ValueError):
        model(x, b.t, b.cond[:, :D])


def test_forward_is_lipschitz_sane():
    model, b = tiny(), batch(4)
    x = flow_interpolate(b.x0, b.x1, b.t)
    delta = (model(x + 1e-9, b.t, b.cond) - model(x, b.t, b.cond)).abs().max().item()
    assert delta < 1e-3


def test_fresh_model_is_zero_field():
    model = FlowModel(LAYOUT, K, 0.2, Arch(1, 2, 16), dtype=torch.float64)
    b = batch()
    assert torch.all(model(b.x0, b.t, b.cond) == 0)
    assert model.parameter_count() > 0


def test_perfect_regression_has_zero_loss():
    model = FlowModel(LAYOUT, K, 0.2, Arch(1, 2, 16), dtype=torch.float64)  # outputs zero
    b = batch()
    b = FlowBatch(b.x0, b.cond, b.weights, b.t, b.x0.clone())  # target x1 - x0 = 0
    assert weighted_velocity_loss(model, b).item() == 0.0


def test_unit_weights_reduce_to_plain_objective():
    model = tiny()
    b = batch(weights=torch.ones(3, K, D, dtype=torch.float64))
    x = flow_interpolate(b.x0, b.x1, b.t)
    plain = torch.mean((model(x, b.t, b.cond) - (b.x1 - b.x0)) ** 2)
    assert weighted_velocity_loss(model, b).item() == pytest.approx(plain.item(), rel=1e-14)


def test_loss_is_linear_in_weights():
    model, b = tiny(), batch()
    doubled = FlowBatch(b.x0, b.cond, 2 * b.weights, b.t, b.x1)
    assert weighted_velocity_loss(model, doubled).item() == 2 * weighted_velocity_loss(model, b).item()


def test_non_finite_loss_raises():
    model, b = tiny(), batch()
    bad = FlowBatch(b.x0, b.cond, b.weights * float("nan"), b.t, b.x1)
    with pytest.raises(TrainingDivergence):
        weighted_velocity_loss(model, bad)


def test_batch_validation():
    b = batch()
    with pytest.raises(ValueError):
        FlowBatch(b.x0, b.cond, b.weights, b.t + 2, b.x1)
    with pytest.raises(ValueError):
        FlowBatch(b.x0, b.cond, b.weights[:, :2], b.t, b.x1)


@given(st.integers(0, 1000))
def test_gradients_match_central_differences(seed):
    model, b = tiny(seed), batch(seed=seed + 1)
    _, grads = loss_and_grads(model, b)
    rng = np.random.default_rng(seed)
    h = 1e-6
    with torch.no_grad():
        for name, p in model.named_parameters():
            flat = p.view(-1)
            i = int(rng.integers(flat.numel()))
            orig = flat[i].item()
            flat[i] = orig + h
            up = weighted_velocity_loss(model, b).item()
            flat[i] = orig - h
            down = weighted_velocity_loss(model, b).item()
            flat[i] = orig
            fd, an = (up - down) / (2 * h), grads[name].view(-1)[i].item()
            # floor keeps roundoff of ~1e-10 from dominating near-zero entries
            assert abs(fd - an) <= 1e-4 * max(abs(fd), abs(an), 1e-5), name


def test_overfits_single_tuple():
    torch.manual_seed(0)
    data = single_tuple_set()
    model = FlowModel(LAYOUT, K, 0.2, Arch(2, 2, 32), NormStats(np.zeros(D), np.ones(D)), dtype=torch.float64, H=10)
    res = train(model, data, TrainConfig(steps=2000, lr=1e-3, weight_decay=0.0, batch_size=64),
                np.random.default_rng(1))
    assert np.mean(res.losses[-100:]) < 0.1 * np.mean(res.losses[:10])


def test_zero_learning_rate_leaves_parameters():
    model = tiny()
    before = {k: v.clone() for k, v in model.state_dict().items()}
    train(model, single_tuple_set(), TrainConfig(steps=5, lr=0.0, weight_decay=0.0), np.random.default_rng(0))
    for k, v in model.state_dict().items():
        assert torch.equal(v, before[k])


def test_training_is_reproducible():
    torch.set_num_threads(1)
    curves = []
    for _ in range(2):
        model = tiny(3)
        curves.append(train(model, single_tuple_set(), TrainConfig(steps=20, lr=1e-3),
                            np.random.default_rng(5)).losses)
    assert curves[0] == curves[1]


def test_empty_dataset_rejected():
    data = single_tuple_set()
    empty = TupleSet(LAYOUT, K, 0.2, data.cond[:0], data.residual[:0], data.weights[:0], data.clip_id[:0],
                     data.start[:0])
    with pytest.raises(ValueError):
        train(tiny(), empty, TrainConfig(steps=1), np.random.default_rng(0))


def test_checkpoint_round_trip(tmp_path):
    model = tiny()
    model.norm = NormStats(np.arange(D, dtype=float), np.ones(D) * 2)
    path = tmp_path / "m.pt"
    model.save(path, {"seed": 7})
    back = FlowModel.load(path)
    b = batch()
    torch.testing.assert_close(back(b.x0, b.t, b.cond), model(b.x0, b.t, b.cond), rtol=0, atol=0)
    np.testing.assert_array_equal(back.norm.mean, model.norm.mean)
    assert back.checkpoint_config == {"seed": 7} and back.arch == model.arch


def test_full_scale_architecture_builds():
    model = FlowModel(StateLayout(29, True), 8, 0.2, FULL_SCALE_ARCH, dtype=torch.float32)
    assert model.parameter_count() > 10 ** 7
    with pytest.raises(ValueError):
        Arch(2, 3, 64)
