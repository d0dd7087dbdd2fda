import numpy as np
import pytest
import torch

from uvector.embedder import (EmbedderNet, NetConfig, NonFiniteLossError, TrainConfig, adam_update, embed,
                              euclidean, forward, gradient_errors, grad_check, init_net, init_optimizer,
                              load_checkpoint, pairwise_loss, pairwise_step, save_checkpoint,
                              select_semi_hard, siamese_distance, thresholded_relu, triplet_loss,
                              triplet_step)

SHAPE = (16, 20)


def small_net(seed=0, dtype=torch.float64, **kw):
    kw.setdefault("channels", (3, 4))
    kw.setdefault("first_stride", 1)
    kw.setdefault("embed_dim", 4)
    net = init_net(seed, input_shape=SHAPE, **kw)
    return net.to(dtype)


def pairs(n, seed=0, dtype=np.float64):
    rng = np.random.default_rng(seed)
    return rng.standard_normal((n, *SHAPE)).astype(dtype), rng.standard_normal((n, *SHAPE)).astype(dtype)


def test_default_net_maps_feature_maps_to_12d():
    net = init_net(0)
    x = np.random.default_rng(0).standard_normal((3, 100, 91)).astype(np.float32)
    assert forward(net, x).shape == (3, 12)
    assert forward(net, x[0]).shape == (12,)
    np.testing.assert_allclose(embed(net, x, chunk=2), forward(net, x), rtol=1e-5, atol=1e-7)


def test_init_is_seeded():
    a, b = init_net(3), init_net(3)
    for p, q in zip(a.parameters(), b.parameters()):
        assert torch.equal(p, q)
    assert not torch.equal(next(init_net(4).parameters()), next(a.parameters()))


def test_shape_mismatch_is_an_error():
    with pytest.raises(ValueError):
        forward(init_net(0), np.zeros((2, 100, 90), dtype=np.float32))


def test_normalized_outputs_have_unit_norm():
    net = small_net(normalize=True)
    e = forward(net, pairs(5)[0])
    np.testing.assert_allclose(np.linalg.norm(e, axis=1), 1.0, atol=1e-12)


def test_thresholded_relu():
    assert torch.isnan(thresholded_relu(torch.tensor([np.nan]), 1.0)).all()
    assert thresholded_relu(0.3, 1.0) == 0.3
    assert thresholded_relu(1.7, 1.0) == 1.0
    x = torch.tensor([0.0, 0.5, 1.0, 2.0])
    np.testing.assert_array_equal(thresholded_relu(x, 1.0).numpy(), [0.0, 0.5, 1.0, 1.0])


def test_euclidean_zero_for_equal_rows_with_zero_gradient():
    a = torch.tensor([[1.0, 2.0], [0.0, 0.0]], dtype=torch.float64, requires_grad=True)
    b = torch.tensor([[1.0, 2.0], [3.0, 4.0]], dtype=torch.float64)
    d = euclidean(a, b)
    np.testing.assert_array_equal(d.detach().numpy(), [0.0, 5.0])
    d[0].backward()
    assert torch.all(a.grad == 0)


def test_siamese_distance_of_identical_inputs_is_zero():
    net = small_net()
    x, _ = pairs(3)
    assert torch.all(siamese_distance(net, x, x) == 0)


def test_grad_check_each_layer_type():
    # head gain 1 spreads distances around alpha so that both sides of the clamp occur
    net = small_net(seed=1, head_gain=1.0)
    left, right = pairs(6, seed=2)
    with torch.no_grad():
        d = euclidean(net(torch.from_numpy(left)), net(torch.from_numpy(right))).numpy()
    alpha = float(np.median(d))
    target = np.array([0, 0, 0, alpha, alpha, alpha])
    assert np.any(d >= alpha) and np.any(d < alpha)
    errs = gradient_errors(net, lambda n: pairwise_loss(n, left, right, target, alpha), eps=1e-4)
    assert set(errs) == {"body.0.weight", "body.0.bias", "body.3.weight", "body.3.bias",
                         "head.weight", "head.bias"}
    for name, e in errs.items():
        assert e < 1e-3, (name, e)


def test_grad_check_pool_only_path():
    # one conv block with stride 1: gradients of conv weights pass through the pool
    net = small_net(seed=5, channels=(2,), head_gain=1.0)
    left, right = pairs(4, seed=3)
    assert grad_check(net, left, right, np.array([0.0, 0.0, 5.0, 5.0]), alpha=5.0) < 1e-3


def test_grad_check_linear_net_is_near_exact():
    # with can-link targets the loss is the mean squared distance, which is
    # exactly quadratic in the weights, so central differences are exact up to rounding
    net = small_net(seed=2, channels=(), head_gain=1.0)
    left, right = pairs(4, seed=4)
    assert grad_check(net, left, right, np.zeros(4), alpha=1e6) < 1e-6
    pairwise_loss(net, left, right, np.zeros(4), 1e6).backward()
    # the bias cancels inside the pair difference
    assert torch.all(net.head.bias.grad == 0)


def test_clamped_pairs_have_exactly_zero_gradient():
    net = small_net(seed=0, head_gain=100.0)
    left, right = pairs(8, seed=6)
    with torch.no_grad():
        assert torch.all(euclidean(net(torch.from_numpy(left)), net(torch.from_numpy(right))) > 1.0)
    loss = pairwise_loss(net, left, right, np.zeros(8), alpha=1.0)
    loss.backward()
    for p in net.parameters():
        assert torch.all(p.grad == 0)


def test_distance_range_property():
    rng = np.random.default_rng(0)
    draws = 0
    for trial in range(100):
        net = small_net(seed=trial, head_gain=float(10 ** rng.uniform(-3, 2)), dtype=torch.float32)
        x = rng.standard_normal((10, 2, *SHAPE)).astype(np.float32) * rng.uniform(0.1, 10)
        for a_i in range(10):
            alpha = float(10 ** rng.uniform(-2, 1))
            d = siamese_distance(net, x[:, 0], x[:, 1], alpha).detach().numpy()
            assert np.all((d >= 0) & (d <= alpha))
            draws += len(d)
    assert draws == 10_000


def test_semi_hard_selection_four_points():
    d_ap = np.array([1.0])
    valid = np.ones((1, 4), dtype=bool)
    # 0.5 hard, 1.15 and 1.1 semi-hard, 2.0 easy: the closest semi-hard wins
    assert select_semi_hard(d_ap, np.array([[0.5, 1.15, 1.1, 2.0]]), valid, 0.2)[0] == 2
    # without semi-hard candidates the hardest valid one is used
    assert select_semi_hard(d_ap, np.array([[0.8, 0.5, 2.0, 3.0]]), valid, 0.2)[0] == 1
    # invalid candidates are never picked
    mask = np.array([[False, True, True, True]])
    assert select_semi_hard(d_ap, np.array([[1.1, 0.5, 1.3, 3.0]]), mask, 0.5)[0] == 2


def test_triplet_loss_on_a_line():
    t = lambda *v: torch.tensor(v, dtype=torch.float64)[:, None]
    anchor, positive = t(0.0), t(1.0)
    pool = t(0.0, 1.0, 1.1, 3.0)
    loss = triplet_loss(anchor, positive, pool, np.array([0]), np.array([0, 0, 1, 1]), margin=0.2)
    assert loss.item() == pytest.approx(0.1)


def test_adam_matches_torch():
    torch.manual_seed(0)
    p_ours = [torch.randn(3, 4, dtype=torch.float64), torch.randn(5, dtype=torch.float64)]
    p_ref = [p.clone().requires_grad_(True) for p in p_ours]
    ref = torch.optim.Adam(p_ref, lr=5e-4, betas=(0.9, 0.999), eps=1e-8)
    state = type(init_optimizer(torch.nn.Linear(1, 1)))([torch.zeros_like(p) for p in p_ours],
                                                         [torch.zeros_like(p) for p in p_ours])
    for step in range(25):
        grads = [torch.randn_like(p) * (step + 1) for p in p_ours]
        adam_update(p_ours, grads, state, 5e-4)
        for p, g in zip(p_ref, grads):
            p.grad = g.clone()
        ref.step()
    for a, b in zip(p_ours, p_ref):
        np.testing.assert_allclose(a.numpy(), b.detach().numpy(), rtol=0, atol=1e-12)


def test_adam_first_step_closed_form():
    p = [torch.tensor([1.0, -2.0, 0.5], dtype=torch.float64)]
    g = torch.tensor([0.3, -4.0, 0.0], dtype=torch.float64)
    state = init_optimizer(torch.nn.Linear(3, 1, bias=False).double())
    state.m, state.v = [torch.zeros(3, dtype=torch.float64)], [torch.zeros(3, dtype=torch.float64)]
    adam_update(p, [g], state, lr=0.01)
    expected = np.array([1.0, -2.0, 0.5]) - 0.01 * g.numpy() / (np.abs(g.numpy()) + 1e-8)
    np.testing.assert_allclose(p[0].numpy(), expected, rtol=0, atol=1e-15)
    assert state.step == 1


def test_adam_rejects_mismatched_state():
    state = init_optimizer(torch.nn.Linear(3, 1))
    with pytest.raises(ValueError):
        adam_update([torch.zeros(4)], [torch.zeros(4)], state, 1e-3)


def test_pairwise_step_is_deterministic_and_learns():
    left, right = pairs(8, seed=7, dtype=np.float32)
    target = np.array([0.0] * 4 + [1.0] * 4)
    cfg = TrainConfig(batch_size=8, learning_rate=1e-2)
    runs = []
    for _ in range(2):
        net = small_net(seed=3, dtype=torch.float32)
        opt = init_optimizer(net)
        losses = [pairwise_step(net, opt, left, right, target, cfg)[2] for _ in range(40)]
        runs.append(losses)
    assert runs[0] == runs[1]
    assert runs[0][-1] < 0.5 * runs[0][0]


def test_triplet_step_runs_with_unit_norm():
    rng = np.random.default_rng(0)
    a, p, n = (rng.standard_normal((6, *SHAPE)).astype(np.float32) for _ in range(3))
    labels = (np.arange(6), np.arange(6), np.arange(6) + 10)
    net = small_net(dtype=torch.float32, normalize=True)
    opt = init_optimizer(net)
    _, _, loss = triplet_step(net, opt, a, p, n, labels, TrainConfig(mode="triplet", batch_size=6))
    assert 0 <= loss <= 2.2 and opt.step == 1


def test_non_finite_loss_is_reported():
    net = small_net(dtype=torch.float32)
    left, right = pairs(2, dtype=np.float32)
    left[0, 0, 0] = np.nan
    with pytest.raises(NonFiniteLossError, match="step 1"):
        pairwise_step(net, init_optimizer(net), left, right, np.array([0.0, 1.0]), TrainConfig(batch_size=2))


@pytest.mark.parametrize("kw", [dict(alpha=0), dict(mode="contrastive"), dict(batch_size=3),
                                dict(learning_rate=-1), dict(eval_every=0)])
def test_train_config_validation(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw)


def test_checkpoint_round_trip(tmp_path):
    net = small_net(dtype=torch.float32)
    opt = init_optimizer(net)
    left, right = pairs(4, dtype=np.float32)
    cfg = TrainConfig(batch_size=4, mode="pairwise")
    pairwise_step(net, opt, left, right, np.array([0.0, 0.0, 1.0, 1.0]), cfg)
    save_checkpoint(tmp_path / "c.npz", net, opt, cfg, extra={"seed": 3})
    net2, opt2, cfg2, extra = load_checkpoint(tmp_path / "c.npz")
    assert cfg2 == cfg and extra == {"seed": 3} and opt2.step == 1
    np.testing.assert_array_equal(forward(net, left), forward(net2, left))
    for a, b in zip(opt.v, opt2.v):
        assert torch.equal(a, b)


def test_net_too_small_for_its_blocks():
    with pytest.raises(ValueError):
        EmbedderNet(NetConfig(input_shape=(4, 4), channels=(2, 2, 2)))
