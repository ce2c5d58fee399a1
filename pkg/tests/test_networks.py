import numpy as np
import pytest
import torch

from bwuda.data import LabelScaler
from bwuda.networks import (
    FeatureExtractorSpec,
    HeadSpec,
    SpecError,
    extract,
    init_model,
    latents,
    load_checkpoint,
    predict,
    predict_physical,
    save_checkpoint,
)

MICRO = FeatureExtractorSpec(input_resolution=8, conv_channels=(3, 3, 3, 3, 3), pool_positions=(0, 1), latent_dim=4)


def _params(m):
    return [p.detach().clone() for p in m.parameters()]


def test_same_seed_same_parameters_and_different_seed_differs():
    a, b, c = init_model(seed=0), init_model(seed=0), init_model(seed=1)
    assert all(torch.equal(p, q) for p, q in zip(_params(a), _params(b)))
    assert any(not torch.equal(p, q) for p, q in zip(_params(a), _params(c)))


def test_h_and_hhat_start_apart():
    m = init_model(seed=0)
    assert any(not torch.equal(p, q) for p, q in zip(m.h.parameters(), m.hhat.parameters()))
    assert m.h.fc1.weight.shape == m.hhat.fc1.weight.shape


def test_spec_validation():
    with pytest.raises(SpecError):
        FeatureExtractorSpec(conv_channels=(4, 4, 4, 4))
    with pytest.raises(SpecError):
        FeatureExtractorSpec(pool_positions=(1, 1))
    with pytest.raises(SpecError):
        FeatureExtractorSpec(latent_dim=0)
    with pytest.raises(SpecError):
        HeadSpec(output_dim=3)
    with pytest.raises(SpecError):
        init_model(FeatureExtractorSpec(), HeadSpec(input_dim=30))


def test_paper_shape_contract_batch_32_latent_30():
    m = init_model(seed=0)
    z = extract(m, np.zeros((32, 16, 16, 16), dtype=np.uint8))
    assert z.shape == (32, 30)
    assert m.h.fc1.in_features == 31
    out = m(torch.zeros(32, 1, 16, 16, 16), torch.zeros(32, 1))
    assert all(torch.isfinite(o).all() for o in out)


def test_wrong_resolution_is_rejected():
    m = init_model(seed=0)
    with pytest.raises((SpecError, RuntimeError)):
        extract(m, np.zeros((2, 8, 8, 8)))


def test_identical_inputs_give_identical_rows_in_eval_mode():
    m = init_model(seed=2).eval()
    v = (np.random.default_rng(0).random((1, 16, 16, 16)) < 0.4).astype(np.uint8)
    z = extract(m, np.repeat(v, 3, axis=0))
    assert torch.equal(z[0], z[1]) and torch.equal(z[1], z[2])


def test_training_mode_uses_batch_statistics():
    m = init_model(seed=2)
    gen = np.random.default_rng(1)
    v = (gen.random((4, 16, 16, 16)) < 0.4).astype(np.uint8)
    m.train()
    a = extract(m, v)[0]
    b = extract(m, np.concatenate([v[:1], 1 - v[1:]]))[0]
    assert not torch.allclose(a, b)
    m.eval()
    assert torch.equal(extract(m, v)[0], extract(m, np.concatenate([v[:1], 1 - v[1:]]))[0])


def test_zero_head_gives_zero_output_and_batch_rows_are_independent():
    m = init_model(seed=0)
    for p in m.h.parameters():
        torch.nn.init.zeros_(p)
    z = torch.randn(8, 30)
    mass = torch.randn(8, 1)
    assert torch.equal(predict(m.h, z, mass), torch.zeros(8, 4))
    m2 = init_model(seed=0)
    full = predict(m2.h, z, mass)
    assert torch.allclose(predict(m2.h, z[3:4], mass[3:4]), full[3:4], rtol=0, atol=1e-6)
    with pytest.raises(SpecError):
        predict(m2.h, z, mass[:5])


def _fd(fn, params, step=1e-4, tol=1e-3, floor=1e-6, every=1):
    grads = torch.autograd.grad(fn(), params)
    n = 0
    for p, g in zip(params, grads):
        flat, gf = p.data.view(-1), g.reshape(-1)
        for i in range(0, flat.numel(), every):
            gi = float(gf[i])
            if abs(gi) < floor:
                continue
            o = float(flat[i])
            flat[i] = o + step
            up = float(fn())
            flat[i] = o - step
            dn = float(fn())
            flat[i] = o
            assert abs((up - dn) / (2 * step) - gi) <= tol * abs(gi)
            n += 1
    assert n > 0


def test_extractor_gradient_matches_finite_differences():
    m = init_model(MICRO, HeadSpec(input_dim=5, hidden_dim=4), seed=1).double().eval()
    v = torch.as_tensor((np.random.default_rng(3).random((3, 1, 8, 8, 8)) < 0.5).astype(float))
    w = torch.as_tensor(np.random.default_rng(4).normal(size=(3, 4)))

    def fn():
        return (m.theta(v) * w).sum()

    _fd(fn, list(m.theta.parameters()), every=3)


def test_head_gradient_matches_finite_differences():
    m = init_model(MICRO, HeadSpec(input_dim=5, hidden_dim=6), seed=1).double()
    z = torch.as_tensor(np.random.default_rng(5).normal(size=(7, 4)))
    mass = torch.as_tensor(np.random.default_rng(6).normal(size=(7, 1)))

    def fn():
        return (predict(m.h, z, mass) ** 2).sum()

    _fd(fn, list(m.h.parameters()))


def test_checkpoint_round_trip(tmp_path):
    m = init_model(seed=4)
    m.label_scaler = LabelScaler((1.0, 2.0, 3.0, 300.0), (10.0, 20.0, 30.0, 50.0))
    m.mass_mean, m.mass_std = 528.0, 15.0
    # move batch-norm running stats away from their init
    m.train()
    extract(m, (np.random.default_rng(0).random((5, 16, 16, 16)) < 0.3).astype(np.uint8))
    save_checkpoint(m, tmp_path / "ck", extra={"target": "rim2"})
    back, extra = load_checkpoint(tmp_path / "ck")
    assert extra == {"target": "rim2"}
    for (k, a), (_, b) in zip(m.state_dict().items(), back.state_dict().items()):
        assert torch.equal(a, b), k
    v = (np.random.default_rng(1).random((4, 16, 16, 16)) < 0.3).astype(np.uint8)
    masses = np.array([500.0, 510.0, 530.0, 550.0])
    assert np.array_equal(predict_physical(m, v, masses), predict_physical(back, v, masses))
    assert np.array_equal(latents(m, v), latents(back, v))


def test_predict_physical_needs_a_scaler():
    with pytest.raises(SpecError):
        predict_physical(init_model(seed=0), np.zeros((1, 16, 16, 16)), np.array([500.0]))
