import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from orientgate import tensor as tc
from orientgate.data import Dataset, generate_dataset
from orientgate.policy import ACTPolicy, ModelConfig
from orientgate.tensor import Tensor
from orientgate.train import TrainConfig, check_compatible, holdout_l1, kl_divergence, loss, train


@pytest.fixture(scope="module")
def toy():
    return generate_dataset([0, 45], 2, 0.01, 0)


def test_kl_closed_form():
    kl = kl_divergence(Tensor(np.ones((1, 16))), Tensor(np.zeros((1, 16))))
    assert abs(float(kl.data) - 8.0) <= 1e-6


def test_loss_zero_when_exact():
    gt = np.random.default_rng(0).standard_normal((2, 16, 4)).astype(np.float32)
    total, l1, kl = loss(Tensor(gt), gt, Tensor(np.zeros((2, 16))), Tensor(np.zeros((2, 16))), 10.0)
    assert float(total.data) == 0.0 and l1 == 0.0 and kl == 0.0


def test_loss_constant_offset():
    gt = np.random.default_rng(1).standard_normal((3, 16, 4))
    total, _, _ = loss(Tensor(gt - 0.37), gt, Tensor(np.ones((3, 16))), Tensor(np.ones((3, 16))), 0.0)
    assert float(total.data) == pytest.approx(0.37, abs=1e-12)


def test_loss_shape_mismatch():
    with pytest.raises(tc.ShapeError):
        loss(Tensor(np.zeros((2, 16, 4))), np.zeros((2, 15, 4)), Tensor(np.zeros((2, 4))), Tensor(np.zeros((2, 4))))


def test_loss_nonfinite():
    with pytest.raises(tc.NonFiniteError):
        loss(Tensor(np.zeros((1, 2, 4))), np.full((1, 2, 4), np.inf), Tensor(np.zeros((1, 4))),
             Tensor(np.zeros((1, 4))))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.floats(0.1, 5.0))
def test_kl_nonnegative(seed, scale):
    r = np.random.default_rng(seed)
    kl = kl_divergence(Tensor(r.standard_normal((4, 16)) * scale), Tensor(r.standard_normal((4, 16)) * scale))
    assert float(kl.data) >= -1e-9


def test_kl_gradient_finite_difference():
    r = np.random.default_rng(2)
    mu = Tensor(r.standard_normal((3, 5)), requires_grad=True)
    lv = Tensor(r.standard_normal((3, 5)) * 0.5, requires_grad=True)
    assert max(tc.gradcheck(lambda: kl_divergence(mu, lv), [mu, lv], h=1e-5)) <= 1e-3


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    with pytest.raises(ValueError):
        TrainConfig(batch=0)
    with pytest.raises(ValueError):
        TrainConfig(beta_kl=-1)
    with pytest.raises(ValueError):
        TrainConfig(variant="nope")
    c = TrainConfig(seed=4, max_steps=9, variant="baseline")
    assert TrainConfig.from_kv({k: str(v) for k, v in c.to_kv().items()}) == c


def test_incompatible_chunk_rejected(toy):
    with pytest.raises(ValueError, match="chunk"):
        check_compatible(ACTPolicy(ModelConfig(chunk=8)), toy)
    with pytest.raises(ValueError, match="chunk"):
        train(TrainConfig(max_steps=1), toy, model_config=ModelConfig(chunk=8))


def test_empty_dataset_rejected():
    with pytest.raises(ValueError):
        train(TrainConfig(max_steps=1), Dataset([]))


def test_first_losses_deterministic(toy):
    _, a = train(TrainConfig(seed=0, max_steps=10), toy)
    _, b = train(TrainConfig(seed=0, max_steps=10), toy)
    assert all(abs(x[1] - y[1]) <= 1e-9 for x, y in zip(a, b))
    _, c = train(TrainConfig(seed=1, max_steps=10), toy)
    assert any(x[1] != y[1] for x, y in zip(a, c))


def test_log_and_checkpoint(tmp_path, toy):
    log, ckpt = tmp_path / "t.log", tmp_path / "t.ogck"
    model, hist = train(TrainConfig(variant="baseline", max_steps=5), toy, toy, log_path=log, ckpt_path=ckpt)
    lines = log.read_text().splitlines()
    steps = [ln for ln in lines if not ln.startswith("#")]
    assert len(steps) == 5 and len(steps[0].split()) == 4
    assert any("holdout_l1" in ln for ln in lines if ln.startswith("#"))
    loaded, meta = ACTPolicy.load(ckpt)
    assert meta["train.variant"] == "baseline" and meta["model.variant"] == "baseline"
    assert meta["train.angles"] == "0,45"
    for name, p in model.store:
        np.testing.assert_array_equal(loaded.store[name].data, p.data)


def test_holdout_l1_nonnegative(toy):
    assert holdout_l1(ACTPolicy(ModelConfig(variant="baseline")), Dataset(toy.episodes[:1])) > 0


@pytest.mark.parametrize("variant", ["baseline", "gated"])
def test_loss_decreases_over_first_100_steps(toy, variant):
    _, hist = train(TrainConfig(variant=variant, max_steps=100), toy)
    l1 = [h[2] for h in hist]
    assert np.mean(l1[-10:]) < 0.5 * np.mean(l1[:10])


@pytest.mark.parametrize("variant", ["baseline", "gated"])
def test_overfit_smoke(toy, variant):
    _, hist = train(TrainConfig(variant=variant, max_steps=300), toy)
    l1 = [h[2] for h in hist]
    assert l1[-1] <= 0.1 * l1[0]
