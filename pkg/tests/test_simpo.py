from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import TINY, TINY_SPEC, tiny_adapter, tiny_model, tiny_sae
from fsrl.adapter import SteeringAdapter
from fsrl.autodiff import KinkError, finite_diff_check, no_grad
from fsrl.data import gen_preference_data, pad_batch, vocab_size
from fsrl.errors import FrozenParameterError
from fsrl.lm import FrozenLM, batch_avg_logprob
from fsrl.simpo import (
    SimPOConfig,
    evaluate_simpo,
    simpo_from_logprobs,
    simpo_loss,
    steering_objective,
    train_adapter,
    train_full_baseline,
)


def test_equal_logprobs_give_known_value():
    # -log sigmoid(-5) = log(1 + e^5)
    val = simpo_from_logprobs(np.array([-1.3]), np.array([-1.3]), 10.0, 5.0).item()
    assert val == pytest.approx(math.log1p(math.exp(5.0)), abs=1e-14)
    assert val == pytest.approx(5.00672, abs=5e-6)


def test_gap_of_gamma_over_beta_gives_ln2():
    val = simpo_from_logprobs(np.array([-1.0]), np.array([-1.5]), 10.0, 5.0).item()
    assert val == pytest.approx(math.log(2.0), abs=1e-12)


def test_default_config():
    cfg = SimPOConfig()
    assert cfg.beta == 10.0 and cfg.gamma_ratio == 0.5 and cfg.gamma == 5.0
    assert cfg.lr * cfg.baseline_lr_ratio < cfg.lr
    assert cfg.baseline_lr_ratio == pytest.approx(2e-7 / 5e-6)


def test_uniform_model_loss_is_independent_of_length():
    params = {k: v.data.copy() for k, v in tiny_model().params.items()}
    params["unembed.W_U"][:] = 0.0
    params["unembed.b_U"][:] = 0.0
    m = FrozenLM(TINY, params)
    ts = gen_preference_data(0, 8, TINY_SPEC)
    cfg = SimPOConfig()
    batch = pad_batch([s for t in ts for s in t.sequences()])
    with no_grad():
        avg = batch_avg_logprob(m, batch).data
    np.testing.assert_allclose(cfg.beta * avg, -cfg.beta * math.log(vocab_size()), rtol=1e-12)
    assert evaluate_simpo(m, ts, cfg) == pytest.approx(math.log1p(math.exp(cfg.gamma)), abs=1e-10)


@settings(max_examples=100, deadline=None)
@given(
    base=st.floats(-5, 0),
    gaps=st.lists(st.integers(-3000, 3000), min_size=2, max_size=8, unique=True),
)
def test_loss_positive_and_strictly_decreasing_in_gap(base, gaps):
    gaps = [g / 1000 for g in sorted(gaps)]
    losses = [simpo_from_logprobs(np.array([base + g]), np.array([base]), 10.0, 5.0).item() for g in gaps]
    assert all(v > 0 for v in losses)
    assert all(a > b for a, b in zip(losses, losses[1:]))


def test_empty_batch_rejected(model):
    with pytest.raises(ValueError):
        simpo_loss(model, [], SimPOConfig())


def test_steered_objective_gradients(model, triplets):
    rng = np.random.default_rng(0)
    sae = tiny_sae(1)
    cfg = SimPOConfig(alpha_steer=0.1)
    checked = 0
    while checked < 3:
        adapter = SteeringAdapter(
            rng.normal(size=(24, TINY.d_model)) / np.sqrt(TINY.d_model),
            rng.normal(scale=0.1, size=24),
            rng.uniform(0.0, 0.3, size=24),
        )
        batch = pad_batch([s for t in triplets[:2] for s in t.sequences()])
        with no_grad():
            z = adapter.preact(model.hook_activations(batch.tokens)).data[batch.valid]
        try:
            rep = finite_diff_check(
                lambda: steering_objective(model, sae, adapter, triplets[:2], cfg)[0],
                adapter.parameters(),
                h=1e-5,
                tol=1e-4,
                kink_margin=lambda: float(np.abs(np.abs(z) - adapter.theta.data).min()),
            )
        except KinkError:
            continue
        assert rep.passed, rep.max_rel_err
        checked += 1


def _tiny_setup():
    model = tiny_model(4)
    sae = tiny_sae(4)
    train = gen_preference_data(1, 48, TINY_SPEC)
    val = gen_preference_data(2, 16, TINY_SPEC)
    return model, sae, train, val


def test_train_adapter_improves_keeps_frozen_bytes_and_is_deterministic():
    model, sae, train, val = _tiny_setup()
    cfg = SimPOConfig(lr=2e-2, epochs=2, batch=8, alpha_steer=0.01)
    digests = model.digest(), sae.digest()
    a = train_adapter(model, sae, SteeringAdapter.init(TINY.d_model, 24, rng=np.random.default_rng(0)), train, val, cfg)
    b = train_adapter(model, sae, SteeringAdapter.init(TINY.d_model, 24, rng=np.random.default_rng(0)), train, val, cfg)
    assert (model.digest(), sae.digest()) == digests
    assert a.val_loss < a.initial_val_loss
    assert a.log == b.log
    assert set(a.log[0]) == {"step", "loss", "l0", "l1"}
    assert a.adapter.digest() == b.adapter.digest()


def test_penalty_reduces_steering_l0():
    model, sae, train, val = _tiny_setup()
    l0 = []
    for alpha in (0.0, 0.1):
        cfg = SimPOConfig(lr=2e-2, epochs=2, batch=8, alpha_steer=alpha)
        res = train_adapter(model, sae, SteeringAdapter.init(TINY.d_model, 24, rng=np.random.default_rng(0)), train, val, cfg)
        l0.append(res.mean_l0)
    assert l0[1] <= l0[0]


def test_zero_epochs_is_an_error_and_leaves_adapter_unchanged():
    model, sae, train, val = _tiny_setup()
    adapter = tiny_adapter()
    before = adapter.digest()
    with pytest.raises(ValueError):
        train_adapter(model, sae, adapter, train, val, SimPOConfig(epochs=0))
    assert adapter.digest() == before
    with pytest.raises(ValueError):
        train_full_baseline(model, train, val, SimPOConfig(epochs=0))


def test_train_adapter_requires_frozen_model_and_sae():
    _, sae, train, val = _tiny_setup()
    with pytest.raises(ValueError, match="frozen"):
        train_adapter(tiny_model(trainable=True), sae, tiny_adapter(), train, val, SimPOConfig())
    with pytest.raises(ValueError, match="frozen"):
        train_adapter(tiny_model(), tiny_sae(trainable=True), tiny_adapter(), train, val, SimPOConfig())


def test_mutating_frozen_model_is_detected(monkeypatch):
    model, sae, train, val = _tiny_setup()
    import fsrl.simpo as simpo_mod

    real = simpo_mod.steering_objective

    def tampering(m, *args):
        m.params["unembed.b_U"].data.flags.writeable = True
        m.params["unembed.b_U"].data[0] += 1.0
        return real(m, *args)

    monkeypatch.setattr(simpo_mod, "steering_objective", tampering)
    with pytest.raises(FrozenParameterError):
        train_adapter(model, sae, tiny_adapter(), train, val, SimPOConfig(epochs=1, batch=48))


def test_full_baseline_improves_and_leaves_original_untouched():
    model, _, train, val = _tiny_setup()
    before = model.digest()
    res = train_full_baseline(model, train, val, SimPOConfig(lr=5e-2, epochs=2, batch=8))
    assert model.digest() == before
    assert res.val_loss < res.initial_val_loss
    assert res.model.frozen and res.model.digest() != before


def test_config_validation():
    with pytest.raises(ValueError):
        SimPOConfig(beta=0).validate()
    with pytest.raises(ValueError):
        SimPOConfig(alpha_steer=-1).validate()
