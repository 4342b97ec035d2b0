import math

import numpy as np
import pytest

from padcl import numcore as nc
from padcl.encoders import EncoderConfig, init_encoders
from padcl.numcore import ParamView, ParameterStore, Tape, Tensor
from padcl.prompting import (
    FAMILIES,
    PromptBank,
    aggregate,
    aggregation_weights,
    build_families,
    family_logit,
    forward,
    map_loss,
    text_features,
)

N_CTX = 16


@pytest.fixture()
def setup():
    cfg = EncoderConfig()
    store = ParameterStore(np.float64)
    rng = np.random.default_rng(0)
    init_encoders(store, cfg, 16, rng)
    bank = PromptBank.create(store, 16, N_CTX, cfg.C, rng)
    bank.register(1, rng)
    bank.register(2, rng, warm_start=False)
    return cfg, store, bank


def test_family_sequence_lengths(setup):
    cfg, store, bank = setup
    fams = build_families(ParamView(store), bank, 1)
    assert fams["da"].shape == (2, N_CTX + 3, cfg.C)
    assert fams["ds"].shape == (2, N_CTX + 3, cfg.C)
    assert fams["mix"].shape == (2, 2 * N_CTX + 3, cfg.C)
    assert fams["fixed"].shape == (2, 9, cfg.C)


def test_fixed_family_same_for_all_domains(setup):
    _, store, bank = setup
    pv = ParamView(store)
    a = build_families(pv, bank, 1)["fixed"].data
    b = build_families(pv, bank, 2)["fixed"].data
    assert a.tobytes() == b.tobytes()


def test_mix_with_zero_da_is_ds_with_zero_prefix(setup):
    cfg, store, bank = setup
    store["prompt.da"] = np.zeros((N_CTX, cfg.C))
    fams = build_families(ParamView(store), bank, 1)
    mix, ds = fams["mix"].data, fams["ds"].data
    np.testing.assert_array_equal(mix[:, 1:1 + N_CTX], 0.0)
    np.testing.assert_array_equal(mix[:, :1], ds[:, :1])
    np.testing.assert_array_equal(mix[:, 1 + N_CTX:], ds[:, 1:])


def test_unknown_domain(setup):
    _, store, bank = setup
    with pytest.raises(KeyError):
        build_families(ParamView(store), bank, 7)


def test_family_logit_examples():
    scale = Tensor(np.asarray(math.log(100.0)))
    v = np.random.default_rng(1).normal(size=64)
    out = family_logit(Tensor(v), Tensor(np.stack([v, v])), scale).data
    np.testing.assert_allclose(out, [100.0, 100.0], rtol=1e-12)
    e0, e1 = np.eye(64)[0], np.eye(64)[1]
    assert family_logit(Tensor(e0), Tensor(np.stack([e1, e1])), scale).data.tolist() == [0.0, 0.0]


def test_family_logit_matches_direct_oracle():
    r = np.random.default_rng(2)
    f, t = r.normal(size=64), r.normal(size=(2, 64))
    out = family_logit(Tensor(f), Tensor(t), Tensor(np.asarray(0.7))).data
    expect = [math.exp(0.7) * float(np.dot(f / np.linalg.norm(f), row / np.linalg.norm(row))) for row in t]
    np.testing.assert_allclose(out, expect, atol=1e-6)


def test_family_logit_zero_input():
    with pytest.raises(nc.NumericalError):
        family_logit(Tensor(np.zeros(4)), Tensor(np.ones((2, 4))), Tensor(np.asarray(0.0)))


def _logits(seed):
    r = np.random.default_rng(seed)
    return {k: Tensor(r.normal(size=2)) for k in FAMILIES}


def test_aggregate_uniform_alpha_is_mean():
    lg = _logits(3)
    out = aggregate(lg, Tensor(np.zeros(4))).data
    np.testing.assert_allclose(out, np.mean([lg[k].data for k in FAMILIES], axis=0), atol=1e-15)


def test_aggregate_saturated_alpha():
    lg = _logits(4)
    out = aggregate(lg, Tensor(np.array([30.0, -30.0, -30.0, -30.0]))).data
    np.testing.assert_allclose(out, lg["da"].data, atol=1e-9)


def test_aggregate_matches_oracle():
    r = np.random.default_rng(5)
    lg = _logits(6)
    alpha = r.normal(size=4)
    w = np.exp(alpha) / np.exp(alpha).sum()
    expect = sum(w[i] * lg[k].data for i, k in enumerate(FAMILIES))
    np.testing.assert_allclose(aggregate(lg, Tensor(alpha)).data, expect, atol=1e-6)


def test_weights_on_simplex():
    for seed in range(20):
        w = aggregation_weights(Tensor(np.random.default_rng(seed).normal(0, 5, 4))).data
        assert (w >= 0).all() and abs(w.sum() - 1) < 1e-7


def test_identical_family_features_make_alpha_irrelevant():
    v = Tensor(np.random.default_rng(7).normal(size=2))
    lg = {k: v for k in FAMILIES}
    a = aggregate(lg, Tensor(np.array([3.0, -1.0, 0.5, 2.0]))).data
    b = aggregate(lg, Tensor(np.zeros(4))).data
    np.testing.assert_allclose(a, b, atol=1e-15)
    assert a.argmax() == b.argmax()


def test_map_loss_examples():
    assert abs(map_loss(Tensor(np.zeros(2)), 0).item() - math.log(2)) < 1e-12
    expect = -math.log(1 / (1 + math.exp(-20)))
    assert abs(map_loss(Tensor(np.array([10.0, -10.0])), 0).item() - expect) < 1e-6 * expect
    assert abs(expect - 2.061e-9) < 1e-12
    z = np.array([0.3, -1.2])
    assert map_loss(Tensor(z), 0).item() == map_loss(Tensor(z[::-1].copy()), 1).item()
    with pytest.raises(ValueError):
        map_loss(Tensor(z), 2)


def test_frozen_prompts_get_no_gradient(setup):
    cfg, store, bank = setup
    bank.freeze(1)
    trainable = list(store.penalizable) + bank.trainable_names(2)
    pv = ParamView(store, trainable)
    x = np.random.default_rng(8).uniform(size=(2, 1, 32, 32))
    with Tape() as tape:
        loss = map_loss(forward(pv, cfg, bank, 2, x), [0, 1])
        grads = tape.backward(loss)
    for name in ("prompt.visual.1", "prompt.ds.1", "alpha.1"):
        assert name not in grads
    assert np.any(grads["prompt.visual.2"]) and np.any(grads["alpha.2"])
    with pytest.raises(ValueError):
        bank.trainable_names(1)


def test_logit_scale_gradient_matches_fd(setup):
    cfg, store, bank = setup
    x = np.random.default_rng(9).uniform(size=(2, 1, 32, 32))

    def loss_fn(st):
        return map_loss(forward(ParamView(st), cfg, bank, 1, x), [1, 0])

    i = store.offset("logit_scale")
    assert nc.finite_diff_check(loss_fn, store, 1e-5, [i]) < 1e-4


def test_text_features_shape(setup):
    cfg, store, bank = setup
    feats = text_features(ParamView(store), cfg, bank, 1)
    assert list(feats) == list(FAMILIES)
    assert all(f.shape == (2, cfg.C_out) for f in feats.values())
