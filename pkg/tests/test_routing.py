import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from padcl.encoders import EncoderConfig, init_encoders
from padcl.numcore import ParamView, ParameterStore
from padcl.prompting import PromptBank, forward
from padcl.routing import (
    PrototypeBank,
    RoutingError,
    build_prototypes,
    embed_for_routing,
    infer,
    route,
    route_batch,
)


def test_k1_is_mean():
    x = np.random.default_rng(0).normal(size=(30, 4))
    np.testing.assert_allclose(build_prototypes(x, 1, 0)[0], x.mean(0), atol=1e-12)


def test_k_equals_n_recovers_points():
    x = np.random.default_rng(1).normal(size=(6, 3))
    c = build_prototypes(x, 6, 3)
    assert sorted(map(tuple, c)) == sorted(map(tuple, x))


def test_two_separated_blobs():
    r = np.random.default_rng(2)
    n, sigma = 200, 0.1
    a = r.normal(0, sigma, (n, 2))
    b = r.normal(0, sigma, (n, 2)) + [10 * sigma * np.sqrt(2), 0]
    c = build_prototypes(np.concatenate([a, b]), 2, 0)
    c = c[np.argsort(c[:, 0])]
    assert np.linalg.norm(c[0] - a.mean(0)) <= 3 * sigma / np.sqrt(n)
    assert np.linalg.norm(c[1] - b.mean(0)) <= 3 * sigma / np.sqrt(n)


def test_too_few_distinct_points():
    with pytest.raises(RoutingError):
        build_prototypes(np.ones((10, 3)), 2, 0)


def test_deterministic_given_seed():
    x = np.random.default_rng(3).normal(size=(50, 5))
    assert build_prototypes(x, 4, 9).tobytes() == build_prototypes(x, 4, 9).tobytes()


def test_route_examples():
    r = np.random.default_rng(4)
    bank = PrototypeBank(3)
    for t in (1, 2, 3):
        bank.add(t, r.normal(size=(3, 4)))
    assert route(bank.centroids[2][1], bank) == 2
    single = PrototypeBank(3, {5: bank.centroids[1]})
    assert (route_batch(r.normal(size=(10, 4)), single) == 5).all()
    with pytest.raises(RoutingError):
        route(np.zeros(4), PrototypeBank(3))


def test_route_ties_go_to_lowest_domain():
    c = np.array([[1.0, 0.0]])
    assert route(np.array([1.0, 0.0]), {3: c, 2: c.copy()}) == 2


def test_bank_frozen():
    bank = PrototypeBank(2)
    bank.add(1, np.zeros((2, 3)))
    with pytest.raises(ValueError):
        bank.add(1, np.ones((2, 3)))
    with pytest.raises(ValueError):
        bank.centroids[1][0, 0] = 1.0
    with pytest.raises(ValueError):
        bank.add(2, np.zeros((3, 3)))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_euclidean_equals_max_cosine_on_unit_vectors(seed):
    r = np.random.default_rng(seed)
    unit = lambda a: a / np.linalg.norm(a, axis=-1, keepdims=True)  # noqa: E731
    table = {t: unit(r.normal(size=(3, 6))) for t in (1, 2, 3)}
    f = unit(r.normal(size=(20, 6)))
    allc = np.concatenate([table[t] for t in (1, 2, 3)])
    by_cos = np.repeat([1, 2, 3], 3)[(f @ allc.T).argmax(1)]
    routed = route_batch(f, table)
    assert (routed == by_cos).all()
    assert (route_batch(f, table) == routed).all()


# ---------------------------------------------------------------- infer

@pytest.fixture(scope="module")
def model():
    cfg = EncoderConfig(depth=1)
    store = ParameterStore(np.float64)
    rng = np.random.default_rng(0)
    init_encoders(store, cfg, 4, rng)
    bank = PromptBank.create(store, 4, 4, cfg.C, rng)
    bank.register(1, rng)
    return cfg, store, bank


def test_embedding_is_normalized(model):
    cfg, store, _ = model
    x = np.random.default_rng(1).uniform(size=(5, 1, 32, 32))
    f = embed_for_routing(store, cfg, x)
    np.testing.assert_allclose(np.linalg.norm(f, axis=1), 1.0, atol=1e-12)


def test_single_domain_matches_training_forward(model):
    cfg, store, bank = model
    x = np.random.default_rng(2).uniform(size=(3, 1, 32, 32))
    protos = PrototypeBank(1, {1: embed_for_routing(store, cfg, x[:1])})
    routed, probs = infer(x, store, cfg, bank, protos)
    logits = forward(ParamView(store), cfg, bank, 1, x).data
    e = np.exp(logits - logits.max(1, keepdims=True))
    assert (routed == 1).all()
    assert probs.tobytes() == (e / e.sum(1, keepdims=True)).tobytes()


def test_identical_prompt_banks_make_routing_irrelevant(model):
    cfg, store, bank = model
    store = store.copy()
    bank = PromptBank.from_meta(store, bank.to_meta())
    bank.register(2, np.random.default_rng(3))
    for name in ("prompt.visual", "prompt.ds", "alpha"):
        store[f"{name}.2"] = store[f"{name}.1"]
    x = np.random.default_rng(4).uniform(size=(4, 1, 32, 32))
    f = embed_for_routing(store, cfg, x)
    protos = PrototypeBank(2, {1: f[:2], 2: f[2:]})
    routed, probs = infer(x, store, cfg, bank, protos)
    assert set(routed.tolist()) == {1, 2}
    _, forced = infer(x, store, cfg, bank, protos, force_domain=1)
    np.testing.assert_array_equal(probs, forced)
