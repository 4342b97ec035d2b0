import numpy as np
import pytest

from padcl import numcore as nc
from padcl.encoders import (
    ConfigError,
    EncoderConfig,
    TokenTable,
    encode_image,
    encode_text,
    init_encoders,
    tokenize_fixed,
)
from padcl.numcore import ParamView, ParameterStore, Tensor

L_V = 16


@pytest.fixture(scope="module")
def model():
    cfg = EncoderConfig()
    store = ParameterStore(np.float64)
    init_encoders(store, cfg, L_V, np.random.default_rng(0))
    return cfg, store


def image(seed=0):
    return np.random.default_rng(seed).uniform(size=(1, 32, 32))


def test_config_invariants():
    EncoderConfig().validate(16, 16)
    with pytest.raises(ConfigError):
        EncoderConfig(C=65).validate()
    with pytest.raises(ConfigError):
        EncoderConfig(patch=7).validate()
    with pytest.raises(ConfigError):
        EncoderConfig(max_seq=34).validate(16, 16)


def test_image_output_shape(model):
    cfg, store = model
    pv = ParamView(store)
    assert encode_image(pv, cfg, image()).shape == (cfg.C_out,)
    assert encode_image(pv, cfg, np.stack([image(0), image(1)])).shape == (2, cfg.C_out)


def test_prompt_free_sequence_length(model):
    cfg, store = model
    pv = ParamView(store)
    with nc.Tape() as tape:
        encode_image(pv, cfg, image())
    concat = [n for n in tape.nodes if n.data.ndim == 3 and n.shape[1] in (1 + cfg.n_patches, 1 + L_V + cfg.n_patches)]
    assert concat[0].shape[1] == 1 + cfg.n_patches


def test_image_deterministic(model):
    cfg, store = model
    pv = ParamView(store)
    dv = Tensor(np.random.default_rng(3).normal(0, 0.02, (L_V, cfg.C)))
    a = encode_image(pv, cfg, image(), dv).data
    b = encode_image(pv, cfg, image(), dv).data
    assert a.tobytes() == b.tobytes()


def test_visual_prompt_is_live(model):
    cfg, store = model
    pv = ParamView(store)
    r = np.random.default_rng(4)
    a = encode_image(pv, cfg, image(), Tensor(r.normal(0, 0.5, (L_V, cfg.C)))).data
    b = encode_image(pv, cfg, image(), Tensor(r.normal(0, 0.5, (L_V, cfg.C)))).data
    assert not np.allclose(a, b)


def test_bad_prompt_and_image_shapes(model):
    cfg, store = model
    pv = ParamView(store)
    with pytest.raises(nc.ShapeError):
        encode_image(pv, cfg, image(), Tensor(np.zeros((L_V, cfg.C + 1))))
    with pytest.raises(nc.ShapeError):
        encode_image(pv, cfg, np.zeros((1, 30, 30)))


def test_text_encoder_shape_and_limit(model):
    cfg, store = model
    pv = ParamView(store)
    seq = Tensor(np.random.default_rng(5).normal(size=(19, cfg.C)))
    out = encode_text(pv, cfg, seq)
    assert out.shape == (cfg.C_out,)
    assert encode_text(pv, cfg, seq).data.tobytes() == out.data.tobytes()
    with pytest.raises(nc.ShapeError):
        encode_text(pv, cfg, Tensor(np.zeros((cfg.max_seq + 1, cfg.C))))


def test_text_feature_depends_on_whole_prefix(model):
    cfg, store = model
    pv = ParamView(store)
    base = np.random.default_rng(6).normal(size=(9, cfg.C))
    a = encode_text(pv, cfg, Tensor(base)).data
    for row in (0, 8):
        changed = base.copy()
        changed[row] += 1.0
        assert not np.array_equal(a, encode_text(pv, cfg, Tensor(changed)).data)


def test_tokenize_fixed():
    table = TokenTable()
    real = tokenize_fixed("real")
    spoof = tokenize_fixed("spoof")
    assert [table.words[i] for i in real] == ["[sos]", "this", "is", "a", "photo", "of", "real", "face", "[eos]"]
    assert len(spoof) == 9
    assert [i for i, (a, b) in enumerate(zip(real, spoof)) if a != b] == [6]
    with pytest.raises(KeyError):
        tokenize_fixed("mask")


def test_backbone_is_penalizable_class_rows_are_not(model):
    _, store = model
    assert all(n.startswith(("img.", "txt.")) for n in store.penalizable)
    assert "class_embed" not in store.penalizable
    assert set(store.names()) - set(store.penalizable) == {"class_embed"}
