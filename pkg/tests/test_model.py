from dataclasses import replace

import numpy as np
import pytest

import sentigen.autodiff as ad
from sentigen.errors import ConfigError, ContractError, ShapeError
from sentigen.model import (ModelConfig, decoder_states, encode, generate, init_params,
                            load_checkpoint, params_from_arrays, params_to_arrays,
                            save_checkpoint, token_logits)
from sentigen.prompt import build_prompt, flatten_prompt

from conftest import small_config


@pytest.fixture(scope="module")
def world(toy, toy_model):
    return toy["vocab"], toy["registry"], toy["records"], toy_model["config"], toy_model["params"]


def pick(records, dataset):
    return next(r for r in records if r.dataset_id == dataset)


# ---------------------------------------------------------------------------
# config


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(model_dim=10, heads=4).validate()  # not divisible
    with pytest.raises(ConfigError):
        ModelConfig(model_dim=0).validate()
    with pytest.raises(ConfigError):
        ModelConfig(dropout_rate=1.0).validate()
    with pytest.raises(ConfigError):
        ModelConfig.from_json({"model_dim": 8, "mystery": 1})
    cfg = ModelConfig.from_json(ModelConfig().to_json())
    assert cfg == ModelConfig()


# ---------------------------------------------------------------------------
# encoder


def test_encode_shapes_and_stream_layout(world):
    vocab, registry, records, config, params = world
    r = pick(records, "mosi-toy")
    ps = build_prompt(r, vocab, registry, config.max_len)
    enc = encode(ps, params, config, vocab)
    total = ps.token_length + ps.frame_count
    assert enc.states.data.shape == (total, config.model_dim)
    assert enc.pooled.data.shape == (config.model_dim,)
    assert enc.token_length == ps.token_length
    assert enc.keep.all()  # no pads in a freshly built prompt


def test_pad_positions_are_inert(world):
    vocab, registry, records, config, params = world
    r = pick(records, "absa-toy")
    ps = build_prompt(r, vocab, registry, config.max_len)
    enc = encode(ps, params, config, vocab)

    # pads appended at the end and spliced into the middle of the query
    pad = vocab.pad_id
    tail = replace(ps, x_tokens=ps.x_tokens + (pad, pad))
    mid = replace(ps, x_tokens=ps.x_tokens[:2] + (pad,) + ps.x_tokens[2:] + (pad,))
    for padded in (tail, mid):
        out = encode(padded, params, config, vocab)
        assert np.array_equal(out.pooled.data, enc.pooled.data)
        keep_rows = out.states.data[out.keep]
        assert np.array_equal(keep_rows, enc.states.data)


def test_distinct_dataset_indices_change_pooled(world):
    vocab, registry, records, config, params = world
    ps = build_prompt(pick(records, "sst-toy"), vocab, registry, config.max_len)
    other = replace(ps, dataset_index=(ps.dataset_index + 1) % config.num_datasets)
    a = encode(ps, params, config, vocab).pooled.data
    b = encode(other, params, config, vocab).pooled.data
    assert not np.allclose(a, b)


def test_encode_rejects_overflow_and_bad_masks(world):
    vocab, registry, records, config, params = world
    ps = build_prompt(pick(records, "sst-toy"), vocab, registry, config.max_len)
    huge = replace(ps, x_tokens=ps.x_tokens * 40)
    with pytest.raises(ContractError):
        encode(huge, params, config, vocab)

    from sentigen.masking import MaskPlan, ModalitySetting
    bad = MaskPlan(setting=ModalitySetting.T,
                   masked_token_positions=(ps.token_length + 5,),
                   masked_modal_frames={})
    with pytest.raises(IndexError):
        encode(ps, params, config, vocab, mask_plan=bad)


def test_mask_plan_substitutes_learned_vectors(world):
    vocab, registry, records, config, params = world
    from sentigen.masking import MaskPlan, ModalitySetting
    r = pick(records, "meld-toy")
    ps = build_prompt(r, vocab, registry, config.max_len)
    plan = MaskPlan(setting=ModalitySetting.TA,
                    masked_token_positions=(ps.token_length - 1,),
                    masked_modal_frames={"acoustic": (0,)})
    clean = encode(ps, params, config, vocab)
    corrupted = encode(ps, params, config, vocab, mask_plan=plan)
    assert not np.array_equal(clean.states.data, corrupted.states.data)
    # masking never changes lengths
    assert corrupted.states.data.shape == clean.states.data.shape


# ---------------------------------------------------------------------------
# decoder


def test_decoder_is_causal(world):
    vocab, registry, records, config, params = world
    ps = build_prompt(pick(records, "sst-toy"), vocab, registry, config.max_len)
    enc = encode(ps, params, config, vocab)
    ids_a = [vocab.bos_id, 20, 21, 22]
    ids_b = [vocab.bos_id, 20, 30, 31]  # diverges from position 2 on
    ha = decoder_states(ids_a, enc, params, config).data
    hb = decoder_states(ids_b, enc, params, config).data
    assert np.array_equal(ha[:2], hb[:2])
    assert not np.array_equal(ha[2:], hb[2:])
    with pytest.raises(ContractError):
        decoder_states([], enc, params, config)


def test_logits_projection_is_tied(world):
    vocab, registry, records, config, params = world
    ps = build_prompt(pick(records, "sst-toy"), vocab, registry, config.max_len)
    enc = encode(ps, params, config, vocab)
    h = decoder_states([vocab.bos_id], enc, params, config)
    logits = token_logits(h, params).data
    manual = h.data @ params["w_text"].data.T @ params["tok_emb"].data.T
    assert logits.shape == (1, config.vocab_size)
    assert np.allclose(logits, manual, atol=1e-12)


def test_generate_is_deterministic_and_bounded(world):
    vocab, registry, records, config, params = world
    ps = build_prompt(pick(records, "meld-toy"), vocab, registry, config.max_len)
    a = generate(ps, params, config, vocab, max_new=5)
    b = generate(ps, params, config, vocab, max_new=5)
    assert a == b
    assert 1 <= len(a) <= 5
    if vocab.eos_id in a:
        assert a[-1] == vocab.eos_id
    with pytest.raises(ContractError):
        generate(ps, params, config, vocab, max_new=0)


# ---------------------------------------------------------------------------
# gradients through the full model


def test_full_model_gradient_matches_fd(world):
    vocab, registry, records, config, params = world
    from conftest import fd_check_param
    ps = build_prompt(pick(records, "absa-toy"), vocab, registry, config.max_len)

    def loss():
        enc = encode(ps, params, config, vocab)
        h = decoder_states([vocab.bos_id, 15], enc, params, config)
        return ad.softmax_cross_entropy(token_logits(h, params), [15, vocab.eos_id])

    for name in ("enc0_attn_bq", "enc0_ln1_g", "dec0_cross_bv", "type_emb", "mask_vec_acoustic"):
        assert fd_check_param(loss, params, name) < 1e-4, name


def test_dataset_embedding_gradient_isolation(world):
    vocab, registry, records, config, params = world
    ps = build_prompt(pick(records, "sst-toy"), vocab, registry, config.max_len)
    ad.zero_grads(params.values())
    enc = encode(ps, params, config, vocab)
    ad.backward(ad.sum_all(enc.pooled))
    g = params["dataset_emb"].grad
    assert g is not None
    active = ps.dataset_index
    assert np.any(g[active] != 0.0)
    for row in range(config.num_datasets):
        if row != active:
            assert np.all(g[row] == 0.0)


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_roundtrip_and_byte_stability(world, tmp_path):
    vocab, registry, records, config, params = world
    arrays = dict(params_to_arrays(params))
    meta = {"stage": "test", "note": ["alpha", 1]}
    p1 = tmp_path / "a.ckpt"
    p2 = tmp_path / "b.ckpt"
    save_checkpoint(p1, config, arrays, meta=meta)
    cfg2, arrays2, meta2 = load_checkpoint(p1)
    assert cfg2 == config
    assert meta2["note"] == ["alpha", 1]
    assert set(arrays2) == set(arrays)
    for k in arrays:
        assert np.array_equal(arrays[k], arrays2[k])
    save_checkpoint(p2, cfg2, arrays2, meta=meta2)
    assert p1.read_bytes() == p2.read_bytes()

    back = params_from_arrays(config, arrays2)
    for name in params:
        assert np.array_equal(back[name].data, params[name].data)


def test_checkpoint_shape_errors(world, tmp_path):
    vocab, registry, records, config, params = world
    arrays = dict(params_to_arrays(params))
    missing = dict(arrays)
    del missing["param/tok_emb"]
    with pytest.raises(ShapeError):
        params_from_arrays(config, missing)
    wrong = dict(arrays)
    wrong["param/w_text"] = np.zeros((3, 3))
    with pytest.raises(ShapeError):
        params_from_arrays(config, wrong)
    extra = dict(arrays)
    extra["param/phantom"] = np.zeros(2)
    with pytest.raises(ShapeError):
        params_from_arrays(config, extra)

    path = tmp_path / "c.ckpt"
    path.write_bytes(b"NOPE" + b"\0" * 32)
    with pytest.raises(ConfigError):
        load_checkpoint(path)


def test_init_is_seeded(world):
    vocab, registry, records, config, params = world
    again = init_params(config, np.random.default_rng(42))
    for name in params:
        assert np.array_equal(params[name].data, again[name].data)
    other = init_params(config, np.random.default_rng(43))
    assert any(not np.array_equal(params[n].data, other[n].data) for n in params)
