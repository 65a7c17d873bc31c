"""Encoder-decoder over unified prompts.

The encoder consumes one stream per sample: token embeddings for the prompt
spans, projected acoustic/visual frames appended after the text, each position
carrying a modality-type embedding, a position embedding, and the dataset
embedding row for the record's dataset. Attention is bidirectional; pad
positions (if any) are dropped from attention, pooling, and position counting,
so where pads sit never changes the outputs. The decoder is autoregressive
with cross-attention into the encoder states, and its output projection is
tied to the token embedding table.

Everything here processes one sample at a time; batching lives in the loss
functions, which average per-sample graphs. That keeps shapes 2-D and the
autodiff rules simple, and is fast enough at desk scale.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, ContractError, ShapeError
from .prompt import PromptSequence, flatten_prompt

CHECKPOINT_MAGIC = b"SGCK"
CHECKPOINT_VERSION = 1

_NEG_INF = -1e30
_TYPE_INDEX = {"text": 0, "acoustic": 1, "visual": 2}


@dataclass
class ModelConfig:
    """Desk-scale defaults; the full-size counterpart would use 768/6/12."""

    model_dim: int = 64
    text_embed_dim: int = 64
    acoustic_dim: int = 64
    visual_dim: int = 64
    layers_enc: int = 2
    layers_dec: int = 2
    heads: int = 4
    ffn_dim: int = 256
    max_len: int = 128
    vocab_size: int = 0
    num_datasets: int = 0
    dropout_rate: float = 0.1

    def validate(self):
        if self.model_dim % self.heads != 0:
            raise ConfigError(f"model_dim {self.model_dim} not divisible by heads {self.heads}")
        if self.vocab_size <= 0 or self.num_datasets <= 0:
            raise ConfigError("vocab_size and num_datasets must be set from the vocabulary and registry")
        if not (0.0 <= self.dropout_rate < 1.0):
            raise ConfigError(f"dropout_rate {self.dropout_rate} outside [0, 1)")
        return self

    def to_json(self):
        return asdict(self)

    @classmethod
    def from_json(cls, obj):
        known = {f for f in cls.__dataclass_fields__}
        extra = set(obj) - known
        if extra:
            raise ConfigError(f"unknown model config keys {sorted(extra)}")
        return cls(**obj)


def _xavier(rng, fan_in, fan_out):
    std = float(np.sqrt(2.0 / (fan_in + fan_out)))
    return rng.normal(0.0, std, size=(fan_in, fan_out))


def init_params(config, rng):
    """Fresh parameter dict. Iteration order is creation order and is relied
    on for deterministic optimizer updates and checkpoint layout."""
    config.validate()
    d = config.model_dim
    p = {}

    def add(name, arr):
        p[name] = ad.Tensor(arr, requires_grad=True, op="param")

    add("tok_emb", rng.normal(0.0, 0.1, size=(config.vocab_size, config.text_embed_dim)))
    add("w_text", _xavier(rng, config.text_embed_dim, d))
    add("pos_emb", rng.normal(0.0, 0.1, size=(config.max_len, d)))
    add("type_emb", rng.normal(0.0, 0.1, size=(len(_TYPE_INDEX), d)))
    add("dataset_emb", rng.normal(0.0, 0.1, size=(config.num_datasets, d)))
    add("proj_acoustic_w", _xavier(rng, config.acoustic_dim, d))
    add("proj_acoustic_b", np.zeros(d))
    add("proj_visual_w", _xavier(rng, config.visual_dim, d))
    add("proj_visual_b", np.zeros(d))
    add("mask_vec_acoustic", rng.normal(0.0, 0.1, size=(d,)))
    add("mask_vec_visual", rng.normal(0.0, 0.1, size=(d,)))

    def attn_block(prefix):
        for mat in ("wq", "wk", "wv", "wo"):
            add(f"{prefix}_{mat}", _xavier(rng, d, d))
        for vec in ("bq", "bk", "bv", "bo"):
            add(f"{prefix}_{vec}", np.zeros(d))

    def ln_block(prefix):
        add(f"{prefix}_g", np.ones(d))
        add(f"{prefix}_b", np.zeros(d))

    def ffn_block(prefix):
        add(f"{prefix}_w1", _xavier(rng, d, config.ffn_dim))
        add(f"{prefix}_b1", np.zeros(config.ffn_dim))
        add(f"{prefix}_w2", _xavier(rng, config.ffn_dim, d))
        add(f"{prefix}_b2", np.zeros(d))

    for i in range(config.layers_enc):
        attn_block(f"enc{i}_attn")
        ln_block(f"enc{i}_ln1")
        ffn_block(f"enc{i}_ffn")
        ln_block(f"enc{i}_ln2")
    for i in range(config.layers_dec):
        attn_block(f"dec{i}_self")
        ln_block(f"dec{i}_ln1")
        attn_block(f"dec{i}_cross")
        ln_block(f"dec{i}_ln2")
        ffn_block(f"dec{i}_ffn")
        ln_block(f"dec{i}_ln3")
    return p


def param_shapes(config):
    rng = np.random.default_rng(0)
    return {name: t.shape for name, t in init_params(config, rng).items()}


def _attention(params, prefix, x_q, x_kv, config, mask_bias):
    """Multi-head scaled dot-product attention. ``mask_bias`` is a constant
    (Lq, Lk) matrix of 0 / -inf-like entries added to the logits."""
    d = config.model_dim
    hd = d // config.heads
    q = ad.add(ad.matmul(x_q, params[f"{prefix}_wq"]), params[f"{prefix}_bq"])
    k = ad.add(ad.matmul(x_kv, params[f"{prefix}_wk"]), params[f"{prefix}_bk"])
    v = ad.add(ad.matmul(x_kv, params[f"{prefix}_wv"]), params[f"{prefix}_bv"])
    scale = 1.0 / float(np.sqrt(hd))
    heads_out = []
    bias = ad.constant(mask_bias)
    for h in range(config.heads):
        lo, hi = h * hd, (h + 1) * hd
        qh = ad.slice_cols(q, lo, hi)
        kh = ad.slice_cols(k, lo, hi)
        vh = ad.slice_cols(v, lo, hi)
        scores = ad.add(ad.scale(ad.matmul(qh, ad.transpose(kh)), scale), bias)
        heads_out.append(ad.matmul(ad.softmax(scores), vh))
    cat = heads_out[0]
    if len(heads_out) > 1:
        # column-wise concat via row concat of transposes
        cat = ad.transpose(ad.concat_rows([ad.transpose(t) for t in heads_out]))
    return ad.add(ad.matmul(cat, params[f"{prefix}_wo"]), params[f"{prefix}_bo"])


def _ffn(params, prefix, x):
    h = ad.gelu(ad.add(ad.matmul(x, params[f"{prefix}_w1"]), params[f"{prefix}_b1"]))
    return ad.add(ad.matmul(h, params[f"{prefix}_w2"]), params[f"{prefix}_b2"])


def _maybe_dropout(x, config, train, rng):
    if train and config.dropout_rate > 0.0:
        if rng is None:
            raise ContractError("training forward pass needs an RNG stream for dropout")
        return ad.dropout(x, config.dropout_rate, rng)
    return x


@dataclass
class EncoderOutput:
    states: ad.Tensor      # (L, model_dim)
    pooled: ad.Tensor      # (model_dim,)
    keep: np.ndarray       # bool (L,), False at pad positions
    token_length: int      # number of token positions (pads included)


def encode(ps, params, config, vocab, mask_plan=None, train=False, rng=None):
    """Run the encoder over one prompt.

    ``mask_plan`` (optional) corrupts the stream for reconstruction training:
    listed token positions are replaced by the mask token, listed modal frames
    by the learned per-modality mask vector. Masking never changes lengths.
    """
    ids = flatten_prompt(ps, vocab)
    n_tok = len(ids)
    n_frames = ps.frame_count
    total = n_tok + n_frames
    if total > config.max_len:
        raise ContractError(f"encoder stream of {total} positions exceeds max length {config.max_len}")
    if n_tok == 0:
        raise ContractError("cannot encode an empty prompt")

    corrupted = list(ids)
    masked_tok = ()
    masked_frames = {}
    if mask_plan is not None:
        masked_tok = tuple(mask_plan.masked_token_positions)
        for pos in masked_tok:
            if not (0 <= pos < n_tok):
                raise IndexError(f"mask position {pos} outside the {n_tok}-token stream")
            corrupted[pos] = vocab.mask_id
        masked_frames = {k: tuple(v) for k, v in mask_plan.masked_modal_frames.items()}

    parts = [ad.matmul(ad.embedding(params["tok_emb"], corrupted), params["w_text"])]
    type_ids = [0] * n_tok
    for seg in ps.modal_segments:
        feats = ad.constant(np.asarray(seg.features, dtype=np.float64))
        w = params[f"proj_{seg.kind}_w"]
        b = params[f"proj_{seg.kind}_b"]
        if feats.shape[1] != w.shape[0]:
            raise ShapeError(
                f"{seg.kind} features have dim {feats.shape[1]}, model expects {w.shape[0]}")
        proj = ad.add(ad.matmul(feats, w), b)
        hit = masked_frames.get(seg.kind, ())
        if hit:
            rows = feats.shape[0]
            sel = np.zeros((rows, config.model_dim))
            for i in hit:
                if not (0 <= i < rows):
                    raise IndexError(f"masked {seg.kind} frame {i} outside {rows} frames")
                sel[i] = 1.0
            keep_m = ad.constant(1.0 - sel)
            proj = ad.add(ad.mul(proj, keep_m),
                          ad.mul(ad.tile_rows(params[f"mask_vec_{seg.kind}"], rows), ad.constant(sel)))
        parts.append(proj)
        type_ids.extend([_TYPE_INDEX[seg.kind]] * feats.shape[0])

    x = parts[0] if len(parts) == 1 else ad.concat_rows(parts)

    keep = np.ones(total, dtype=bool)
    keep[:n_tok] = np.asarray(corrupted) != vocab.pad_id
    # pads do not consume position slots
    pos_ids = np.zeros(total, dtype=np.int64)
    pos_ids[keep] = np.arange(int(keep.sum()))

    x = ad.add(x, ad.embedding(params["type_emb"], type_ids))
    x = ad.add(x, ad.embedding(params["pos_emb"], pos_ids))
    x = ad.add(x, ad.embedding(params["dataset_emb"], [ps.dataset_index] * total))
    x = _maybe_dropout(x, config, train, rng)

    key_bias = np.where(keep, 0.0, _NEG_INF)[None, :]  # broadcast over query rows
    bias = np.repeat(key_bias, total, axis=0)
    for i in range(config.layers_enc):
        a = _maybe_dropout(_attention(params, f"enc{i}_attn", x, x, config, bias), config, train, rng)
        x = ad.layer_norm(ad.add(x, a), params[f"enc{i}_ln1_g"], params[f"enc{i}_ln1_b"])
        f = _maybe_dropout(_ffn(params, f"enc{i}_ffn", x), config, train, rng)
        x = ad.layer_norm(ad.add(x, f), params[f"enc{i}_ln2_g"], params[f"enc{i}_ln2_b"])

    pooled = ad.masked_mean_rows(x, keep)
    return EncoderOutput(states=x, pooled=pooled, keep=keep, token_length=n_tok)


def decoder_states(dec_ids, enc_out, params, config, train=False, rng=None):
    """Teacher-forced decoder pass; returns hidden states (len(dec_ids), d)."""
    if not dec_ids:
        raise ContractError("decoder needs at least one input token")
    n = len(dec_ids)
    if n > config.max_len:
        raise ContractError(f"decoder stream of {n} positions exceeds max length {config.max_len}")
    x = ad.matmul(ad.embedding(params["tok_emb"], dec_ids), params["w_text"])
    x = ad.add(x, ad.embedding(params["pos_emb"], np.arange(n)))
    x = _maybe_dropout(x, config, train, rng)

    causal = np.where(np.tril(np.ones((n, n), dtype=bool)), 0.0, _NEG_INF)
    cross = np.repeat(np.where(enc_out.keep, 0.0, _NEG_INF)[None, :], n, axis=0)
    for i in range(config.layers_dec):
        a = _maybe_dropout(_attention(params, f"dec{i}_self", x, x, config, causal), config, train, rng)
        x = ad.layer_norm(ad.add(x, a), params[f"dec{i}_ln1_g"], params[f"dec{i}_ln1_b"])
        c = _maybe_dropout(_attention(params, f"dec{i}_cross", x, enc_out.states, config, cross),
                           config, train, rng)
        x = ad.layer_norm(ad.add(x, c), params[f"dec{i}_ln2_g"], params[f"dec{i}_ln2_b"])
        f = _maybe_dropout(_ffn(params, f"dec{i}_ffn", x), config, train, rng)
        x = ad.layer_norm(ad.add(x, f), params[f"dec{i}_ln3_g"], params[f"dec{i}_ln3_b"])
    return x


def token_logits(hidden, params):
    """Project decoder (or encoder) states onto the vocabulary; the output
    projection is the token embedding table, transposed."""
    return ad.matmul(ad.matmul(hidden, ad.transpose(params["w_text"])), ad.transpose(params["tok_emb"]))


def generate(ps, params, config, vocab, max_new=8):
    """Greedy decoding: start from <bos>, stop at <eos> or after ``max_new``
    tokens. Returns generated ids (<eos> included when produced). Deterministic."""
    if max_new < 1:
        raise ContractError("max_new must be at least 1")
    enc = encode(ps, params, config, vocab, mask_plan=None, train=False)
    out = []
    dec = [vocab.bos_id]
    for _ in range(max_new):
        h = decoder_states(dec, enc, params, config, train=False)
        logits = token_logits(ad.slice_rows(h, len(dec) - 1, len(dec)), params)
        nxt = int(np.argmax(logits.data[0]))
        out.append(nxt)
        if nxt == vocab.eos_id:
            break
        dec.append(nxt)
    return out


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, config, arrays, meta=None):
    """Write a self-contained checkpoint: fixed magic, version, a JSON header
    (model config, metadata, array manifest), then raw little-endian array
    bytes. Byte-stable for identical inputs."""
    manifest = []
    blobs = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        if arr.dtype == np.float64:
            dtype = "<f8"
        elif arr.dtype == np.int64:
            dtype = "<i8"
        else:
            raise ContractError(f"checkpoint array {name!r} has unsupported dtype {arr.dtype}")
        blob = arr.astype(dtype).tobytes(order="C")
        manifest.append({"name": name, "dtype": dtype, "shape": list(arr.shape), "offset": offset})
        blobs.append(blob)
        offset += len(blob)
    header = {
        "version": CHECKPOINT_VERSION,
        "config": config.to_json(),
        "meta": meta or {},
        "arrays": manifest,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(header_bytes)))
        fh.write(header_bytes)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path):
    """Read a checkpoint; returns (ModelConfig, arrays dict, meta dict)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 16 or blob[:4] != CHECKPOINT_MAGIC:
        raise ConfigError(f"{path}: not a checkpoint file")
    version, header_len = struct.unpack("<IQ", blob[4:16])
    if version != CHECKPOINT_VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(blob[16:16 + header_len].decode("utf-8"))
    payload = blob[16 + header_len:]
    arrays = {}
    for entry in header["arrays"]:
        dtype = np.dtype(entry["dtype"])
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        start = entry["offset"]
        stop = start + count * dtype.itemsize
        if stop > len(payload):
            raise ConfigError(f"{path}: truncated checkpoint payload at array {entry['name']!r}")
        arrays[entry["name"]] = np.frombuffer(payload[start:stop], dtype=dtype).reshape(shape).copy()
    config = ModelConfig.from_json(header["config"])
    return config, arrays, header.get("meta", {})


def params_to_arrays(params):
    return {f"param/{name}": t.data for name, t in params.items()}


def params_from_arrays(config, arrays):
    """Rebuild the parameter dict from checkpoint arrays, failing loudly on
    any missing name or shape mismatch."""
    rng = np.random.default_rng(0)
    fresh = init_params(config, rng)
    params = {}
    for name, t in fresh.items():
        key = f"param/{name}"
        if key not in arrays:
            raise ShapeError(f"checkpoint is missing parameter {name!r}")
        stored = arrays[key]
        if tuple(stored.shape) != t.shape:
            raise ShapeError(
                f"checkpoint parameter {name!r} has shape {tuple(stored.shape)}, expected {t.shape}")
        params[name] = ad.Tensor(np.asarray(stored, dtype=np.float64), requires_grad=True, op="param")
    extra = [k for k in arrays if k.startswith("param/") and k[len("param/"):] not in fresh]
    if extra:
        raise ShapeError(f"checkpoint carries unknown parameters {sorted(extra)}")
    return params
