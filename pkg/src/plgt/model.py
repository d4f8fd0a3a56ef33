"""Single-layer (or stacked) encoder-decoder built from PLGA or SDPA blocks."""

from __future__ import annotations

import functools
import math

import numpy as np

from . import ndgrad as nd
from .attention import attention_param_specs, build_masks, keep_mask, multi_head
from .config import ModelConfig
from .exceptions import ConfigError, ContractError
from .ndgrad import Tensor

from .textpipe import END, PAD, START, UNK  # noqa: F401

Params = dict[str, Tensor]


# ---------------------------------------------------------------------------
# parameter layout, initialisation, counting
# ---------------------------------------------------------------------------

def _ffn_specs(prefix: str, cfg: ModelConfig):
    d, dff = cfg.d_model, cfg.dff
    return {
        f"{prefix}.w1": ((d, dff), "glorot_uniform"),
        f"{prefix}.b1": ((dff,), "zeros"),
        f"{prefix}.w2": ((dff, d), "glorot_uniform"),
        f"{prefix}.b2": ((d,), "zeros"),
    }


def _ln_specs(prefix: str, cfg: ModelConfig):
    return {f"{prefix}.g": ((cfg.d_model,), "ones"), f"{prefix}.b": ((cfg.d_model,), "zeros")}


def param_specs(cfg: ModelConfig) -> dict[str, tuple[tuple[int, ...], str]]:
    """Ordered name -> (shape, initialiser) for every learnable tensor."""
    cfg.validate()
    d = cfg.d_model
    specs = {
        "src_emb": ((cfg.src_vocab_size, d), "embedding"),
        "tgt_emb": ((cfg.tgt_vocab_size, d), "embedding"),
    }
    for layer in range(cfg.num_layers):
        p = f"enc{layer}"
        specs.update(attention_param_specs(f"{p}.slm", cfg))
        specs.update(_ln_specs(f"{p}.ln1", cfg))
        specs.update(_ffn_specs(f"{p}.ffn", cfg))
        specs.update(_ln_specs(f"{p}.ln2", cfg))
    for layer in range(cfg.num_layers):
        p = f"dec{layer}"
        specs.update(attention_param_specs(f"{p}.tlm", cfg))
        specs.update(_ln_specs(f"{p}.ln1", cfg))
        specs.update(attention_param_specs(f"{p}.xlm", cfg))
        specs.update(_ln_specs(f"{p}.ln2", cfg))
        specs.update(_ffn_specs(f"{p}.ffn", cfg))
        specs.update(_ln_specs(f"{p}.ln3", cfg))
    specs["out.w"] = ((d, cfg.tgt_vocab_size), "glorot_uniform")
    specs["out.b"] = ((cfg.tgt_vocab_size,), "zeros")
    return specs


def _draw(rng: nd.Rng, shape: tuple[int, ...], kind: str) -> np.ndarray:
    if kind == "zeros":
        return np.zeros(shape)
    if kind == "ones":
        return np.ones(shape)
    if kind == "embedding":
        return rng.uniform(-0.05, 0.05, shape)
    fan_in, fan_out = shape[-2], shape[-1]
    if kind == "glorot_uniform":
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-limit, limit, shape)
    if kind == "glorot_normal":
        return rng.normal(math.sqrt(2.0 / (fan_in + fan_out)), shape)
    raise ConfigError(f"unknown initialiser {kind!r}")


def init_parameters(cfg: ModelConfig, seed: int) -> Params:
    """Fresh parameters; each tensor draws from its own named sub-stream of ``seed``."""
    root = nd.Rng(seed, "init")
    return {name: Tensor(_draw(root.child(name), shape, kind), requires_grad=True, name=name)
            for name, (shape, kind) in param_specs(cfg).items()}


def count_parameters(cfg: ModelConfig) -> int:
    """Closed-form count of learnable scalars."""
    cfg.validate()
    d, h, dk, A, dff = cfg.d_model, cfg.num_heads, cfg.d_k, cfg.a_dff, cfg.dff
    attn = 4 * (d * d + d)
    if cfg.attention == "plga":
        n = cfg.res_dense_layers
        if n:
            dense = (dk * A + A) + (n - 1) * (A * A + A)
            proj = A * dk + dk
        else:
            dense, proj = 0, dk * dk + dk
        unit = dense + proj + 2 * dk
        attn += h * (cfg.res_units * unit + (dk * dk + dk) + 3 * dk * dk)
    ffn = 2 * d * dff + dff + d
    ln = 2 * d
    enc = attn + ffn + 2 * ln
    dec = 2 * attn + ffn + 3 * ln
    emb = (cfg.src_vocab_size + cfg.tgt_vocab_size) * d
    return emb + cfg.num_layers * (enc + dec) + d * cfg.tgt_vocab_size + cfg.tgt_vocab_size


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------

@functools.lru_cache(maxsize=16)
def _pe_table(max_len: int, d: int) -> np.ndarray:
    pos = np.arange(max_len, dtype=np.float64)[:, None]
    i2 = np.arange(0, d, 2, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, i2 / d)
    pe = np.empty((max_len, d))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle)
    pe.setflags(write=False)
    return pe


def positional_encoding(max_len: int, d_emb: int) -> np.ndarray:
    if d_emb % 2:
        raise ConfigError(f"positional encoding needs an even width, got {d_emb}")
    return _pe_table(int(max_len), int(d_emb))


def embed(ids, table: Tensor, cfg: ModelConfig, training: bool = False, rng: nd.Rng | None = None) -> Tensor:
    ids = np.atleast_2d(np.asarray(ids, dtype=np.int64))
    s = ids.shape[-1]
    pe = positional_encoding(max(cfg.max_len, s), cfg.d_model)[:s]
    x = nd.embedding(table, ids) * math.sqrt(cfg.d_model) + pe
    return nd.dropout(x, cfg.dropout_outside, training, rng)


def ffn(x: Tensor, params: Params, prefix: str) -> Tensor:
    hidden = nd.relu(x @ params[f"{prefix}.w1"] + params[f"{prefix}.b1"])
    return hidden @ params[f"{prefix}.w2"] + params[f"{prefix}.b2"]


def _add_norm(x: Tensor, sub: Tensor, params: Params, prefix: str, cfg: ModelConfig, training, rng) -> Tensor:
    sub = nd.dropout(sub, cfg.dropout_outside, training, rng)
    return nd.layer_norm(x + sub, params[f"{prefix}.g"], params[f"{prefix}.b"], cfg.ln_eps)


def _check_mode(training: bool, rng) -> None:
    if training and rng is None:
        raise ContractError("training-mode forward needs an rng")


def encoder_forward(params: Params, cfg: ModelConfig, src_ids, training: bool = False,
                    rng: nd.Rng | None = None):
    """Returns ``(V_SLM [B, S, d], [trace per layer])``."""
    _check_mode(training, rng)
    src_ids = np.atleast_2d(np.asarray(src_ids, dtype=np.int64))
    enc_mask, _, _ = build_masks(src_ids, src_ids[:, :1], PAD)
    keep = keep_mask(src_ids, PAD)
    x = embed(src_ids, params["src_emb"], cfg, training, rng)
    traces = []
    for layer in range(cfg.num_layers):
        p = f"enc{layer}"
        att, tr = multi_head(x, x, x, params, f"{p}.slm", cfg, enc_mask, causal=False,
                             query_keep=keep, training=training, rng=rng)
        x = _add_norm(x, att, params, f"{p}.ln1", cfg, training, rng)
        x = _add_norm(x, ffn(x, params, f"{p}.ffn"), params, f"{p}.ln2", cfg, training, rng)
        traces.append(tr)
    return x, traces


def decoder_forward(params: Params, cfg: ModelConfig, tgt_in, enc_out: Tensor, src_ids,
                    training: bool = False, rng: nd.Rng | None = None):
    """Returns ``(decoder output [B, T, d], TLM traces, XLM traces)``."""
    _check_mode(training, rng)
    src_ids = np.atleast_2d(np.asarray(src_ids, dtype=np.int64))
    tgt_in = np.atleast_2d(np.asarray(tgt_in, dtype=np.int64))
    _, dec_mask, xlm_mask = build_masks(src_ids, tgt_in, PAD)
    keep = keep_mask(tgt_in, PAD)
    causal = cfg.attention == "plga"
    y = embed(tgt_in, params["tgt_emb"], cfg, training, rng)
    tlm, xlm = [], []
    for layer in range(cfg.num_layers):
        p = f"dec{layer}"
        att, tr = multi_head(y, y, y, params, f"{p}.tlm", cfg, dec_mask, causal=causal,
                             query_keep=keep, training=training, rng=rng)
        y = _add_norm(y, att, params, f"{p}.ln1", cfg, training, rng)
        tlm.append(tr)
        att, tr = multi_head(y, enc_out, enc_out, params, f"{p}.xlm", cfg, xlm_mask, causal=causal,
                             query_keep=keep, training=training, rng=rng)
        y = _add_norm(y, att, params, f"{p}.ln2", cfg, training, rng)
        xlm.append(tr)
        y = _add_norm(y, ffn(y, params, f"{p}.ffn"), params, f"{p}.ln3", cfg, training, rng)
    return y, tlm, xlm


def project(params: Params, dec_out: Tensor) -> Tensor:
    return dec_out @ params["out.w"] + params["out.b"]


def forward(params: Params, cfg: ModelConfig, src_ids, tgt_in, training: bool = False,
            rng: nd.Rng | None = None):
    """Logits ``[B, T, V_tgt]`` plus per-stage traces ``{"SLM": [...], "TLM": [...], "XLM": [...]}``."""
    enc_out, slm = encoder_forward(params, cfg, src_ids, training, rng)
    dec_out, tlm, xlm = decoder_forward(params, cfg, tgt_in, enc_out, src_ids, training, rng)
    return project(params, dec_out), {"SLM": slm, "TLM": tlm, "XLM": xlm}
