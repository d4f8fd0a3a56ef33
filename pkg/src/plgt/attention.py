"""Power-law graph attention (PLGA), scaled dot-product attention and masks.

A PLGA head runs three stages:

1. metric tensor: density operator ``Q^T Q`` -> residual network -> positive wrap
   ``ReLU(A W + b_W) + eps``;
2. energy-curvature tensor ``G = a * A**P + b_a`` (all elementwise);
3. localized operator ``softmax(mask(LeakyReLU(Q G K^T / sqrt(d_k))))`` applied to V.

Stage functions accept any leading batch/head axes as long as the parameter
tensors broadcast against them; ``multi_head`` stacks all heads on one axis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import ndgrad as nd
from .config import ModelConfig
from .ndgrad import Tensor

MASK_VALUE = -1e9
STAGES = ("SLM", "TLM", "XLM")


@dataclass
class ResidualUnit:
    dense: list[tuple[Tensor, Tensor]]
    proj: tuple[Tensor, Tensor]
    ln: tuple[Tensor, Tensor]


@dataclass
class PlgaHeadParams:
    """Learnable tensors of one head (or of all heads stacked on a broadcast axis)."""

    units: list[ResidualUnit]
    W: Tensor
    b_W: Tensor
    a: Tensor
    b_a: Tensor
    P: Tensor


@dataclass
class DeductiveRecord:
    """Deductive outputs of one head of one attention stage.

    ``P``, ``a`` and ``b_a`` are dataset-level parameters; ``E_LM``, ``A_LM``
    and ``G_LM`` are inferred for the captured sentence pair.
    """

    stage: str
    head: int
    E_LM: np.ndarray
    A_LM: np.ndarray | None = None
    G_LM: np.ndarray | None = None
    P: np.ndarray | None = None
    a: np.ndarray | None = None
    b_a: np.ndarray | None = None
    layer: int = 0
    row_tokens: list[str] = field(default_factory=list)
    col_tokens: list[str] = field(default_factory=list)

    DATASET_LEVEL = ("P", "a", "b_a")
    INSTANCE_LEVEL = ("E_LM", "A_LM", "G_LM")

    def tensors(self) -> dict[str, np.ndarray]:
        names = self.INSTANCE_LEVEL + self.DATASET_LEVEL
        return {n: getattr(self, n) for n in names if getattr(self, n) is not None}

    @classmethod
    def scope(cls, tensor_name: str) -> str:
        return "dataset" if tensor_name in cls.DATASET_LEVEL else "instance"


# ---------------------------------------------------------------------------
# parameter layout
# ---------------------------------------------------------------------------

def attention_param_specs(prefix: str, cfg: ModelConfig) -> dict[str, tuple[tuple[int, ...], str]]:
    """Name -> (shape, initialiser) for one multi-head attention block."""
    d, h, dk, A = cfg.d_model, cfg.num_heads, cfg.d_k, cfg.a_dff
    specs: dict[str, tuple[tuple[int, ...], str]] = {}
    for n in ("q", "k", "v", "o"):
        specs[f"{prefix}.w{n}"] = ((d, d), "glorot_normal")
        specs[f"{prefix}.b{n}"] = ((d,), "zeros")
    if cfg.attention != "plga":
        return specs
    for u in range(cfg.res_units):
        width = dk
        for j in range(cfg.res_dense_layers):
            specs[f"{prefix}.res{u}.dense{j}.w"] = ((h, width, A), "glorot_uniform")
            specs[f"{prefix}.res{u}.dense{j}.b"] = ((h, A), "zeros")
            width = A
        specs[f"{prefix}.res{u}.proj.w"] = ((h, width, dk), "glorot_uniform")
        specs[f"{prefix}.res{u}.proj.b"] = ((h, dk), "zeros")
        specs[f"{prefix}.res{u}.ln.g"] = ((h, dk), "ones")
        specs[f"{prefix}.res{u}.ln.b"] = ((h, dk), "zeros")
    specs[f"{prefix}.W"] = ((h, dk, dk), "glorot_uniform")
    specs[f"{prefix}.b_W"] = ((h, dk), "zeros")
    specs[f"{prefix}.a"] = ((h, dk, dk), "glorot_uniform")
    specs[f"{prefix}.b_a"] = ((h, dk, dk), "zeros")
    specs[f"{prefix}.P"] = ((h, dk, dk), "glorot_normal")
    return specs


def _stacked(t: Tensor) -> Tensor:
    # [h, ...] -> [h, 1, ...] so the head axis lines up with [B, h, pos, ...]
    return t.reshape((t.shape[0], 1) + t.shape[1:])


def stacked_head_params(params: dict[str, Tensor], prefix: str, cfg: ModelConfig) -> PlgaHeadParams:
    """All heads of a block, reshaped to broadcast against ``[B, h, pos, d_k, d_k]``."""
    def vec(name):  # [h, n] -> [h, 1, 1, n]
        t = params[name]
        return t.reshape((t.shape[0], 1, 1, t.shape[1]))

    units = []
    for u in range(cfg.res_units):
        base = f"{prefix}.res{u}"
        dense = [(_stacked(params[f"{base}.dense{j}.w"]), vec(f"{base}.dense{j}.b"))
                 for j in range(cfg.res_dense_layers)]
        units.append(ResidualUnit(
            dense=dense,
            proj=(_stacked(params[f"{base}.proj.w"]), vec(f"{base}.proj.b")),
            ln=(vec(f"{base}.ln.g"), vec(f"{base}.ln.b")),
        ))
    return PlgaHeadParams(
        units=units,
        W=_stacked(params[f"{prefix}.W"]),
        b_W=vec(f"{prefix}.b_W"),
        a=_stacked(params[f"{prefix}.a"]),
        b_a=_stacked(params[f"{prefix}.b_a"]),
        P=_stacked(params[f"{prefix}.P"]),
    )


def single_head_params(params: dict[str, Tensor], prefix: str, cfg: ModelConfig, head: int) -> PlgaHeadParams:
    """Detached copies of one head's parameters, shaped for a plain ``[S, d_k]`` head."""
    def take(name):
        return Tensor(params[name].data[head], requires_grad=True)

    units = []
    for u in range(cfg.res_units):
        base = f"{prefix}.res{u}"
        units.append(ResidualUnit(
            dense=[(take(f"{base}.dense{j}.w"), take(f"{base}.dense{j}.b"))
                   for j in range(cfg.res_dense_layers)],
            proj=(take(f"{base}.proj.w"), take(f"{base}.proj.b")),
            ln=(take(f"{base}.ln.g"), take(f"{base}.ln.b")),
        ))
    return PlgaHeadParams(units=units, W=take(f"{prefix}.W"), b_W=take(f"{prefix}.b_W"),
                          a=take(f"{prefix}.a"), b_a=take(f"{prefix}.b_a"), P=take(f"{prefix}.P"))


# ---------------------------------------------------------------------------
# PLGA stages
# ---------------------------------------------------------------------------

def density_operator(q: Tensor) -> Tensor:
    """``Q^T Q`` over the sequence axis: ``[..., S, d_k] -> [..., d_k, d_k]``."""
    return nd.matmul(nd.swap_last(q), q)


def causal_density_operator(q: Tensor) -> Tensor:
    """Prefix densities ``sum_{s<=t} q_s q_s^T``: ``[..., S, d_k] -> [..., S, d_k, d_k]``.

    Row ``t`` sees only positions ``<= t``, which keeps decoder stages causal.
    The last row equals ``density_operator(q)``.
    """
    *lead, s, dk = q.shape
    col = q.reshape(tuple(lead) + (s, dk, 1))
    row = q.reshape(tuple(lead) + (s, 1, dk))
    return nd.cumsum(nd.matmul(col, row), axis=-3)


def metric_tensor(D: Tensor, hp: PlgaHeadParams, *, eps: float = 1e-9, dropout_rate: float = 0.0,
                  ln_eps: float = 1e-6, training: bool = False, rng: nd.Rng | None = None) -> Tensor:
    x = D
    for unit in hp.units:
        y = x
        for w, b in unit.dense:
            y = nd.relu(y @ w + b)
        y = y @ unit.proj[0] + unit.proj[1]
        y = nd.dropout(y, dropout_rate, training, rng)
        x = nd.layer_norm(x + y, unit.ln[0], unit.ln[1], ln_eps)
    return nd.relu(x @ hp.W + hp.b_W) + eps


def ec_tensor(A_LM: Tensor, a: Tensor, b_a: Tensor, P: Tensor) -> Tensor:
    """Energy-curvature tensor ``a * A_LM**P + b_a`` (elementwise)."""
    return nd.as_tensor(a) * nd.elem_pow(A_LM, P) + b_a


def apply_mask(scores: Tensor, mask) -> Tensor:
    """Add an additive ``mask`` so masked keys keep zero weight at any score scale.

    ``scores + MASK_VALUE`` stops masking once unmasked scores exceed 1e9,
    which saturated curvature tensors do reach. Masked entries are therefore
    placed ``MASK_VALUE`` below the smallest unmasked score of their row. Rows
    whose keys are all masked keep the plain sum.
    """
    m = np.broadcast_to(np.asarray(mask.data if isinstance(mask, Tensor) else mask, dtype=np.float64),
                        scores.shape)
    masked = m != 0
    partial = masked & ~masked.all(axis=-1, keepdims=True)
    if not partial.any():
        return scores + mask
    floor = np.where(masked, np.inf, scores.data).min(axis=-1, keepdims=True)
    const = np.where(partial, floor + m, m)
    return scores * (~partial).astype(np.float64) + const


def localized_operator(q: Tensor, k: Tensor, G: Tensor, mask=None, slope: float = 0.2) -> Tensor:
    """Attention weights ``E_LM`` of shape ``[..., S_q, S_k]``.

    ``G`` is either shared across queries (``[..., d_k, d_k]``) or given per
    query position (``[..., S_q, d_k, d_k]``).
    """
    dk = q.shape[-1]
    if G.ndim == q.ndim + 1:
        *lead, s, _ = q.shape
        qg = (q.reshape(tuple(lead) + (s, 1, dk)) @ G).reshape(q.shape)
    else:
        qg = q @ G
    scores = nd.leaky_relu((qg @ nd.swap_last(k)) * (1.0 / math.sqrt(dk)), slope)
    if mask is not None:
        scores = apply_mask(scores, mask)
    return nd.softmax_lastdim(scores)


def plga_head_forward(q: Tensor, k: Tensor, v: Tensor, hp: PlgaHeadParams, mask=None, *,
                      causal: bool = False, query_keep=None, eps: float = 1e-9, slope: float = 0.2,
                      res_dropout: float = 0.0, elm_dropout: float = 0.0, ln_eps: float = 1e-6,
                      training: bool = False, rng: nd.Rng | None = None):
    """One PLGA head (or stacked heads).

    Returns ``(V_LM, trace)`` where trace holds the pre-dropout ``E_LM`` and the
    ``A_LM``/``G_LM`` arrays. With ``causal=True`` those carry a per-query
    position axis.
    """
    qd = q if query_keep is None else q * query_keep
    dk = q.shape[-1]
    if causal:
        D = causal_density_operator(qd)
    else:
        D = density_operator(qd)
        D = D.reshape(D.shape[:-2] + (1, dk, dk))
    A = metric_tensor(D, hp, eps=eps, dropout_rate=res_dropout, ln_eps=ln_eps, training=training, rng=rng)
    G = ec_tensor(A, hp.a, hp.b_a, hp.P)
    G_used = G if causal else G.reshape(G.shape[:-3] + (dk, dk))
    E = localized_operator(q, k, G_used, mask, slope)
    out = nd.dropout(E, elm_dropout, training, rng) @ v
    return out, {"E_LM": E.data, "A_LM": A.data, "G_LM": G.data}


def sdpa_head_forward(q: Tensor, k: Tensor, v: Tensor, mask=None):
    dk = q.shape[-1]
    scores = (q @ nd.swap_last(k)) * (1.0 / math.sqrt(dk))
    if mask is not None:
        scores = apply_mask(scores, mask)
    E = nd.softmax_lastdim(scores)
    return E @ v, {"E_LM": E.data}


# ---------------------------------------------------------------------------
# multi-head wrapper
# ---------------------------------------------------------------------------

def split_heads(x: Tensor, h: int) -> Tensor:
    b, s, d = x.shape
    return nd.transpose(x.reshape((b, s, h, d // h)), (0, 2, 1, 3))


def merge_heads(x: Tensor) -> Tensor:
    b, h, s, dk = x.shape
    return nd.transpose(x, (0, 2, 1, 3)).reshape((b, s, h * dk))


def multi_head(xq: Tensor, xk: Tensor, xv: Tensor, params: dict[str, Tensor], prefix: str,
               cfg: ModelConfig, mask=None, *, causal: bool = False, query_keep=None,
               training: bool = False, rng: nd.Rng | None = None):
    """Project, split into ``h`` heads, attend per head, merge and project back.

    Inputs are ``[B, S, d_model]``; the mask broadcasts to ``[B, h, S_q, S_k]``.
    """
    h = cfg.num_heads
    q = split_heads(xq @ params[f"{prefix}.wq"] + params[f"{prefix}.bq"], h)
    k = split_heads(xk @ params[f"{prefix}.wk"] + params[f"{prefix}.bk"], h)
    v = split_heads(xv @ params[f"{prefix}.wv"] + params[f"{prefix}.bv"], h)
    if cfg.attention == "plga":
        q = nd.dropout(q, cfg.dropout_qk, training, rng)
        k = nd.dropout(k, cfg.dropout_qk, training, rng)
        hp = stacked_head_params(params, prefix, cfg)
        out, trace = plga_head_forward(
            q, k, v, hp, mask, causal=causal, query_keep=query_keep, eps=cfg.metric_eps,
            slope=cfg.leaky_slope, res_dropout=cfg.dropout_res, elm_dropout=cfg.dropout_elm,
            ln_eps=cfg.ln_eps, training=training, rng=rng)
    else:
        out, trace = sdpa_head_forward(q, k, v, mask)
    out = merge_heads(out) @ params[f"{prefix}.wo"] + params[f"{prefix}.bo"]
    return out, trace


# ---------------------------------------------------------------------------
# masks
# ---------------------------------------------------------------------------

def build_masks(src_ids, tgt_ids, pad_id: int = 0):
    """Additive masks ``(enc_pad, dec_causal_pad, xlm_pad)``.

    Shapes are ``[B, 1, S, S]``, ``[B, 1, T, T]`` and ``[B, 1, T, S]`` with
    ``MASK_VALUE`` on padding key columns and, for the decoder, strictly above
    the diagonal.
    """
    src = np.atleast_2d(np.asarray(src_ids))
    tgt = np.atleast_2d(np.asarray(tgt_ids))
    S, T = src.shape[1], tgt.shape[1]
    src_pad = (src == pad_id)[:, None, None, :]
    tgt_pad = (tgt == pad_id)[:, None, None, :]
    enc = np.where(np.broadcast_to(src_pad, (src.shape[0], 1, S, S)), MASK_VALUE, 0.0)
    future = np.triu(np.ones((T, T), dtype=bool), k=1)[None, None]
    dec = np.where(future | tgt_pad, MASK_VALUE, 0.0)
    xlm = np.where(np.broadcast_to(src_pad, (src.shape[0], 1, T, S)), MASK_VALUE, 0.0)
    return enc, dec, xlm


def keep_mask(ids, pad_id: int = 0) -> np.ndarray:
    """``[B, 1, S, 1]`` indicator of non-padding positions."""
    ids = np.atleast_2d(np.asarray(ids))
    return (ids != pad_id).astype(np.float64)[:, None, :, None]
