"""Greedy and beam-search decoding.

Both searches are written against a ``step_fn(prefixes) -> log_probs`` callable
(``prefixes`` is a list of equal-length id lists, the result is ``[n, V]``), so
they can be driven by the model or by hand-built logit tables.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import model as M
from . import ndgrad as nd
from .exceptions import ConfigError
from .textpipe import END, START, Vocabulary, normalize_text

StepFn = Callable[[list[list[int]]], np.ndarray]


@dataclass
class Hypothesis:
    tokens: list[int]
    logp: float = 0.0
    finished: bool = False

    @property
    def length(self) -> int:
        """Generated tokens, END included, START excluded."""
        return len(self.tokens) - 1

    def output(self) -> list[int]:
        out = self.tokens[1:]
        return out[:-1] if self.finished else out


def length_penalty(length: int, alpha: float) -> float:
    return ((5.0 + length) / 6.0) ** alpha


def normalized_score(h: Hypothesis, alpha: float) -> float:
    return h.logp / length_penalty(h.length, alpha)


def greedy_search(step_fn: StepFn, max_len: int, start: int = START, end: int = END) -> list[int]:
    seq = [start]
    while len(seq) - 1 < max_len:
        tok = int(np.argmax(step_fn([seq])[0]))
        if tok == end:
            break
        seq.append(tok)
    return seq[1:]


def beam_search(step_fn: StepFn, max_len: int, width: int = 4, alpha: float = 0.6,
                start: int = START, end: int = END) -> Hypothesis:
    """Shrinking-beam search with length-normalised final selection.

    Each step keeps the ``width - finished`` best expansions by raw log-prob
    (ties: higher step log-prob, then lower beam index, then lower token id).
    Finished hypotheses compete on ``logp / ((5 + T) / 6) ** alpha``; unfinished
    ones are only returned when nothing finished before ``max_len``.
    """
    if width < 1:
        raise ConfigError(f"beam width must be >= 1, got {width}")
    alive = [Hypothesis([start])]
    finished: list[Hypothesis] = []
    while alive and len(finished) < width and alive[0].length < max_len:
        lp = np.asarray(step_fn([h.tokens for h in alive]), dtype=np.float64)
        n, V = lp.shape
        scores = np.array([h.logp for h in alive])[:, None] + lp
        beam_idx = np.repeat(np.arange(n), V)
        tok_idx = np.tile(np.arange(V), n)
        order = np.lexsort((tok_idx, beam_idx, -lp.ravel(), -scores.ravel()))
        nxt = []
        for flat in order[:width - len(finished)]:
            b, t = int(beam_idx[flat]), int(tok_idx[flat])
            hyp = Hypothesis(alive[b].tokens + [t], float(scores.ravel()[flat]), t == end)
            (finished if hyp.finished else nxt).append(hyp)
        alive = nxt
    pool = finished or alive
    return max(pool, key=lambda h: normalized_score(h, alpha))


# ---------------------------------------------------------------------------
# model-driven decoding
# ---------------------------------------------------------------------------

def log_softmax_rows(logits: np.ndarray) -> np.ndarray:
    """Row-wise log-softmax that also accepts +inf logits (they share all the mass)."""
    with np.errstate(invalid="ignore"):
        m = logits.max(axis=-1, keepdims=True)
        z = np.where(np.isposinf(logits), 0.0, logits - m)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def model_step_fn(params, cfg, src_ids) -> StepFn:
    """Step function that encodes ``src_ids`` once and re-runs the decoder per call."""
    src = np.asarray(src_ids, dtype=np.int64).reshape(1, -1)
    with nd.no_grad():
        enc_out, _ = M.encoder_forward(params, cfg, src)
    w, b = params["out.w"].data, params["out.b"].data

    def step(prefixes: list[list[int]]) -> np.ndarray:
        n = len(prefixes)
        tgt = np.asarray(prefixes, dtype=np.int64)
        with nd.no_grad():
            enc = nd.Tensor(np.repeat(enc_out.data, n, axis=0))
            dec, _, _ = M.decoder_forward(params, cfg, tgt, enc, np.repeat(src, n, axis=0))
        return log_softmax_rows(dec.data[:, -1, :] @ w + b)

    return step


def greedy_decode(params, cfg, src_ids: Sequence[int], max_extra: int = 50) -> list[int]:
    return greedy_search(model_step_fn(params, cfg, src_ids), len(src_ids) + max_extra)


def beam_decode(params, cfg, src_ids: Sequence[int], width: int = 4, alpha: float = 0.6,
                max_extra: int = 50) -> list[int]:
    if width < 1:
        raise ConfigError(f"beam width must be >= 1, got {width}")
    hyp = beam_search(model_step_fn(params, cfg, src_ids), len(src_ids) + max_extra, width, alpha)
    return hyp.output()


def decode(params, cfg, src_ids: Sequence[int], beam: int = 1, alpha: float = 0.6,
           max_extra: int = 50) -> list[int]:
    if beam == 1:
        return greedy_decode(params, cfg, src_ids, max_extra)
    return beam_decode(params, cfg, src_ids, beam, alpha, max_extra)


def translate(params, cfg, vocab_src: Vocabulary, vocab_tgt: Vocabulary, sentences: Sequence[str],
              beam: int = 1, alpha: float = 0.6, max_extra: int = 50, lowercase: bool = False) -> list[str]:
    """Decode each sentence; blank inputs give blank outputs."""
    out = []
    for s in sentences:
        ids = vocab_src.encode(normalize_text(s, lowercase))
        out.append(vocab_tgt.decode(decode(params, cfg, ids, beam, alpha, max_extra)) if ids else "")
    return out
