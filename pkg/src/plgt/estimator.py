"""scikit-learn style wrapper: ``fit(sources, targets)``, ``predict(sources)``, ``score``."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted, column_or_1d

from .bleu import corpus_bleu
from .config import RunConfig
from .decoding import translate
from .exceptions import DataError
from .textpipe import ParallelCorpus, normalize_text
from .trainkit import Trainer, train


def check_sentences(X, name: str = "X") -> list[str]:
    """Validate a 1-D collection of strings and return it as a list."""
    if isinstance(X, str):
        raise DataError(f"{name} must be a sequence of sentences, not a single string")
    try:
        arr = column_or_1d(np.asarray(list(X), dtype=object))
    except ValueError as exc:
        raise DataError(f"{name}: {exc}") from None
    bad = [i for i, s in enumerate(arr) if not isinstance(s, str)]
    if bad:
        raise DataError(f"{name}[{bad[0]}] is {type(arr[bad[0]]).__name__}, expected str")
    return [str(s) for s in arr]


class PowerLawGraphTranslator(BaseEstimator):
    """Sentence-to-sentence translator with power-law graph attention.

    ``attention="sdpa"`` swaps in standard scaled dot-product attention.
    Hyper-parameters mirror :class:`plgt.config.RunConfig`; ``fit`` builds the
    subword vocabularies from the training pairs.
    """

    def __init__(self, attention="plga", num_layers=1, num_heads=4, d_model=32, dff=64, a_dff=16,
                 res_units=2, res_dense_layers=2, dropout_outside=0.4, dropout_res=0.1, dropout_elm=0.1,
                 src_vocab_cap=200, tgt_vocab_cap=200, min_freq=2, lowercase=False, max_seq_len=64,
                 epochs=10, batch_size=64, warmup=0, lr_scale=1.0, seed=0, beam_width=4, alpha=0.6,
                 max_extra=50):
        self.attention = attention
        self.num_layers = num_layers
        self.num_heads = num_heads
        self.d_model = d_model
        self.dff = dff
        self.a_dff = a_dff
        self.res_units = res_units
        self.res_dense_layers = res_dense_layers
        self.dropout_outside = dropout_outside
        self.dropout_res = dropout_res
        self.dropout_elm = dropout_elm
        self.src_vocab_cap = src_vocab_cap
        self.tgt_vocab_cap = tgt_vocab_cap
        self.min_freq = min_freq
        self.lowercase = lowercase
        self.max_seq_len = max_seq_len
        self.epochs = epochs
        self.batch_size = batch_size
        self.warmup = warmup
        self.lr_scale = lr_scale
        self.seed = seed
        self.beam_width = beam_width
        self.alpha = alpha
        self.max_extra = max_extra

    def run_config(self) -> RunConfig:
        return RunConfig().update(self.get_params())

    def fit(self, X, y, X_val=None, y_val=None, ckpt_dir: str | Path | None = None):
        src, tgt = check_sentences(X, "X"), check_sentences(y, "y")
        if len(src) != len(tgt):
            raise DataError(f"X has {len(src)} sentences but y has {len(tgt)}")
        run = self.run_config()
        corpus = self._corpus(src, tgt, "train")
        val = None
        if X_val is not None:
            val = self._corpus(check_sentences(X_val, "X_val"), check_sentences(y_val, "y_val"), "val")
        self.trainer_ = train(run, corpus, val, ckpt_dir=ckpt_dir)
        self.history_ = self.trainer_.log
        self.n_parameters_ = sum(p.data.size for p in self.trainer_.params.values())
        return self

    def _corpus(self, src: list[str], tgt: list[str], split: str) -> ParallelCorpus:
        pairs = [(normalize_text(s, self.lowercase), normalize_text(t, self.lowercase))
                 for s, t in zip(src, tgt)]
        if not pairs:
            raise DataError(f"{split} set is empty")
        return ParallelCorpus(pairs, split)

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "trainer_")
        tr = self.trainer_
        out = translate(tr.params, tr.model_cfg, tr.vocab_src, tr.vocab_tgt, check_sentences(X),
                        beam=self.beam_width, alpha=self.alpha, max_extra=self.max_extra,
                        lowercase=self.lowercase)
        return np.array(out, dtype=object)

    def score(self, X, y) -> float:
        """Corpus BLEU (0-100) of the predictions against ``y``."""
        refs = [normalize_text(t, self.lowercase) for t in check_sentences(y, "y")]
        return corpus_bleu(list(self.predict(X)), refs).bleu

    def save(self, path: str | Path) -> None:
        check_is_fitted(self, "trainer_")
        self.trainer_.save(path)

    @classmethod
    def from_checkpoint(cls, path: str | Path) -> "PowerLawGraphTranslator":
        tr = Trainer.load(path)
        names = cls._get_param_names()
        est = cls(**{k: v for k, v in tr.run.to_dict().items() if k in names})
        est.trainer_ = tr
        est.history_ = tr.log
        est.n_parameters_ = sum(p.data.size for p in tr.params.values())
        return est
