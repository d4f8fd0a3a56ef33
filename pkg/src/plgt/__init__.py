"""Neural machine translation with power-law graph attention, on a small numpy autodiff core."""

from .bleu import BleuReport, corpus_bleu
from .config import ModelConfig, RunConfig, load_run_config, table1_config
from .decoding import beam_decode, greedy_decode, translate
from .deductive import capture, export_bundle, histogram, render_heatmap_svg
from .estimator import PowerLawGraphTranslator
from .model import count_parameters, forward, init_parameters
from .textpipe import ParallelCorpus, Vocabulary, make_batches, read_corpus, train_vocab
from .trainkit import Trainer, lr_schedule

__version__ = "0.1.0"

__all__ = [
    "BleuReport", "corpus_bleu", "ModelConfig", "RunConfig", "load_run_config", "table1_config",
    "beam_decode", "greedy_decode", "translate", "capture", "export_bundle", "histogram",
    "render_heatmap_svg", "PowerLawGraphTranslator", "count_parameters", "forward", "init_parameters",
    "ParallelCorpus", "Vocabulary", "make_batches", "read_corpus", "train_vocab", "Trainer", "lr_schedule",
]
