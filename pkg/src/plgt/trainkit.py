"""Loss, metrics, Adam with the warmup schedule, the training loop and checkpoints."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import model as M
from . import ndgrad as nd
from .checkpoint import read_checkpoint, write_checkpoint
from .config import ModelConfig, RunConfig
from .exceptions import CheckpointError, DataError, ShapeError, TrainingError
from .ndgrad import Tensor
from .textpipe import Batch, ParallelCorpus, Vocabulary, make_batches, train_vocab

logger = logging.getLogger(__name__)

LOG_HEADER = ("epoch", "train_loss", "train_acc", "val_loss", "val_acc")


def masked_cross_entropy(logits: Tensor, tgt_out, loss_mask) -> Tensor:
    """Mean of ``-log softmax(logits)[gold]`` over unmasked positions."""
    mask = np.asarray(loss_mask, dtype=np.float64)
    total = mask.sum()
    if total <= 0:
        raise DataError("loss mask selects no positions")
    gold = nd.pick(nd.log_softmax_lastdim(logits), tgt_out)
    return -(gold * mask).sum() * (1.0 / total)


def token_accuracy(logits, tgt_out, loss_mask) -> float:
    """Fraction of unmasked positions whose argmax (lowest id on ties) is the gold id."""
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    mask = np.asarray(loss_mask, dtype=np.float64)
    hit = (np.argmax(data, axis=-1) == np.asarray(tgt_out)).astype(np.float64)
    return float((hit * mask).sum() / mask.sum())


def schedule_branches(step: int, warmup: int) -> tuple[float, float]:
    """The decay and warmup branches, both written as ``step^-0.5`` times a factor.

    ``step * warmup^-1.5`` equals ``step^-0.5 * (step / warmup)^1.5``; the
    second form makes the two branches bitwise equal at ``step == warmup``.
    """
    base = step ** -0.5
    return base, base * (step / warmup) ** 1.5


def lr_schedule(step: int, d_model: int, warmup: int, scale: float = 1.0) -> float:
    """``d^-0.5 * min(step^-0.5, step * warmup^-1.5)``, optionally scaled."""
    step = max(int(step), 1)
    return scale * d_model ** -0.5 * min(schedule_branches(step, warmup))


class Adam:
    """Bias-corrected Adam over a name -> Tensor parameter dict."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.98, eps: float = 1e-9):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, Tensor], lr: float) -> None:
        for name, p in params.items():
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise TrainingError(f"non-finite gradient in parameter {name!r}")
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, p in params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if g.shape != p.shape:
                raise ShapeError(f"gradient for {name!r} has shape {g.shape}, parameter {p.shape}")
            m = self.m.get(name)
            v = self.v.get(name)
            if m is None:
                m, v = np.zeros_like(p.data), np.zeros_like(p.data)
            m = self.beta1 * m + (1.0 - self.beta1) * g
            v = self.beta2 * v + (1.0 - self.beta2) * g * g
            self.m[name], self.v[name] = m, v
            p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def zero_grads(params: dict[str, Tensor]) -> None:
    for p in params.values():
        p.grad = None


# ---------------------------------------------------------------------------
# logs
# ---------------------------------------------------------------------------

@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: float = math.nan
    val_acc: float = math.nan

    def row(self) -> list:
        return [self.epoch, self.train_loss, self.train_acc, self.val_loss, self.val_acc]


class TrainLog(list):
    """Append-only list of :class:`EpochLog`, one per finished epoch."""

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(LOG_HEADER)
            for e in self:
                w.writerow([e.epoch] + [repr(float(x)) for x in e.row()[1:]])

    @classmethod
    def read_csv(cls, path: str | Path) -> "TrainLog":
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
        if not rows or tuple(rows[0]) != LOG_HEADER:
            raise DataError(f"{path}: not a training log")
        return cls(EpochLog(int(r[0]), *map(float, r[1:])) for r in rows[1:])


# ---------------------------------------------------------------------------
# evaluation helpers
# ---------------------------------------------------------------------------

def evaluate_batches(params, cfg: ModelConfig, batches: list[Batch]) -> tuple[float, float]:
    """Token-weighted loss and accuracy in inference mode."""
    loss_sum = hit_sum = n_sum = 0.0
    with nd.no_grad():
        for b in batches:
            logits, _ = M.forward(params, cfg, b.src_ids, b.tgt_in, training=False)
            n = b.loss_mask.sum()
            loss_sum += masked_cross_entropy(logits, b.tgt_out, b.loss_mask).item() * n
            hit_sum += token_accuracy(logits, b.tgt_out, b.loss_mask) * n
            n_sum += n
    return loss_sum / n_sum, hit_sum / n_sum


# ---------------------------------------------------------------------------
# trainer
# ---------------------------------------------------------------------------

@dataclass
class Trainer:
    """Owns parameters, optimiser state and counters for one run.

    Dropout masks for step ``s`` come from ``Rng(seed, "dropout", s)`` and the
    epoch-``e`` shuffle from a seed derived from ``(seed, e)``, so a run resumed
    from a checkpoint replays the uninterrupted run exactly.
    """

    run: RunConfig
    model_cfg: ModelConfig
    vocab_src: Vocabulary
    vocab_tgt: Vocabulary
    params: dict[str, Tensor] = field(default_factory=dict)
    adam: Adam = field(default_factory=Adam)
    step: int = 0
    epoch: int = 0
    log: TrainLog = field(default_factory=TrainLog)
    best: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.params:
            self.params = M.init_parameters(self.model_cfg, self.run.seed)

    @classmethod
    def create(cls, run: RunConfig, vocab_src: Vocabulary, vocab_tgt: Vocabulary) -> "Trainer":
        return cls(run, run.model_config(vocab_src.size, vocab_tgt.size), vocab_src, vocab_tgt)

    # -- single steps -----------------------------------------------------
    def current_lr(self, step: int | None = None) -> float:
        s = self.step + 1 if step is None else step
        return lr_schedule(s, self.model_cfg.d_model, self.run.warmup_steps(), self.run.lr_scale)

    def train_step(self, batch: Batch) -> tuple[float, float]:
        """One forward/backward/Adam update; returns (loss, token accuracy)."""
        rng = nd.Rng(self.run.seed, "dropout", self.step + 1)
        zero_grads(self.params)
        logits, _ = M.forward(self.params, self.model_cfg, batch.src_ids, batch.tgt_in, training=True, rng=rng)
        loss = masked_cross_entropy(logits, batch.tgt_out, batch.loss_mask)
        if not math.isfinite(loss.item()):
            raise TrainingError(f"loss became non-finite at step {self.step + 1}")
        nd.backward(loss)
        lr = self.current_lr()
        self.adam.step(self.params, lr)
        self.step += 1
        zero_grads(self.params)
        return loss.item(), token_accuracy(logits, batch.tgt_out, batch.loss_mask)

    def epoch_batches(self, corpus: ParallelCorpus, epoch: int) -> list[Batch]:
        return make_batches(corpus, self.vocab_src, self.vocab_tgt, self.run.batch_size,
                            self.run.max_seq_len, shuffle_seed=self.run.seed * 1_000_003 + epoch)

    def run_epoch(self, train: ParallelCorpus, val: ParallelCorpus | None = None) -> EpochLog:
        batches = self.epoch_batches(train, self.epoch + 1)
        loss_sum = acc_sum = n_sum = 0.0
        for b in batches:
            loss, acc = self.train_step(b)
            n = b.loss_mask.sum()
            loss_sum += loss * n
            acc_sum += acc * n
            n_sum += n
        self.epoch += 1
        entry = EpochLog(self.epoch, float(loss_sum / n_sum), float(acc_sum / n_sum))
        if val is not None and len(val):
            vb = make_batches(val, self.vocab_src, self.vocab_tgt, self.run.batch_size, self.run.max_seq_len)
            entry.val_loss, entry.val_acc = evaluate_batches(self.params, self.model_cfg, vb)
        self.log.append(entry)
        return entry

    # -- loop with checkpoint policy -----------------------------------------
    def fit(self, train: ParallelCorpus, val: ParallelCorpus | None = None, epochs: int | None = None,
            ckpt_dir: str | Path | None = None) -> TrainLog:
        epochs = self.run.epochs if epochs is None else epochs
        ckpt_dir = Path(ckpt_dir) if ckpt_dir else None
        if ckpt_dir and self.epoch == 0:
            self.save(ckpt_dir / "initial.ckpt")
        for _ in range(epochs):
            try:
                entry = self.run_epoch(train, val)
            except TrainingError:
                logger.error("training diverged; last good checkpoint kept in %s", ckpt_dir)
                raise
            logger.info("epoch %d loss %.4f acc %.4f val_loss %.4f val_acc %.4f", *entry.row())
            if ckpt_dir:
                self._apply_policy(entry, ckpt_dir)
        return self.log

    def _apply_policy(self, entry: EpochLog, ckpt_dir: Path) -> None:
        loss = entry.val_loss if math.isfinite(entry.val_loss) else entry.train_loss
        acc = entry.val_acc if math.isfinite(entry.val_acc) else entry.train_acc
        self.save(ckpt_dir / "last.ckpt")
        if loss < self.best.get("min_loss", math.inf):
            self.best["min_loss"], self.best["min_loss_epoch"] = loss, entry.epoch
            self.save(ckpt_dir / "min_val_loss.ckpt")
        if entry.epoch == self.best.get("min_loss_epoch", -1) + self.run.patience_epochs:
            self.save(ckpt_dir / "min_val_loss_plus10.ckpt")
        if acc > self.best.get("max_acc", -math.inf):
            self.best["max_acc"], self.best["max_acc_epoch"] = acc, entry.epoch
            self.save(ckpt_dir / "best_val_acc.ckpt")
        k = self.run.checkpoint_every
        if k and entry.epoch % k == 0:
            self.save(ckpt_dir / f"epoch_{entry.epoch:04d}.ckpt")

    # -- persistence ------------------------------------------------------
    def state_blob(self) -> dict:
        return {
            "format": "plgt",
            "run": self.run.to_dict(),
            "model": self.model_cfg.to_dict(),
            "vocab_src": self.vocab_src.id_to_token,
            "vocab_tgt": self.vocab_tgt.id_to_token,
            "state": {"epoch": self.epoch, "step": self.step, "adam_t": self.adam.t,
                      "adam": [self.adam.beta1, self.adam.beta2, self.adam.eps], "best": self.best},
            "log": [e.row() for e in self.log],
        }

    def tensors(self) -> dict[str, np.ndarray]:
        out = {f"param/{k}": p.data for k, p in self.params.items()}
        out.update({f"adam_m/{k}": v for k, v in self.adam.m.items()})
        out.update({f"adam_v/{k}": v for k, v in self.adam.v.items()})
        return out

    def save(self, path: str | Path) -> None:
        write_checkpoint(path, self.state_blob(), self.tensors())

    @classmethod
    def load(cls, path: str | Path) -> "Trainer":
        blob, tensors = read_checkpoint(path)
        return cls.from_state(blob, tensors)

    @classmethod
    def from_state(cls, blob: dict, tensors: dict[str, np.ndarray]) -> "Trainer":
        try:
            run = RunConfig.from_dict(blob["run"])
            cfg = ModelConfig.from_dict(blob["model"]).validate()
            vs = Vocabulary.from_list(blob["vocab_src"])
            vt = Vocabulary.from_list(blob["vocab_tgt"])
            state = blob["state"]
        except KeyError as exc:
            raise CheckpointError(f"checkpoint config lacks {exc}") from None
        specs = M.param_specs(cfg)
        params = {}
        for name, (shape, _) in specs.items():
            arr = tensors.get(f"param/{name}")
            if arr is None:
                raise CheckpointError(f"checkpoint lacks parameter {name!r}")
            if tuple(arr.shape) != tuple(shape):
                raise CheckpointError(f"{name}: shape {tuple(arr.shape)} does not match config {tuple(shape)}")
            params[name] = Tensor(arr.astype(np.float64), requires_grad=True, name=name)
        adam = Adam(*state.get("adam", (0.9, 0.98, 1e-9)))
        adam.t = int(state["adam_t"])
        for key, arr in tensors.items():
            kind, _, name = key.partition("/")
            if kind == "adam_m":
                adam.m[name] = arr.astype(np.float64)
            elif kind == "adam_v":
                adam.v[name] = arr.astype(np.float64)
        log = TrainLog(EpochLog(int(r[0]), *map(float, r[1:])) for r in blob.get("log", []))
        return cls(run, cfg, vs, vt, params=params, adam=adam, step=int(state["step"]),
                   epoch=int(state["epoch"]), log=log, best=dict(state.get("best", {})))


def train(run: RunConfig, train_corpus: ParallelCorpus, val_corpus: ParallelCorpus | None = None,
          vocab_src: Vocabulary | None = None, vocab_tgt: Vocabulary | None = None,
          ckpt_dir: str | Path | None = None) -> Trainer:
    """Build vocabularies if needed, train ``run.epochs`` epochs and return the trainer."""
    if vocab_src is None:
        vocab_src = train_vocab(train_corpus.sources(), run.src_vocab_cap, run.min_freq)
    if vocab_tgt is None:
        vocab_tgt = train_vocab(train_corpus.targets(), run.tgt_vocab_cap, run.min_freq)
    trainer = Trainer.create(run, vocab_src, vocab_tgt)
    trainer.fit(train_corpus, val_corpus, run.epochs, ckpt_dir)
    return trainer
