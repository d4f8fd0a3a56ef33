"""Independent oracles and shared harnesses for the test suite.

The oracles use plain Python loops over floats (math module only) so they
share no code path with the vectorised implementation under test.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from plgt import ndgrad as nd
from plgt.config import RunConfig
from plgt.decoding import greedy_decode
from plgt.textpipe import ParallelCorpus, make_batches, train_vocab
from plgt.trainkit import Trainer, evaluate_batches

# ---------------------------------------------------------------------------
# scalar-loop linear algebra
# ---------------------------------------------------------------------------


def to_lists(a):
    return np.asarray(a, dtype=np.float64).tolist()


def loop_matmul(a, b):
    a, b = to_lists(a), to_lists(b)
    n, k, m = len(a), len(b), len(b[0])
    return [[math.fsum(a[i][t] * b[t][j] for t in range(k)) for j in range(m)] for i in range(n)]


def loop_transpose(a):
    a = to_lists(a)
    return [[a[i][j] for i in range(len(a))] for j in range(len(a[0]))]


def loop_softmax_row(row):
    mx = max(row)
    ex = [math.exp(v - mx) for v in row]
    s = math.fsum(ex)
    return [e / s for e in ex]


def loop_layer_norm_row(row, gain, bias, eps):
    n = len(row)
    mu = math.fsum(row) / n
    var = math.fsum((v - mu) ** 2 for v in row) / n
    return [(v - mu) / math.sqrt(var + eps) * g + b for v, g, b in zip(row, gain, bias)]


def loop_dense(x, w, b, act=None):
    out = loop_matmul(x, w)
    out = [[v + bb for v, bb in zip(row, b)] for row in out]
    if act == "relu":
        out = [[max(v, 0.0) for v in row] for row in out]
    return out


def loop_density(q):
    """Sum over sequence rows of outer products q_s q_s^T."""
    q = to_lists(q)
    dk = len(q[0])
    return [[math.fsum(row[i] * row[j] for row in q) for j in range(dk)] for i in range(dk)]


def loop_metric(D, units, W, b_W, eps=1e-9, ln_eps=1e-6):
    """Residual stack then ``ReLU(x W + b_W) + eps``; ``units`` holds numpy params of one head."""
    x = to_lists(D)
    for unit in units:
        y = x
        for w, b in unit["dense"]:
            y = loop_dense(y, w, to_lists(b), "relu")
        y = loop_dense(y, unit["proj"][0], to_lists(unit["proj"][1]))
        g, bb = to_lists(unit["ln"][0]), to_lists(unit["ln"][1])
        x = [loop_layer_norm_row([xi + yi for xi, yi in zip(xr, yr)], g, bb, ln_eps) for xr, yr in zip(x, y)]
    out = loop_dense(x, W, to_lists(b_W), "relu")
    return [[v + eps for v in row] for row in out]


def loop_ec(A, a, b_a, P):
    A, a, b_a, P = map(to_lists, (A, a, b_a, P))
    return [[a[i][j] * A[i][j] ** P[i][j] + b_a[i][j] for j in range(len(A[0]))] for i in range(len(A))]


def loop_localized(q, k, G, mask=None, slope=0.2):
    """Bilinear scores through G, scaled, leaky-rectified, masked, softmaxed."""
    q, k, G = map(to_lists, (q, k, G))
    dk = len(q[0])
    out = []
    for i in range(len(q)):
        row = []
        for j in range(len(k)):
            s = math.fsum(q[i][a] * G[a][b] * k[j][b] for a in range(dk) for b in range(dk)) / math.sqrt(dk)
            s = s if s >= 0 else slope * s
            if mask is not None:
                s += float(mask[i][j])
            row.append(s)
        out.append(loop_softmax_row(row))
    return out


def loop_sdpa(q, k, v, mask=None):
    q, k = to_lists(q), to_lists(k)
    dk = len(q[0])
    E = []
    for i in range(len(q)):
        row = [math.fsum(q[i][t] * k[j][t] for t in range(dk)) / math.sqrt(dk) for j in range(len(k))]
        if mask is not None:
            row = [s + float(m) for s, m in zip(row, mask[i])]
        E.append(loop_softmax_row(row))
    return loop_matmul(E, v)


def head_units(params, prefix, cfg, head):
    """Per-head numpy parameter dicts in the layout ``loop_metric`` expects."""
    units = []
    for u in range(cfg.res_units):
        base = f"{prefix}.res{u}"
        units.append({
            "dense": [(params[f"{base}.dense{j}.w"].data[head], params[f"{base}.dense{j}.b"].data[head])
                      for j in range(cfg.res_dense_layers)],
            "proj": (params[f"{base}.proj.w"].data[head], params[f"{base}.proj.b"].data[head]),
            "ln": (params[f"{base}.ln.g"].data[head], params[f"{base}.ln.b"].data[head]),
        })
    return units


# ---------------------------------------------------------------------------
# finite differences
# ---------------------------------------------------------------------------

def central_diff(f, x: np.ndarray, idx, h: float = 1e-6) -> float:
    old = x[idx]
    x[idx] = old + h
    fp = f()
    x[idx] = old - h
    fm = f()
    x[idx] = old
    return (fp - fm) / (2 * h)


def rel_err(a: float, b: float, floor: float = 1e-8) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def check_grad(fn, inputs: list[nd.Tensor], h: float = 1e-6, points: int = 10, seed: int = 0) -> float:
    """Worst relative error between tape and central-difference gradients of ``sum(fn(*inputs) * w)``."""
    rs = np.random.default_rng(seed)
    out = fn(*inputs)
    w = rs.normal(size=out.shape)

    def loss():
        return float(np.sum(fn(*inputs).data * w))

    for t in inputs:
        t.grad = None
    nd.backward(nd.tsum(fn(*inputs) * w))
    worst = 0.0
    for t in inputs:
        if not t.requires_grad:
            continue
        for _ in range(points):
            idx = tuple(int(rs.integers(n)) for n in t.shape)
            num = central_diff(loss, t.data, idx, h)
            worst = max(worst, rel_err(float(t.grad[idx]), num))
    return worst


# ---------------------------------------------------------------------------
# copy task
# ---------------------------------------------------------------------------

LEXICON = "red blue green cat dog sun moon tree fish bird".split()


def copy_pairs(n: int = 32, seed: int = 0) -> list[tuple[str, str]]:
    rs = np.random.default_rng(seed)
    pairs = []
    for _ in range(n):
        s = " ".join(rs.choice(LEXICON, int(rs.integers(3, 7))))
        pairs.append((s, s))
    return pairs


def desk_run(attention: str = "plga", **overrides) -> RunConfig:
    """Desk config (d=32, h=4, 2 residual units) with dropout off for memorisation checks."""
    run = RunConfig(attention=attention, dropout_outside=0.0, dropout_res=0.0, dropout_elm=0.0,
                    batch_size=32, warmup=50, lr_scale=0.3, dff=128, seed=0, src_vocab_cap=60,
                    tgt_vocab_cap=60)
    if attention == "sdpa":
        run.num_layers, run.num_heads = 4, 8
    return run.update(overrides)


@dataclass
class OverfitResult:
    attention: str
    trainer: Trainer
    steps: int
    accuracy: float
    exact_match: float
    initial_loss: float
    loss_at_100: float
    seconds: float
    pairs: list


def exact_match(trainer: Trainer, pairs) -> float:
    vs, vt = trainer.vocab_src, trainer.vocab_tgt
    hits = sum(greedy_decode(trainer.params, trainer.model_cfg, vs.encode(s)) == vt.encode(t) for s, t in pairs)
    return hits / len(pairs)


def overfit_copy_task(attention: str, max_steps: int = 300, check_every: int = 25,
                      acc_target: float = 0.99, exact_target: float = 0.95, **overrides) -> OverfitResult:
    """Train on the 32-pair copy task until both targets hold or ``max_steps`` run out."""
    start = time.perf_counter()
    pairs = copy_pairs()
    corpus = ParallelCorpus(pairs)
    run = desk_run(attention, **overrides)
    vs = train_vocab(corpus.sources(), run.src_vocab_cap)
    vt = train_vocab(corpus.targets(), run.tgt_vocab_cap)
    tr = Trainer.create(run, vs, vt)
    batches = make_batches(corpus, vs, vt, run.batch_size, run.max_seq_len)
    initial_loss, _ = evaluate_batches(tr.params, tr.model_cfg, batches)
    loss_100, acc, em = float("nan"), 0.0, 0.0
    for step in range(1, max_steps + 1):
        for b in batches:
            tr.train_step(b)
        if step == 100:
            loss_100, _ = evaluate_batches(tr.params, tr.model_cfg, batches)
        if step % check_every == 0 or step == max_steps:
            _, acc = evaluate_batches(tr.params, tr.model_cfg, batches)
            if acc >= acc_target:
                em = exact_match(tr, pairs)
                if em >= exact_target:
                    break
    if step < 100:
        loss_100, _ = evaluate_batches(tr.params, tr.model_cfg, batches)
    return OverfitResult(attention, tr, step, acc, em, initial_loss, loss_100,
                         time.perf_counter() - start, pairs)


# ---------------------------------------------------------------------------
# end-to-end gradient audit
# ---------------------------------------------------------------------------

AUDIT_FAMILIES = {
    "embedding": lambda n: n.endswith("_emb"),
    "residual unit": lambda n: ".res" in n,
    "W/b_W": lambda n: n.endswith((".W", ".b_W")),
    "a": lambda n: n.endswith(".a"),
    "b_a": lambda n: n.endswith(".b_a"),
    "P": lambda n: n.endswith(".P"),
    "FFN": lambda n: ".ffn." in n,
    "projections": lambda n: n.split(".")[-1] in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo") or n.startswith("out."),
    "layer norm": lambda n: ".ln" in n and ".res" not in n,
}


@dataclass
class AuditPoint:
    family: str
    name: str
    index: tuple
    tape: float
    numeric: float

    @property
    def rel(self) -> float:
        return rel_err(self.tape, self.numeric)


def gradient_audit(per_family: int = 3, seed: int = 0, h: float = 1e-6) -> list[AuditPoint]:
    """Tape vs central-difference gradients of the masked loss through a full PLGA forward.

    The power matrices are shrunk tenfold first. At glorot init some clamped
    metric entries raised to negative powers give curvature near 1e9, which
    saturates the softmax and makes most attention gradients vanish; the
    shrunk point keeps every family's gradient measurably non-zero.
    """
    from plgt import model as M
    from plgt.trainkit import masked_cross_entropy

    pairs = copy_pairs(4, seed=seed)
    corpus = ParallelCorpus(pairs)
    run = desk_run("plga")
    vs = train_vocab(corpus.sources(), run.src_vocab_cap)
    vt = train_vocab(corpus.targets(), run.tgt_vocab_cap)
    cfg = run.model_config(vs.size, vt.size)
    params = M.init_parameters(cfg, seed)
    for name, p in params.items():
        if name.endswith(".P"):
            p.data = p.data * 0.1
    batch = make_batches(corpus, vs, vt, 4, run.max_seq_len)[0]

    def loss_tensor():
        logits, _ = M.forward(params, cfg, batch.src_ids, batch.tgt_in, training=False)
        return masked_cross_entropy(logits, batch.tgt_out, batch.loss_mask)

    for p in params.values():
        p.grad = None
    nd.backward(loss_tensor())
    grads = {k: p.grad.copy() for k, p in params.items()}
    for p in params.values():
        p.grad = None

    def loss():
        with nd.no_grad():
            return loss_tensor().item()

    rs = np.random.default_rng(seed)
    points = []
    for family, member in AUDIT_FAMILIES.items():
        names = sorted(n for n in params if member(n))
        seen = set()
        while len(seen) < per_family:
            name = names[int(rs.integers(len(names)))]
            g = grads[name]
            # draw among the larger entries so the check is not vacuous
            flat = np.argsort(-np.abs(g), axis=None)[:max(1, g.size // 4)]
            idx = np.unravel_index(int(rs.choice(flat)), g.shape)
            if (name, idx) in seen:
                continue
            seen.add((name, idx))
            num = central_diff(loss, params[name].data, idx, h)
            points.append(AuditPoint(family, name, tuple(int(i) for i in idx), float(g[idx]), num))
    return points
