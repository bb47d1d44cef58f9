"""Toy sequence tasks for comparing Transformer and Macaron stacks.

Token ids: 0 is padding, 1 marks the start of a decoder input, and the
remaining ``V - 2`` ids are data tokens drawn uniformly.

``copy`` trains an encoder-only stack with a per-position classifier;
``reverse`` trains an encoder-decoder stack and is scored by greedy decoding.
The input embedding is shared with the output projection.
"""
from __future__ import annotations

import csv
import io
import json
import math
import statistics
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .layers import (
    LayerParams,
    causal_mask,
    init_layer,
    layer_forward,
    param_count,
    sinusoidal_positions,
)
from .tensor import ContractError, Tensor, embed, glorot_init, make_rng

PAD, BOS = 0, 1
N_SPECIAL = 2
TASKS = ("copy", "reverse")
ARCHITECTURES = ("transformer", "macaron")
EMBED_INIT_SCALE = 0.03
COMPARE_HEADER = ("arch", "task", "seed", "steps_to_threshold", "final_token_acc", "param_count")
# published IWSLT14 De-En BLEU (small setting); context only, never a test target
PUBLISHED_BLEU = {"macaron": 35.4, "transformer": 34.4}


class DivergenceError(ArithmeticError):
    def __init__(self, step: int):
        super().__init__(f"training diverged (non-finite loss) at step {step}")
        self.step = step


# ---------------------------------------------------------------- data


@dataclass(frozen=True)
class TaskSpec:
    name: str = "copy"
    vocab_size: int = 16
    length: int = 12
    train_size: int = 20000
    valid_size: int = 512
    seed: int = 0

    def __post_init__(self):
        if self.name not in TASKS:
            raise ContractError(f"unknown task {self.name!r}; expected one of {TASKS}")
        if self.vocab_size < N_SPECIAL + 1:
            raise ContractError("vocabulary needs at least one data token beyond pad and begin")
        if self.length < 1 or self.train_size < 1 or self.valid_size < 1:
            raise ContractError("length and dataset sizes must be positive")

    @property
    def uses_decoder(self) -> bool:
        return self.name == "reverse"


@dataclass(frozen=True)
class Dataset:
    train_src: np.ndarray
    train_tgt: np.ndarray
    valid_src: np.ndarray
    valid_tgt: np.ndarray


def task_target(name: str, src: np.ndarray) -> np.ndarray:
    return src.copy() if name == "copy" else src[..., ::-1].copy()


def generate_task(spec: TaskSpec) -> Dataset:
    """Deterministic train/valid split drawn from separate seed streams.

    When the sequence space is small enough to enumerate (n log2 V <= 40),
    validation sequences that also occur in training are redrawn.
    """
    def draw(rng, count):
        return rng.integers(N_SPECIAL, spec.vocab_size, size=(count, spec.length))

    train = draw(make_rng(spec.seed, 0), spec.train_size)
    valid_rng = make_rng(spec.seed, 1)
    valid = draw(valid_rng, spec.valid_size)
    if spec.length * math.log2(spec.vocab_size) <= 40:
        seen = {row.tobytes() for row in train}
        space = (spec.vocab_size - N_SPECIAL) ** spec.length
        if space - len(seen) < spec.valid_size:
            raise ContractError("sequence space too small for disjoint train/valid sets")
        for i in range(spec.valid_size):
            while valid[i].tobytes() in seen:
                valid[i] = draw(valid_rng, 1)[0]
    return Dataset(train, task_target(spec.name, train), valid, task_target(spec.name, valid))


# ---------------------------------------------------------------- model


@dataclass(frozen=True)
class ModelConfig:
    architecture: str = "transformer"
    layers: int = 2
    d_model: int = 32
    heads: int = 4
    d_ff: Optional[int] = None
    decoder: bool = False
    layer_norm: bool = False

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ContractError(f"unknown architecture {self.architecture!r}")
        if self.layers < 1:
            raise ContractError("need at least one layer")


@dataclass
class Model:
    config: ModelConfig
    embedding: Tensor
    encoder: list[LayerParams]
    decoder: list[LayerParams] = field(default_factory=list)

    def parameters(self) -> list[Tensor]:
        params = [self.embedding]
        for layer in self.encoder + self.decoder:
            params += layer.parameters()
        return params

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = [("embedding", self.embedding)]
        for tag, stack in (("encoder", self.encoder), ("decoder", self.decoder)):
            for l, layer in enumerate(stack):
                out += [(f"{tag}.{l}.{n}", p) for n, p in layer.named_parameters()]
        return out

    @property
    def vocab_size(self) -> int:
        return self.embedding.shape[0]


def build_model(config: ModelConfig, vocab_size: int, seed: int) -> Model:
    rng = make_rng(seed, 2)
    emb = Tensor(EMBED_INIT_SCALE * glorot_init(vocab_size, config.d_model, rng), requires_grad=True)
    arch = config.architecture
    encoder = [init_layer(arch, config.d_model, config.heads, rng, config.d_ff, layer_norm=config.layer_norm)
               for _ in range(config.layers)]
    decoder = []
    if config.decoder:
        decoder = [init_layer(f"{arch}-decoder", config.d_model, config.heads, rng, config.d_ff,
                              layer_norm=config.layer_norm)
                   for _ in range(config.layers)]
    return Model(config, emb, encoder, decoder)


def count_parameters(model: Model) -> tuple[int, int]:
    """(total, weight-matrix) scalar counts, embedding included in both."""
    total = weights = model.embedding.data.size
    for layer in model.encoder + model.decoder:
        c = param_count(layer)
        total += c.total
        weights += c.weights
    return total, weights


def _embed_tokens(model: Model, tokens: np.ndarray) -> Tensor:
    d = model.config.d_model
    pos = sinusoidal_positions(tokens.shape[-1], d)
    return embed(model.embedding, tokens) * math.sqrt(d) + pos


def encode(model: Model, src: np.ndarray) -> Tensor:
    h = _embed_tokens(model, src)
    for layer in model.encoder:
        h = layer_forward(h, layer)
    return h


def decode(model: Model, memory: Tensor, tgt_in: np.ndarray) -> Tensor:
    h = _embed_tokens(model, tgt_in)
    mask = causal_mask(tgt_in.shape[-1])
    for layer in model.decoder:
        h = layer_forward(h, layer, mask=mask, encoder_output=memory)
    return h


def logits(model: Model, src: np.ndarray, tgt_in: Optional[np.ndarray] = None) -> Tensor:
    h = encode(model, src)
    if model.config.decoder:
        if tgt_in is None:
            raise ContractError("encoder-decoder model needs decoder inputs")
        h = decode(model, h, tgt_in)
    return h @ model.embedding.T


def shift_right(tgt: np.ndarray) -> np.ndarray:
    out = np.empty_like(tgt)
    out[..., 0] = BOS
    out[..., 1:] = tgt[..., :-1]
    return out


def greedy_decode(model: Model, src: np.ndarray) -> np.ndarray:
    """Autoregressive argmax decoding of ``n`` tokens per source row."""
    if not model.config.decoder:
        raise ContractError("greedy decoding needs an encoder-decoder model")
    src = np.atleast_2d(src)
    memory = encode(model, src)
    n = src.shape[-1]
    out = np.full(src.shape, PAD, dtype=np.int64)
    for i in range(n):
        tgt_in = shift_right(out)[:, : i + 1]
        h = decode(model, memory, tgt_in)
        step_logits = (h[:, i:i + 1, :] @ model.embedding.T).data[:, 0, :]
        out[:, i] = np.argmax(step_logits, axis=-1)
    return out


def predict(model: Model, src: np.ndarray) -> np.ndarray:
    if model.config.decoder:
        return greedy_decode(model, src)
    return np.argmax(logits(model, src).data, axis=-1)


# ---------------------------------------------------------------- loss and optimizer


def label_smoothed_cross_entropy(logits_: Tensor, targets: np.ndarray, eps_ls: float = 0.1) -> Tensor:
    """Mean cross-entropy against (1 - eps) on the gold token, eps/(V-1) elsewhere."""
    if not 0.0 <= eps_ls < 1.0:
        raise ContractError(f"label smoothing must lie in [0, 1), got {eps_ls}")
    vocab = logits_.shape[-1]
    targets = np.asarray(targets)
    if targets.size and (targets.min() < 0 or targets.max() >= vocab):
        raise ContractError(f"target id out of range [0, {vocab})")
    off = eps_ls / (vocab - 1) if vocab > 1 else 0.0
    dist = np.full(targets.shape + (vocab,), off)
    np.put_along_axis(dist, targets[..., None], 1.0 - eps_ls, axis=-1)
    logp = logits_.log_softmax()
    return -(logp * dist).sum() * (1.0 / targets.size)


def smoothed_target_entropy(vocab: int, eps_ls: float) -> float:
    """Lower bound of the smoothed loss: entropy of the target distribution."""
    ent = 0.0 if eps_ls == 1.0 else -(1 - eps_ls) * math.log(1 - eps_ls)
    if eps_ls > 0:
        off = eps_ls / (vocab - 1)
        ent -= (vocab - 1) * off * math.log(off)
    return ent


def noam_lr(step: int, d_model: int, warmup: int, factor: float = 1.0) -> float:
    """factor * d_model^-0.5 * min(step^-0.5, step * warmup^-1.5)."""
    step = max(step, 1)
    return factor * d_model**-0.5 * min(step**-0.5, step * warmup**-1.5)


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0

    @classmethod
    def zeros(cls, params: Sequence[np.ndarray]) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.98, eps: float = 1e-9) -> AdamState:
    """One bias-corrected Adam update, in place on ``params``; returns the new state."""
    t = state.step + 1
    m_new, v_new = [], []
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ContractError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
        m_new.append(m)
        v_new.append(v)
    return AdamState(m_new, v_new, t)


# ---------------------------------------------------------------- training


@dataclass(frozen=True)
class TrainConfig:
    max_steps: int = 3000
    batch_size: int = 64
    warmup: int = 400
    lr_factor: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.98
    adam_eps: float = 1e-9
    label_smoothing: float = 0.1
    eval_interval: int = 100
    threshold: float = 0.99
    # "token_acc" or "seq_acc"; the metric compared against ``threshold``
    target_metric: str = "token_acc"
    stop_at_threshold: bool = True
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ContractError("label smoothing must lie in [0, 1)")
        if self.warmup < 1:
            raise ContractError("warmup must be at least 1")
        if self.target_metric not in ("token_acc", "seq_acc"):
            raise ContractError(f"unknown metric {self.target_metric!r}")


@dataclass
class RunRecord:
    architecture: str
    task: str
    seed: int
    param_count: int
    losses: list[float] = field(default_factory=list)
    evals: list[dict] = field(default_factory=list)
    steps_to_threshold: Optional[int] = None
    wall_clock: float = 0.0

    @property
    def final(self) -> dict:
        return self.evals[-1] if self.evals else {}

    def jsonl(self) -> str:
        return "".join(json.dumps(e) + "\n" for e in self.evals)


def evaluate(model: Model, src: np.ndarray, tgt: np.ndarray) -> tuple[float, float]:
    """(token accuracy, sequence accuracy) of the model's predictions."""
    pred = predict(model, src)
    hits = pred == tgt
    return float(hits.mean()), float(hits.all(axis=-1).mean())


def batch_loss(model: Model, src: np.ndarray, tgt: np.ndarray, eps_ls: float) -> Tensor:
    tgt_in = shift_right(tgt) if model.config.decoder else None
    return label_smoothed_cross_entropy(logits(model, src, tgt_in), tgt, eps_ls)


def train(model_cfg: ModelConfig, task: TaskSpec, cfg: TrainConfig, model: Optional[Model] = None) -> RunRecord:
    """Train one model; deterministic given the task seed and ``cfg.seed``."""
    if task.uses_decoder and not model_cfg.decoder:
        raise ContractError(f"task {task.name!r} needs an encoder-decoder model")
    data = generate_task(task)
    model = build_model(model_cfg, task.vocab_size, cfg.seed) if model is None else model
    params = model.parameters()
    record = RunRecord(model_cfg.architecture, task.name, cfg.seed, count_parameters(model)[0])
    state = AdamState.zeros([p.data for p in params])
    rng = make_rng(cfg.seed, 3)
    order = rng.permutation(task.train_size)
    cursor = 0
    start = time.perf_counter()
    last_loss = None

    def run_eval(step):
        tok, seq = evaluate(model, data.valid_src, data.valid_tgt)
        record.evals.append({"step": step, "loss": last_loss, "token_acc": tok, "seq_acc": seq})
        hit = (tok if cfg.target_metric == "token_acc" else seq) >= cfg.threshold
        if hit and record.steps_to_threshold is None:
            record.steps_to_threshold = step
        return hit

    done = cfg.max_steps == 0 and run_eval(0)
    for step in range(1, cfg.max_steps + 1):
        if cursor + cfg.batch_size > task.train_size:
            order = rng.permutation(task.train_size)
            cursor = 0
        idx = order[cursor: cursor + cfg.batch_size]
        cursor += cfg.batch_size
        for p in params:
            p.zero_grad()
        loss = batch_loss(model, data.train_src[idx], data.train_tgt[idx], cfg.label_smoothing)
        last_loss = float(loss.data)
        if not math.isfinite(last_loss):
            raise DivergenceError(step)
        record.losses.append(last_loss)
        loss.backward()
        lr = noam_lr(step, model_cfg.d_model, cfg.warmup, cfg.lr_factor)
        state = adam_step([p.data for p in params], [p.grad for p in params], state, lr,
                          cfg.beta1, cfg.beta2, cfg.adam_eps)
        if step % cfg.eval_interval == 0 or step == cfg.max_steps:
            done = run_eval(step)
            if done and cfg.stop_at_threshold:
                break
    record.wall_clock = time.perf_counter() - start
    return record


def default_configs(task: TaskSpec, architecture: str, **overrides) -> tuple[ModelConfig, TrainConfig]:
    """Toy-scale defaults: copy reaches 0.99 token accuracy, reverse 0.95 sequence accuracy."""
    model_cfg = ModelConfig(architecture=architecture, decoder=task.uses_decoder)
    if task.uses_decoder:
        train_cfg = TrainConfig(max_steps=10000, threshold=0.95, target_metric="seq_acc", eval_interval=250)
    else:
        train_cfg = TrainConfig()
    model_kw = {k: v for k, v in overrides.items() if k in ModelConfig.__dataclass_fields__}
    train_kw = {k: v for k, v in overrides.items() if k in TrainConfig.__dataclass_fields__}
    return (ModelConfig(**{**model_cfg.__dict__, **model_kw}),
            TrainConfig(**{**train_cfg.__dict__, **train_kw}))


# ---------------------------------------------------------------- comparison


@dataclass
class Comparison:
    records: list[RunRecord]
    summary: list[dict]

    def csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(COMPARE_HEADER)
        for r in self.records:
            steps = "" if r.steps_to_threshold is None else r.steps_to_threshold
            w.writerow([r.architecture, r.task, r.seed, steps, f"{r.final.get('token_acc', 0.0):.17g}",
                        r.param_count])
        return buf.getvalue()

    def report(self) -> str:
        lines = []
        for s in self.summary:
            lines.append(
                f"{s['arch']:<12} {s['task']:<8} steps_to_threshold {s['steps_mean']:.1f} ± {s['steps_std']:.1f}"
                f" (reached {s['reached']}/{s['runs']})  final_token_acc {s['acc_mean']:.4f} ± {s['acc_std']:.4f}")
        lines.append("Published IWSLT14 De-En BLEU, small setting: Macaron {macaron}, Transformer {transformer}."
                     " Not reproducible at toy scale.".format(**PUBLISHED_BLEU))
        return "\n".join(lines)


def _mean_std(values: list[float]) -> tuple[float, float]:
    if not values:
        return float("nan"), float("nan")
    return statistics.fmean(values), statistics.pstdev(values) if len(values) > 1 else 0.0


def compare(architectures: Sequence[str], tasks: Sequence[TaskSpec], seeds: Sequence[int],
            **overrides) -> Comparison:
    """Train every (architecture, task, seed); summarise without ranking."""
    if len(seeds) < 3:
        raise ContractError("comparison needs at least 3 seeds")
    records, summary = [], []
    for arch in architectures:
        for task in tasks:
            group = []
            for seed in seeds:
                model_cfg, train_cfg = default_configs(task, arch, **overrides)
                train_cfg = TrainConfig(**{**train_cfg.__dict__, "seed": seed})
                group.append(train(model_cfg, task, train_cfg))
            records += group
            steps = [float(r.steps_to_threshold) for r in group if r.steps_to_threshold is not None]
            accs = [r.final.get("token_acc", 0.0) for r in group]
            sm, ss = _mean_std(steps)
            am, as_ = _mean_std(accs)
            summary.append({"arch": arch, "task": task.name, "runs": len(group), "reached": len(steps),
                            "steps_mean": sm, "steps_std": ss, "acc_mean": am, "acc_std": as_})
    return Comparison(records, summary)
