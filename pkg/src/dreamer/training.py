"""Optimizer, schedule, synthetic tasks, and the deterministic training loop."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .errors import ConfigError, InputError, NumericError
from .model import DreamerModel
from .params import ParameterStore, init_parameters, save_checkpoint

SEPARATOR_TOKEN = 0
IGNORE_TARGET = -1
TASK_KINDS = ("copy", "reverse", "modular_sum_chain", "token_lm")


def lr_at(step: int, max_lr: float = 4e-4, warmup_steps: int = 500) -> float:
    """Linear warmup to `max_lr`, constant afterwards; step 0 is nonzero."""
    if step < 0:
        raise ConfigError(f"step must be >= 0, got {step}")
    return max_lr * min(1.0, (step + 1) / warmup_steps)


def global_grad_norm(grads: dict[str, np.ndarray]) -> float:
    total = 0.0
    for g in grads.values():
        total += float(np.sum(np.asarray(g, dtype=np.float64) ** 2))
    return float(np.sqrt(total))


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients in place so the global L2 norm is <= max_norm.

    Returns the pre-clip norm. A non-finite gradient anywhere is an
    abort-step condition and raises NumericError.
    """
    norm = global_grad_norm(grads)
    if not np.isfinite(norm):
        bad = sorted(name for name, g in grads.items()
                     if not np.all(np.isfinite(g)))
        raise NumericError(f"non-finite gradient in {bad}")
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


@dataclass
class OptimizerState:
    """AdamW moments plus the schedule and decay hyperparameters."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-3
    max_lr: float = 4e-4
    warmup_steps: int = 500
    grad_clip: float = 0.5

    @classmethod
    def for_store(cls, store: ParameterStore, cfg: ModelConfig) -> "OptimizerState":
        m = {name: np.zeros_like(t.data) for name, t in store.learnable().items()}
        v = {name: np.zeros_like(t.data) for name, t in store.learnable().items()}
        return cls(m=m, v=v, beta1=cfg.adam_beta1, beta2=cfg.adam_beta2,
                   eps=cfg.adam_eps, weight_decay=cfg.weight_decay,
                   max_lr=cfg.max_lr, warmup_steps=cfg.warmup_steps,
                   grad_clip=cfg.grad_clip)


def adamw_step(params: ParameterStore, grads: dict[str, np.ndarray],
               state: OptimizerState) -> float:
    """One bias-corrected AdamW update with decoupled weight decay.

    Decay is applied after the adaptive update but against the pre-step
    parameter value. Returns the learning rate used.
    """
    lr = lr_at(state.step, state.max_lr, state.warmup_steps)
    state.step += 1
    t = state.step
    correct1 = 1.0 - state.beta1 ** t
    correct2 = 1.0 - state.beta2 ** t
    for name, g in grads.items():
        if name not in state.m:
            raise ConfigError(f"gradient for unknown parameter {name}")
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * np.square(g)
        m_hat = m / correct1
        v_hat = v / correct2
        param = params[name].data
        pre_step = param.copy()
        param -= lr * m_hat / (np.sqrt(v_hat) + state.eps)
        param -= lr * state.weight_decay * pre_step
    return lr


# -- tasks ----------------------------------------------------------------------

@dataclass(frozen=True)
class TaskSpec:
    """Deterministic sample generator description.

    Synthetic kinds lay out `content SEPARATOR answer`; token ids offset
    content values by one so the separator id stays reserved. `token_lm`
    reads fixed windows from a binary token file instead.
    """

    kind: str
    seq_len: int
    vocab_size: int
    seed: int = 0
    modulus: int = 0  # modular_sum_chain only; 0 picks vocab_size - 1
    path: str | None = None  # token_lm only

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ConfigError(f"task kind must be one of {TASK_KINDS}, got {self.kind!r}")
        if self.seq_len < 3:
            raise ConfigError(f"seq_len must be >= 3, got {self.seq_len}")
        if self.vocab_size < 3:
            raise ConfigError(f"vocab_size must be >= 3, got {self.vocab_size}")
        if self.kind == "token_lm" and not self.path:
            raise ConfigError("token_lm task needs a token file path")

    @property
    def content_length(self) -> int:
        return (self.seq_len - 1) // 2


def running_modular_sums(values: np.ndarray, modulus: int) -> np.ndarray:
    """Prefix sums of `values` reduced mod `modulus`."""
    if modulus < 2:
        raise ConfigError(f"modulus must be >= 2, got {modulus}")
    return np.cumsum(np.asarray(values, dtype=np.int64)) % modulus


def synthetic_answer(kind: str, values: np.ndarray, modulus: int) -> np.ndarray:
    if kind == "copy":
        return np.asarray(values, dtype=np.int64)
    if kind == "reverse":
        return np.asarray(values, dtype=np.int64)[::-1]
    return running_modular_sums(values, modulus)


def _load_token_file(path: str):
    sidecar = Path(str(path) + ".json")
    try:
        meta = json.loads(sidecar.read_text())
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise InputError(f"cannot read token file: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise InputError(f"corrupt token file sidecar {sidecar}: {exc}") from exc
    for key in ("vocab_size", "count"):
        if key not in meta:
            raise InputError(f"token file sidecar {sidecar} is missing {key!r}")
    data = np.frombuffer(raw, dtype="<u4")
    if data.size != int(meta["count"]):
        raise InputError(
            f"token file holds {data.size} ids but sidecar says {meta['count']}")
    if data.size and int(data.max()) >= int(meta["vocab_size"]):
        raise InputError(
            f"token id {int(data.max())} exceeds sidecar vocab {meta['vocab_size']}")
    return data.astype(np.int64), int(meta["vocab_size"])


def save_token_file(path: str, tokens: np.ndarray, vocab_size: int):
    tokens = np.asarray(tokens)
    if tokens.size and (tokens.min() < 0 or tokens.max() >= vocab_size):
        raise InputError("token ids out of range for the stated vocab")
    Path(path).write_bytes(tokens.astype("<u4").tobytes())
    Path(str(path) + ".json").write_text(
        json.dumps({"vocab_size": int(vocab_size), "count": int(tokens.size)}))


_TOKEN_FILE_CACHE: dict[str, tuple] = {}


def make_task(spec: TaskSpec, index: int):
    """Sample `index` of the task: (input tokens [T], target ids [T]).

    Targets are next-token ids aligned to input positions; positions
    whose next token is prompt or separator hold IGNORE_TARGET.
    """
    if spec.kind == "token_lm":
        cached = _TOKEN_FILE_CACHE.get(spec.path)
        if cached is None:
            cached = _load_token_file(spec.path)
            _TOKEN_FILE_CACHE[spec.path] = cached
        data, vocab = cached
        if vocab > spec.vocab_size:
            raise ConfigError(
                f"token file vocab {vocab} exceeds task vocab {spec.vocab_size}")
        if data.size < spec.seq_len + 1:
            raise InputError(
                f"token file has {data.size} ids, need {spec.seq_len + 1}")
        start = (index * spec.seq_len) % (data.size - spec.seq_len)
        window = data[start:start + spec.seq_len + 1]
        return window[:-1].copy(), window[1:].copy()

    rng = np.random.default_rng([spec.seed, index])
    c = spec.content_length
    modulus = spec.modulus if spec.modulus else spec.vocab_size - 1
    if spec.kind == "modular_sum_chain":
        values = rng.integers(0, modulus, c)
    else:
        values = rng.integers(0, spec.vocab_size - 1, c)
    answer = synthetic_answer(spec.kind, values, modulus)
    if int(answer.max(initial=0)) + 1 >= spec.vocab_size:
        raise ConfigError(
            f"answer token {int(answer.max()) + 1} exceeds vocab {spec.vocab_size}")
    seq = np.full(spec.seq_len, SEPARATOR_TOKEN, dtype=np.int64)
    seq[:c] = values + 1
    seq[c + 1:2 * c + 1] = answer + 1
    targets = np.full(spec.seq_len, IGNORE_TARGET, dtype=np.int64)
    targets[c:2 * c] = seq[c + 1:2 * c + 1]
    return seq, targets


def make_batch(spec: TaskSpec, step: int, batch_size: int):
    rows = [make_task(spec, step * batch_size + j) for j in range(batch_size)]
    tokens = np.stack([r[0] for r in rows])
    targets = np.stack([r[1] for r in rows])
    return tokens, targets


def masked_cross_entropy(logits: T.Tensor, targets: np.ndarray) -> T.Tensor:
    """Mean next-token cross entropy over positions not marked IGNORE_TARGET."""
    b, s, vocab = logits.shape
    flat = logits.reshape(b * s, vocab)
    tgt = targets.reshape(-1)
    live = tgt != IGNORE_TARGET
    if not np.any(live):
        raise InputError("no live target positions in batch")
    safe = np.where(live, tgt, 0)
    losses = T.logsumexp(flat) - T.gather_last(flat, safe[:, None]).reshape(b * s)
    return (losses * live.astype(logits.dtype)).sum() / float(live.sum())


# -- the loop ---------------------------------------------------------------------

@dataclass
class TrainSinks:
    """Where the loop writes metrics and checkpoints; all optional."""

    metrics_path: str | None = None
    checkpoint_dir: str | None = None
    checkpoint_every: int = 0  # extra checkpoints every N steps when > 0


@dataclass
class TrainResult:
    history: list = field(default_factory=list)
    model: DreamerModel = None
    optimizer: OptimizerState = None


def _write_metrics(path, history):
    if path is None:
        return
    with open(path, "w") as fh:
        for record in history:
            fh.write(json.dumps(record) + "\n")


def _checkpoint(sinks, cfg, store, label):
    if sinks.checkpoint_dir is None:
        return
    out = Path(sinks.checkpoint_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / f"{label}.ckpt", cfg, store)


def train(cfg: ModelConfig, task: TaskSpec, steps: int,
          sinks: TrainSinks | None = None, seed: int = 0,
          dtype=np.float32, stop_when=None) -> TrainResult:
    """Run `steps` optimizer steps; deterministic given (cfg, task, seed).

    Every step records loss, pre-clip gradient norm, learning rate, and
    per-router usage counts; balancing biases update once per router per
    step. A non-finite loss or gradient aborts with a diagnostic dump.
    `stop_when(record, history)` is checked after each recorded step and
    ends the run early when it returns True; the final checkpoint is
    still written.
    """
    cfg.validate()
    if steps < 0:
        raise ConfigError(f"steps must be >= 0, got {steps}")
    if task.seq_len > cfg.context_length:
        raise ConfigError(
            f"task seq_len {task.seq_len} exceeds context {cfg.context_length}")
    if task.vocab_size > cfg.vocab_size:
        raise ConfigError(
            f"task vocab {task.vocab_size} exceeds model vocab {cfg.vocab_size}")
    sinks = sinks or TrainSinks()
    model = DreamerModel(cfg, init_parameters(cfg, seed=seed, dtype=dtype))
    optimizer = OptimizerState.for_store(model.params, cfg)
    result = TrainResult(model=model, optimizer=optimizer)
    _checkpoint(sinks, cfg, model.params, "step_000000")

    learnable = model.params.learnable()
    for step in range(steps):
        tokens, targets = make_batch(task, step, cfg.batch_size)
        graph = T.Graph(lambda _inputs: masked_cross_entropy(
            model.model_forward(tokens), targets))
        try:
            loss = T.eval(graph, learnable)
        except NumericError as exc:
            _abort(sinks, result, step, None, str(exc))
        loss_value = float(loss.data)
        if not np.isfinite(loss_value):
            _abort(sinks, result, step, loss_value, "non-finite loss")
        grads = {name: g.data for name, g in T.backward(graph).items()}
        usage = {name: state.counts.tolist()
                 for name, state in sorted(model.routers.items())}
        try:
            grad_norm = clip_grad_norm(grads, optimizer.grad_clip)
        except NumericError as exc:
            _abort(sinks, result, step, loss_value, str(exc))
        lr = adamw_step(model.params, grads, optimizer)
        model.update_balancing()
        result.history.append({"step": step, "loss": loss_value,
                               "grad_norm": grad_norm, "lr": lr,
                               "usage": usage})
        if sinks.checkpoint_every and (step + 1) % sinks.checkpoint_every == 0:
            _checkpoint(sinks, cfg, model.params, f"step_{step + 1:06d}")
        if stop_when is not None and stop_when(result.history[-1], result.history):
            break

    if steps > 0:
        _checkpoint(sinks, cfg, model.params, "final")
    _write_metrics(sinks.metrics_path, result.history)
    return result


def _abort(sinks, result, step, loss_value, reason):
    detail = {"step": step, "loss": loss_value, "reason": reason}
    if sinks.metrics_path:
        _write_metrics(sinks.metrics_path, result.history + [
            {"step": step, "abort": detail}])
    raise NumericError(f"training aborted at step {step}: {reason}")
