"""Teacher-forced training of the fusion model.

Targets are identifier component tokens followed by EOS; the optimized loss is
the mean per-token negative log-likelihood. The optimizer is adaptive-moment
SGD with linear warmup followed by linear decay. Everything is seeded and
single-threaded per step, so a fixed seed reproduces runs bitwise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .corpus import SplitCorpus
from .lexindex import LexicalIdMap
from .model import FusionModel, ModelConfig, collate_bundles
from .prompts import PromptBuilder, PromptBundle
from .vocab import BOS_ID, EOS_ID, PAD_ID, Vocabulary


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-3
    warmup_ratio: float = 0.05
    batch_size: int = 128
    epochs: int = 10
    seed: int = 0
    stop_loss: float | None = None  # early stop once an epoch's mean loss dips below


@dataclass
class TrainInstance:
    bundle: PromptBundle
    target: list[int]  # component token ids + EOS


@dataclass
class TrainState:
    step: int = 0
    total_steps: int = 0
    warmup_steps: int = 0
    base_lr: float = 1e-3
    moments: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    curve: list[tuple[int, float, float]] = field(default_factory=list)  # (step, loss, lr)

    def lr_at(self, step: int) -> float:
        if step <= self.warmup_steps:
            return self.base_lr * step / max(1, self.warmup_steps)
        rem = self.total_steps - self.warmup_steps
        return self.base_lr * max(0.0, (self.total_steps - step) / max(1, rem))


def make_instances(
    split: SplitCorpus,
    builder: PromptBuilder,
    id_map: LexicalIdMap,
    vocab: Vocabulary,
    max_per_user: int | None = None,
) -> list[TrainInstance]:
    """Next-item pairs from every train-prefix position (history >= 1 item).

    With max_per_user set, keeps the most recent pairs of each user.
    """
    out: list[TrainInstance] = []
    for u in range(split.corpus.n_users):
        seq = split.train[u]
        positions = list(range(1, len(seq)))
        if max_per_user is not None:
            positions = positions[-max_per_user:]
        for t in positions:
            bundle = builder.build(seq[:t])
            target = id_map.token_ids(seq[t], vocab) + [EOS_ID]
            out.append(TrainInstance(bundle=bundle, target=target))
    return out


def collate_instances(instances: list[TrainInstance], config: ModelConfig) -> dict:
    parts = collate_bundles([ins.bundle for ins in instances], config)
    B = len(instances)
    T = max(len(ins.target) for ins in instances)
    if T > config.max_decode_len:
        raise ValueError(f"target length {T} exceeds max_decode_len {config.max_decode_len}")
    dec_in = np.full((B, T), PAD_ID, dtype=np.int64)
    dec_tgt = np.full((B, T), PAD_ID, dtype=np.int64)
    for i, ins in enumerate(instances):
        n = len(ins.target)
        dec_in[i, 0] = BOS_ID
        dec_in[i, 1:n] = ins.target[:-1]
        dec_tgt[i, :n] = ins.target
    parts["dec_in"] = dec_in
    parts["dec_tgt"] = dec_tgt
    return parts


def batch_loss(model: FusionModel, parts: dict, rng: np.random.Generator | None = None) -> Tensor:
    """Mean NLL of target tokens under teacher forcing (PAD positions masked)."""
    enc_out, enc_valid = model.encode(parts["enc_tokens"], rng)
    memory = model.fuse(
        enc_out, enc_valid, parts["block_map"], parts["block_valid"], parts["slot_ids"]
    )
    logits = model.decode(memory, parts["dec_in"], rng)
    B, T, V = logits.shape
    flat = ag.reshape(logits, (B * T, V))
    logp = ag.log_softmax(flat, axis=-1)
    tgt = parts["dec_tgt"].reshape(-1)
    picked = ag.take_rows(logp, np.where(tgt == PAD_ID, 0, tgt))
    mask = (tgt != PAD_ID).astype(logits.dtype)
    n_valid = float(mask.sum())
    total = ag.sum_all(picked * Tensor(mask))
    return total * (-1.0 / n_valid)


def adam_step(
    model: FusionModel,
    state: TrainState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    t = state.step
    for name, p in model.params.items():
        if p.grad is None:
            continue
        if name not in state.moments:
            state.moments[name] = (
                np.zeros_like(p.data, dtype=np.float64),
                np.zeros_like(p.data, dtype=np.float64),
            )
        m, v = state.moments[name]
        g = p.grad.astype(np.float64)
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        mhat = m / (1 - beta1**t)
        vhat = v / (1 - beta2**t)
        p.data = p.data - (lr * mhat / (np.sqrt(vhat) + eps)).astype(p.data.dtype)


def _diagnostics(model: FusionModel) -> str:
    lines = []
    for name, p in model.params.items():
        g = "none" if p.grad is None else f"{float(np.abs(p.grad).max()):.3e}"
        lines.append(f"  {name}: |p|max={float(np.abs(p.data).max()):.3e} |g|max={g}")
    return "\n".join(lines)


def train(
    model: FusionModel,
    instances: list[TrainInstance],
    config: TrainConfig,
    log_every: int = 0,
) -> TrainState:
    if not instances:
        raise ValueError("no training instances")
    n = len(instances)
    steps_per_epoch = math.ceil(n / config.batch_size)
    state = TrainState(
        total_steps=steps_per_epoch * config.epochs,
        base_lr=config.lr,
    )
    state.warmup_steps = max(1, round(config.warmup_ratio * state.total_steps))
    shuffle_rng = np.random.default_rng(config.seed)
    dropout_rng = np.random.default_rng(config.seed + 1)

    for epoch in range(config.epochs):
        perm = shuffle_rng.permutation(n)
        epoch_loss = 0.0
        for b0 in range(0, n, config.batch_size):
            batch = [instances[i] for i in perm[b0 : b0 + config.batch_size]]
            parts = collate_instances(batch, model.config)
            for p in model.params.values():
                p.zero_grad()
            loss = batch_loss(model, parts, dropout_rng)
            val = loss.item()
            if not math.isfinite(val):
                raise TrainingDiverged(
                    f"non-finite loss at step {state.step + 1}\n{_diagnostics(model)}"
                )
            loss.backward()
            state.step += 1
            lr = state.lr_at(state.step)
            adam_step(model, state, lr)
            state.curve.append((state.step, val, lr))
            epoch_loss += val * len(batch)
            if log_every and state.step % log_every == 0:
                print(f"step {state.step}: loss {val:.4f} lr {lr:.2e}")
        mean_loss = epoch_loss / n
        if config.stop_loss is not None and mean_loss < config.stop_loss:
            break
    return state


def curve_csv(state: TrainState) -> str:
    lines = ["step,loss,lr"]
    lines += [f"{s},{l!r},{r!r}" for s, l, r in state.curve]
    return "\n".join(lines) + "\n"


def eval_loss(model: FusionModel, instances: list[TrainInstance], batch_size: int = 64) -> float:
    """Dropout-free mean NLL over a fixed instance list."""
    total, count = 0.0, 0
    with ag.no_grad():
        for b0 in range(0, len(instances), batch_size):
            batch = instances[b0 : b0 + batch_size]
            parts = collate_instances(batch, model.config)
            loss = batch_loss(model, parts, rng=None)
            n_tok = sum(len(ins.target) for ins in batch)
            total += loss.item() * n_tok
            count += n_tok
    return total / count


def grad_check(
    model: FusionModel,
    parts: dict,
    n_coords: int = 200,
    epsilon: float = 1e-5,
    seed: int = 0,
) -> tuple[float, dict[str, float]]:
    """Analytic vs central-difference gradients on sampled coordinates.

    Samples span every parameter tensor. Relative error uses
    |a - n| / max(|a|, |n|), reported as 0 when both are below the finite
    difference noise floor. Use a float64 model.
    """
    for p in model.params.values():
        p.zero_grad()
    loss = batch_loss(model, parts, rng=None)
    loss.backward()
    analytic = {name: (np.zeros_like(p.data) if p.grad is None else p.grad.copy())
                for name, p in model.params.items()}

    rng = np.random.default_rng(seed)
    total_size = sum(p.data.size for p in model.params.values())
    worst = 0.0
    per_tensor: dict[str, float] = {}
    for name, p in model.params.items():
        quota = max(1, math.ceil(n_coords * p.data.size / total_size))
        flat_idx = rng.choice(p.data.size, size=min(quota, p.data.size), replace=False)
        t_worst = 0.0
        flat = p.data.reshape(-1)
        for fi in flat_idx:
            orig = flat[fi]
            flat[fi] = orig + epsilon
            with ag.no_grad():
                f1 = batch_loss(model, parts, rng=None).item()
            flat[fi] = orig - epsilon
            with ag.no_grad():
                f2 = batch_loss(model, parts, rng=None).item()
            flat[fi] = orig
            numeric = (f1 - f2) / (2 * epsilon)
            a = float(analytic[name].reshape(-1)[fi])
            denom = max(abs(a), abs(numeric))
            err = 0.0 if denom < 1e-8 else abs(a - numeric) / denom
            t_worst = max(t_worst, err)
        per_tensor[name] = t_worst
        worst = max(worst, t_worst)
    return worst, per_tensor
