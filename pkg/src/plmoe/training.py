"""Pretraining and fine-tuning loops.

Batching keeps each micro-batch single-language (the routing strategies
gate per language), while the global batch mixes languages by drawing each
slot from a corpus-size-weighted distribution. All randomness is keyed by
(seed, step), so resuming from a checkpoint replays the exact data order
and dropout masks and reproduces the uninterrupted run bit for bit.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .corpus import CorpusDoc
from .model import Model, load_checkpoint, save_checkpoint
from .rng import make_rng
from .routing import RoutingTrace
from .tensor import Tensor

log = logging.getLogger(__name__)

PAD_ID = 0


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    steps: int = 100_000
    warmup_steps: int = 1_000
    peak_lr: float = 1.5e-4
    schedule: str = "cosine_decay"  # or linear_decay
    batch_size: int = 8
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    grad_clip: float = 1.0
    aux_loss_alpha: float = 0.01
    seed: int = 0
    eval_interval: int = 200
    eval_max_docs: int = 64

    def __post_init__(self):
        if self.steps > 0 and not self.warmup_steps < self.steps:
            raise ValueError("warmup_steps must be below steps")
        if self.peak_lr <= 0:
            raise ValueError("peak_lr must be positive")
        if self.schedule not in ("cosine_decay", "linear_decay"):
            raise ValueError(f"unknown schedule {self.schedule!r}")

    def to_json(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_json(cls, obj: dict) -> "TrainConfig":
        return cls(**obj)


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to peak, then cosine or linear decay to zero."""
    if step < 0 or step > cfg.steps:
        raise ValueError(f"step {step} outside [0, {cfg.steps}]")
    if step < cfg.warmup_steps:
        return cfg.peak_lr * step / cfg.warmup_steps
    denom = max(cfg.steps - cfg.warmup_steps, 1)
    progress = (step - cfg.warmup_steps) / denom
    if cfg.schedule == "cosine_decay":
        return cfg.peak_lr * 0.5 * (1.0 + math.cos(math.pi * progress))
    return cfg.peak_lr * (1.0 - progress)


# ---------------------------------------------------------------------------
# loss


def lm_loss(logits: Tensor, tokens: np.ndarray, aux: Tensor | None = None) -> tuple[Tensor, int]:
    """Mean next-token NLL over non-pad positions; returns (loss, n_positions).

    Targets are the inputs shifted left by one; the final position has no
    target and pad targets are ignored.
    """
    b, t, v = logits.shape
    targets = np.full((b, t), PAD_ID, dtype=np.int64)
    targets[:, :-1] = tokens[:, 1:]
    flat = T.reshape(logits, (b * t, v))
    loss = T.cross_entropy(flat, targets.reshape(-1), ignore_id=PAD_ID)
    n = int((targets != PAD_ID).sum())
    if aux is not None:
        loss = T.add(loss, aux)
    return loss, n


# ---------------------------------------------------------------------------
# Adam with decoupled weight decay


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def clip_gradients(params: dict[str, Tensor], max_norm: float) -> float:
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float((p.grad.astype(np.float64) ** 2).sum())
    norm = math.sqrt(total)
    if max_norm > 0 and norm > max_norm:
        factor = np.float32(max_norm / norm)
        for p in params.values():
            if p.grad is not None:
                p.grad = p.grad * factor
    return norm


def adam_step(params: dict[str, Tensor], state: AdamState, lr: float, cfg: TrainConfig) -> None:
    state.step += 1
    t = state.step
    bc1 = 1.0 - cfg.beta1**t
    bc2 = 1.0 - cfg.beta2**t
    for name, p in params.items():
        g = p.grad
        if g is None:
            g = np.zeros_like(p.data)
        if np.isnan(g).any():
            raise TrainingDiverged(f"NaN gradient in parameter {name!r}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        mhat = m / np.float32(bc1)
        vhat = v / np.float32(bc2)
        p.data = p.data - np.float32(lr) * mhat / (np.sqrt(vhat) + np.float32(cfg.eps))
        if cfg.weight_decay:
            p.data = p.data - np.float32(lr * cfg.weight_decay) * p.data


# ---------------------------------------------------------------------------
# batching


def group_docs(docs: list[CorpusDoc], split: str) -> dict[str, list[CorpusDoc]]:
    """Split's docs by language; sub-2-token docs carry no targets and are dropped."""
    out: dict[str, list[CorpusDoc]] = {}
    for d in docs:
        if d.split == split and len(d.tokens) >= 2:
            out.setdefault(d.pl, []).append(d)
    return out


def pad_batch(docs: list[CorpusDoc], max_seq: int) -> np.ndarray:
    width = min(max(len(d.tokens) for d in docs), max_seq)
    out = np.full((len(docs), width), PAD_ID, dtype=np.int64)
    for i, d in enumerate(docs):
        toks = d.tokens[:width]
        out[i, : len(toks)] = toks
    return out


def sample_batch(
    by_pl: dict[str, list[CorpusDoc]],
    batch_size: int,
    rng: np.random.Generator,
) -> list[tuple[str, list[CorpusDoc]]]:
    """Size-weighted language draw per slot, grouped into per-PL micro-batches."""
    pls = sorted(by_pl)
    weights = np.array([len(by_pl[pl]) for pl in pls], dtype=np.float64)
    weights /= weights.sum()
    chosen: dict[str, list[CorpusDoc]] = {}
    for _ in range(batch_size):
        pl = pls[rng.choice(len(pls), p=weights)]
        pool = by_pl[pl]
        chosen.setdefault(pl, []).append(pool[int(rng.integers(len(pool)))])
    return sorted(chosen.items())


# ---------------------------------------------------------------------------
# evaluation-time loss


def eval_loss_per_pl(
    model: Model,
    by_pl: dict[str, list[CorpusDoc]],
    max_docs: int = 64,
    batch_size: int = 8,
) -> dict[str, float]:
    """Mean token NLL per language, computed without recording gradients."""
    out: dict[str, float] = {}
    with T.no_grad():
        for pl in sorted(by_pl):
            docs = by_pl[pl][:max_docs]
            if not docs:
                continue
            total, count = 0.0, 0
            for i in range(0, len(docs), batch_size):
                chunk = docs[i : i + batch_size]
                tokens = pad_batch(chunk, model.config.max_seq)
                logits, _ = model.forward(tokens, pl=pl, train=False)
                loss, n = lm_loss(logits, tokens)
                total += float(loss.data) * n
                count += n
            out[pl] = total / max(count, 1)
    return out


# ---------------------------------------------------------------------------
# metrics log


class MetricsLog:
    """CSV rows (step, split, pl, loss, lr), optionally mirrored to a file."""

    def __init__(self, path: str | Path | None = None):
        self.rows: list[tuple[int, str, str, float, float]] = []
        self.path = Path(path) if path else None
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("step,split,pl,loss,lr\n")

    def add(self, step: int, split: str, pl: str, loss: float, lr: float) -> None:
        self.rows.append((step, split, pl, loss, lr))
        if self.path:
            with open(self.path, "a", encoding="utf-8") as f:
                f.write(f"{step},{split},{pl},{loss!r},{lr!r}\n")


# ---------------------------------------------------------------------------
# train state serialization (moments + step alongside a checkpoint)


def save_train_state(state: AdamState, tcfg: TrainConfig, path: Path) -> None:
    path.mkdir(parents=True, exist_ok=True)
    names = sorted(state.m)
    offset = 0
    manifest = []
    with open(path / "trainstate.bin", "wb") as f:
        for name in names:
            for kind in ("m", "v"):
                arr = (state.m if kind == "m" else state.v)[name].astype("<f4")
                manifest.append({"name": name, "kind": kind, "shape": list(arr.shape), "offset": offset})
                f.write(arr.tobytes())
                offset += arr.nbytes
    (path / "trainstate.json").write_text(
        json.dumps({"step": state.step, "config": tcfg.to_json(), "tensors": manifest, "total_bytes": offset})
    )


def load_train_state(path: Path) -> tuple[AdamState, TrainConfig]:
    meta = json.loads((path / "trainstate.json").read_text())
    blob = (path / "trainstate.bin").read_bytes()
    if len(blob) != meta["total_bytes"]:
        raise ValueError("trainstate.bin length mismatch")
    state = AdamState(step=meta["step"])
    for entry in meta["tensors"]:
        n = int(np.prod(entry["shape"]))
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=entry["offset"]).reshape(entry["shape"]).copy()
        (state.m if entry["kind"] == "m" else state.v)[entry["name"]] = arr
    return state, TrainConfig.from_json(meta["config"])


# ---------------------------------------------------------------------------
# the loop


@dataclass
class TrainResult:
    model: Model
    metrics: MetricsLog
    best_val: dict[str, float]


def train_loop(
    model: Model,
    docs: list[CorpusDoc],
    tcfg: TrainConfig,
    out_dir: str | Path | None = None,
    resume_from: str | Path | None = None,
    metrics_path: str | Path | None = None,
    trace: RoutingTrace | None = None,
    stop_after: int | None = None,
) -> TrainResult:
    """Run the causal-LM objective for tcfg.steps optimizer steps.

    ``stop_after`` interrupts the run after that many total steps (the lr
    schedule still spans tcfg.steps); resuming from the written checkpoint
    reproduces the uninterrupted run exactly.
    """
    by_pl = group_docs(docs, "train")
    if not any(by_pl.values()):
        raise ValueError("train split is empty")
    if model.alloc is not None:
        missing = set(by_pl) - set(model.alloc.per_pl)
        if missing and model.config.variant.startswith("pl_moe"):
            raise ValueError(f"corpus languages {sorted(missing)} missing from expert allocation")
    dev_by_pl = group_docs(docs, "dev")
    out_dir = Path(out_dir) if out_dir else None

    state = AdamState()
    start_step = 0
    if resume_from is not None:
        state, _ = load_train_state(Path(resume_from))
        start_step = state.step

    metrics = MetricsLog(metrics_path)
    best_val: dict[str, float] = {}
    best_mean = math.inf

    def run_eval(step: int, lr: float) -> float:
        losses = eval_loss_per_pl(model, dev_by_pl, max_docs=tcfg.eval_max_docs)
        for pl, loss in sorted(losses.items()):
            metrics.add(step, "dev", pl, loss, lr)
        return sum(losses.values()) / len(losses) if losses else math.inf

    if start_step == 0 and dev_by_pl:
        run_eval(0, 0.0)

    end_step = tcfg.steps if stop_after is None else min(stop_after, tcfg.steps)
    for step in range(start_step, end_step):
        lr = lr_at(step + 1, tcfg)
        batch = sample_batch(by_pl, tcfg.batch_size, make_rng(tcfg.seed, "batch", step))
        sizes = []
        for _, chunk in batch:
            tokens = pad_batch(chunk, model.config.max_seq)
            sizes.append(int((tokens[:, 1:] != PAD_ID).sum()))
        total_tokens = sum(sizes)

        model.zero_grad()
        step_loss = 0.0
        for i, (pl, chunk) in enumerate(batch):
            tokens = pad_batch(chunk, model.config.max_seq)
            rng = make_rng(tcfg.seed, "drop", step, i)
            logits, aux = model.forward(
                tokens, pl=pl, train=True, rng=rng, trace=trace, aux_alpha=tcfg.aux_loss_alpha
            )
            loss, n = lm_loss(logits, tokens, aux)
            step_loss += float(loss.data) * n / total_tokens
            T.scale(loss, n / total_tokens).backward()

        if math.isnan(step_loss):
            if out_dir:
                save_checkpoint(model, out_dir / "final")
            raise TrainingDiverged(f"loss became NaN at step {step}")

        clip_gradients(model.params, tcfg.grad_clip)
        adam_step(model.params, state, lr, tcfg)
        metrics.add(step + 1, "train", "", step_loss, lr)

        if dev_by_pl and ((step + 1) % tcfg.eval_interval == 0 or step + 1 == tcfg.steps):
            mean = run_eval(step + 1, lr)
            if mean < best_mean:
                best_mean = mean
                best_val = eval_loss_per_pl(model, dev_by_pl, max_docs=tcfg.eval_max_docs)
                if out_dir:
                    save_checkpoint(model, out_dir / "best")

    if out_dir:
        save_checkpoint(model, out_dir / "final")
        save_train_state(state, tcfg, out_dir / "final")
    return TrainResult(model=model, metrics=metrics, best_val=best_val)


def pretrain(
    docs: list[CorpusDoc],
    model: Model,
    tcfg: TrainConfig,
    out_dir: str | Path | None = None,
    **kw,
) -> TrainResult:
    return train_loop(model, docs, tcfg, out_dir=out_dir, **kw)


def finetune(
    checkpoint: str | Path | Model,
    docs: list[CorpusDoc],
    tcfg: TrainConfig | None = None,
    out_dir: str | Path | None = None,
    **kw,
) -> TrainResult:
    """Continue training from a checkpoint; linear decay by default."""
    model = checkpoint if isinstance(checkpoint, Model) else load_checkpoint(checkpoint)
    if tcfg is None:
        tcfg = TrainConfig(steps=2_000, warmup_steps=0, peak_lr=5e-5, schedule="linear_decay")
    return train_loop(model, docs, tcfg, out_dir=out_dir, **kw)
