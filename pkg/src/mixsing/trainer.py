"""Training: corpus segmentation, LR schedule, optimisation loop, evaluation."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import AlignmentError, ConfigError, DegenerateInputError, NumericError
from .features import LOG_FLOOR_VALUE, mcd, read_mel
from .model import ModelParams, backward, forward, forward_with_cache, load_checkpoint, save_checkpoint
from .numerics import AdamState, adam_step, l1_loss, l1_loss_backward
from .score import DEFAULT_VOCAB, FrameAlignment, Score, Vocab, align_to_frames, parse_score_json

log = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "lr", "train_l1", "val_l1", "val_mcd")


@dataclass
class TrainConfig:
    batch_size: int = 32
    steps: int = 20000
    warmup: int | None = None  # defaults to 10% of steps
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float = 1.0
    seed: int = 0
    seq_len: int = 200
    k: int = 3
    eval_interval: int = 1000

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")
        if self.warmup is not None and not 0 <= self.warmup <= self.steps:
            raise ConfigError("warmup must lie in [0, steps]")
        if self.eval_interval < 1:
            raise ConfigError("eval_interval must be >= 1")

    @property
    def warmup_steps(self) -> int:
        return self.steps // 10 if self.warmup is None else self.warmup

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class SegmentExample:
    pitch_ids: np.ndarray
    phoneme_ids: np.ndarray
    target: np.ndarray
    mask: np.ndarray


# --------------------------------------------------------------------------
# data


def segment_corpus(
    pairs: Sequence[tuple[FrameAlignment, np.ndarray]], seq_len: int, vocab: Vocab = DEFAULT_VOCAB
) -> list[SegmentExample]:
    """Cut every song into non-overlapping ``seq_len`` windows, padding the last one."""
    out = []
    for align, mel in pairs:
        if align.frames != mel.shape[0]:
            raise AlignmentError(f"alignment has {align.frames} frames but mel has {mel.shape[0]}")
        for start in range(0, align.frames, seq_len):
            n = min(seq_len, align.frames - start)
            pitch = np.full(seq_len, vocab.silence, dtype=np.int32)
            phon = np.full(seq_len, vocab.PAD, dtype=np.int32)
            target = np.full((seq_len, mel.shape[1]), LOG_FLOOR_VALUE, dtype=np.float32)
            mask = np.zeros(seq_len, dtype=bool)
            pitch[:n] = align.pitch_ids[start : start + n]
            phon[:n] = align.phoneme_ids[start : start + n]
            target[:n] = mel[start : start + n]
            mask[:n] = True
            out.append(SegmentExample(pitch, phon, target, mask))
    return out


def stack(examples: Sequence[SegmentExample]) -> SegmentExample:
    return SegmentExample(
        np.stack([e.pitch_ids for e in examples]),
        np.stack([e.phoneme_ids for e in examples]),
        np.stack([e.target for e in examples]),
        np.stack([e.mask for e in examples]),
    )


def align_corpus(corpus: Sequence[tuple[Score, np.ndarray]], k: int = 3, vocab: Vocab = DEFAULT_VOCAB):
    return [(align_to_frames(s, k=k, total_frames=mel.shape[0], vocab=vocab), mel) for s, mel in corpus]


def load_corpus(directory) -> list[tuple[Score, np.ndarray]]:
    """Read ``*.json`` scores with their same-stem ``*.mel1`` targets."""
    d = Path(directory)
    out = []
    for js in sorted(d.glob("*.json")):
        mel_path = js.with_suffix(".mel1")
        if not mel_path.exists():
            continue
        out.append((parse_score_json(js.read_bytes()), read_mel(mel_path)))
    return out


def batch_indices(step: int, n_examples: int, batch_size: int, seed: int) -> np.ndarray:
    """Example indices for 1-based ``step``: consecutive slices of a fresh permutation per epoch."""
    pos = (step - 1) * batch_size
    idx = []
    while len(idx) < batch_size:
        epoch, offset = divmod(pos, n_examples)
        perm = np.random.default_rng([seed, 0xDA7A, epoch]).permutation(n_examples)
        take = perm[offset : offset + batch_size - len(idx)]
        idx.extend(take.tolist())
        pos += len(take)
    return np.asarray(idx)


# --------------------------------------------------------------------------
# optimisation


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to the peak rate, then linear decay to zero at ``cfg.steps``."""
    warm, total = cfg.warmup_steps, cfg.steps
    if step < warm:
        return cfg.lr * step / warm
    if total == warm:
        return cfg.lr if step < total else 0.0
    return cfg.lr * max(0, total - step) / (total - warm)


def init_optimizer(params: ModelParams) -> dict[str, AdamState]:
    return {p.name: AdamState.like(p) for p in params}


def clip_gradients(params: ModelParams, max_norm: float) -> float:
    norm = float(np.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in params)))
    if max_norm > 0 and norm > max_norm:
        scale = np.float32(max_norm / (norm + 1e-6))
        for p in params:
            p.grad *= scale
    return norm


def train_step(
    batch: SegmentExample,
    params: ModelParams,
    opt: dict[str, AdamState],
    cfg: TrainConfig,
    lr: float,
    step: int,
) -> float:
    """One masked-L1 Adam step; dropout masks are keyed by ``(cfg.seed, step)``."""
    if batch.pitch_ids.shape[0] == 0:
        raise DegenerateInputError("empty batch")
    params.zero_grad()
    pred, cache = forward_with_cache(batch.pitch_ids, batch.phoneme_ids, params, train=True, seed=cfg.seed, step=step)
    loss = l1_loss(pred, batch.target, batch.mask)
    if not np.isfinite(loss):
        raise NumericError(f"non-finite training loss at step {step}")
    backward(l1_loss_backward(pred, batch.target, batch.mask), cache, params)
    clip_gradients(params, cfg.grad_clip)
    for p in params:
        adam_step(p, opt[p.name], lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    return loss


def predict(params: ModelParams, examples: Sequence[SegmentExample], batch_size: int = 32) -> np.ndarray:
    """Eval-mode predictions for a list of segments, ``(n, seq_len, d_mel)``."""
    outs = []
    for i in range(0, len(examples), batch_size):
        b = stack(examples[i : i + batch_size])
        outs.append(forward(b.pitch_ids, b.phoneme_ids, params))
    return np.concatenate(outs) if outs else np.zeros((0, params.config.seq_len, params.config.d_mel), np.float32)


def evaluate(params: ModelParams, pairs: Sequence[tuple[FrameAlignment, np.ndarray]]) -> dict[str, float]:
    """Masked L1 and MCD over every real frame of the holdout songs."""
    if not pairs:
        raise DegenerateInputError("holdout set is empty")
    examples = segment_corpus(pairs, params.config.seq_len)
    pred = predict(params, examples)
    full = stack(examples)
    mask = full.mask
    return {
        "l1": l1_loss(pred, full.target, mask),
        "mcd": mcd(pred[mask], full.target[mask]),
    }


# --------------------------------------------------------------------------
# loop with checkpoints


@dataclass
class TrainState:
    params: ModelParams
    opt: dict[str, AdamState]
    step: int = 0


def _opt_tensors(opt: dict[str, AdamState]) -> dict[str, np.ndarray]:
    out = {}
    for name, st in opt.items():
        out[f"adam.m.{name}"] = st.m
        out[f"adam.v.{name}"] = st.v
    return out


def save_state(path, state: TrainState, cfg: TrainConfig, extra_meta: dict | None = None) -> None:
    meta = {"train": cfg.to_dict(), "step": state.step}
    if extra_meta:
        meta.update(extra_meta)
    save_checkpoint(path, state.params, extra=_opt_tensors(state.opt), meta=meta)


def load_state(path) -> tuple[TrainState, dict]:
    params, extra, doc = load_checkpoint(path)
    step = int(doc.get("step", 0))
    opt = {}
    for p in params:
        m = extra.get(f"adam.m.{p.name}")
        v = extra.get(f"adam.v.{p.name}")
        opt[p.name] = AdamState(m.copy(), v.copy(), step) if m is not None and v is not None else AdamState.like(p)
    return TrainState(params, opt, step), doc


def train(
    state: TrainState,
    train_pairs: Sequence[tuple[FrameAlignment, np.ndarray]],
    val_pairs: Sequence[tuple[FrameAlignment, np.ndarray]],
    cfg: TrainConfig,
    out_dir=None,
    until: int | None = None,
    on_log: Callable[[dict], None] | None = None,
    meta: dict | None = None,
) -> list[dict]:
    """Run optimisation from ``state.step`` up to ``until`` (default ``cfg.steps``).

    Every ``eval_interval`` steps and at the end, a log row is produced and,
    if ``out_dir`` is given, appended to ``train_log.csv`` alongside a
    ``model.ten1`` checkpoint.  Resuming from that checkpoint reproduces the
    uninterrupted loss trace.
    """
    if state.params.config.seq_len != cfg.seq_len:
        raise ConfigError("model seq_len and train seq_len differ")
    examples = segment_corpus(train_pairs, cfg.seq_len)
    if not examples:
        raise DegenerateInputError("training corpus is empty")
    until = cfg.steps if until is None else min(until, cfg.steps)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    rows: list[dict] = []
    window: list[float] = []
    for step in range(state.step + 1, until + 1):
        idx = batch_indices(step, len(examples), cfg.batch_size, cfg.seed)
        batch = stack([examples[i] for i in idx])
        lr = lr_at(step, cfg)
        window.append(train_step(batch, state.params, state.opt, cfg, lr, step))
        state.step = step
        if step % cfg.eval_interval == 0 or step == until:
            metrics = evaluate(state.params, val_pairs) if val_pairs else {"l1": float("nan"), "mcd": float("nan")}
            row = {
                "step": step,
                "lr": lr,
                "train_l1": float(np.mean(window)),
                "val_l1": metrics["l1"],
                "val_mcd": metrics["mcd"],
            }
            window = []
            rows.append(row)
            log.info("step %d lr %.2e train_l1 %.4f val_l1 %.4f val_mcd %.3f", *row.values())
            if on_log:
                on_log(row)
            if out is not None:
                _append_log(out / "train_log.csv", row)
                save_state(out / "model.ten1", state, cfg, meta)
    return rows


def _append_log(path: Path, row: dict) -> None:
    new = not path.exists()
    with path.open("a", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        if new:
            w.writeheader()
        w.writerow({k: (f"{v:.8g}" if isinstance(v, float) else v) for k, v in row.items()})


def dump_config(path, doc: dict) -> None:
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True))
