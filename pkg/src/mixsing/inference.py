"""Whole-song synthesis from fixed-length segments.

A plan lists chunks of ``seq_len`` input frames together with the window of
output frames each chunk contributes.  Naive plans tile the song with
back-to-back chunks.  Overlapped plans advance by ``seq_len - 2 * w`` and drop
``w`` frames at each inner chunk edge, so every emitted frame has at least
``w`` frames of context on both sides (except at the song's ends).
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from threadpoolctl import threadpool_limits

from .errors import ParameterError, RangeError
from .model import ModelParams, forward
from .score import DEFAULT_VOCAB, FrameAlignment, Vocab


class Chunk(NamedTuple):
    chunk_start: int
    emit_start: int
    emit_end: int


@dataclass
class SegmentationPlan:
    mode: str
    seq_len: int
    overlap: int
    frames: int
    chunks: list[Chunk]

    def emitted(self) -> list[int]:
        return [t for c in self.chunks for t in range(c.emit_start, c.emit_end)]


@dataclass
class SynthesisResult:
    mel: np.ndarray
    timing: dict[str, float] = field(default_factory=dict)


def plan_naive(frames: int, seq_len: int) -> SegmentationPlan:
    if frames < 1:
        raise ParameterError("need at least one frame")
    if seq_len < 1:
        raise ParameterError("seq_len must be positive")
    chunks = [Chunk(s, s, min(s + seq_len, frames)) for s in range(0, frames, seq_len)]
    return SegmentationPlan("naive", seq_len, 0, frames, chunks)


def overlapped_chunk_count(frames: int, seq_len: int, w: int) -> int:
    return max(1, math.ceil((frames - seq_len + w) / (seq_len - 2 * w)) + 1)


def plan_overlapped(frames: int, seq_len: int, w: int) -> SegmentationPlan:
    if frames < 1:
        raise ParameterError("need at least one frame")
    if not 0 <= 2 * w < seq_len:
        raise ParameterError(f"overlap w={w} must satisfy 0 <= w < seq_len/2")
    stride = seq_len - 2 * w
    chunks = []
    j = 0
    while True:
        start = j * stride
        emit_start = 0 if j == 0 else start + w
        inner_end = start + seq_len - w
        if inner_end >= frames:
            chunks.append(Chunk(start, emit_start, frames))
            break
        chunks.append(Chunk(start, emit_start, inner_end))
        j += 1
    return SegmentationPlan("overlapped", seq_len, w, frames, chunks)


def make_plan(mode: str, frames: int, seq_len: int, w: int = 30) -> SegmentationPlan:
    if mode == "naive":
        return plan_naive(frames, seq_len)
    if mode == "overlapped":
        return plan_overlapped(frames, seq_len, w)
    raise ParameterError(f"unknown plan mode {mode!r}")


def gather_inputs(
    align: FrameAlignment, plan: SegmentationPlan, vocab: Vocab = DEFAULT_VOCAB
) -> tuple[np.ndarray, np.ndarray]:
    """Batch of ``(n_chunks, seq_len)`` id arrays; frames past the song end are padding."""
    if plan.frames != align.frames:
        raise RangeError(f"plan covers {plan.frames} frames but alignment has {align.frames}")
    L = plan.seq_len
    n = len(plan.chunks)
    pitch = np.full((n, L), vocab.silence, dtype=np.int32)
    phon = np.full((n, L), vocab.PAD, dtype=np.int32)
    for b, c in enumerate(plan.chunks):
        stop = min(c.chunk_start + L, align.frames)
        pitch[b, : stop - c.chunk_start] = align.pitch_ids[c.chunk_start : stop]
        phon[b, : stop - c.chunk_start] = align.phoneme_ids[c.chunk_start : stop]
    return pitch, phon


def stitch(outputs: np.ndarray, plan: SegmentationPlan) -> np.ndarray:
    parts = [
        outputs[b, c.emit_start - c.chunk_start : c.emit_end - c.chunk_start] for b, c in enumerate(plan.chunks)
    ]
    return np.concatenate(parts, axis=0)


def forward_batch(pitch: np.ndarray, phon: np.ndarray, params: ModelParams, threads: int = 1) -> np.ndarray:
    """Eval-mode forward over a batch, optionally split across worker threads.

    Each segment is computed by the same sequence of per-segment GEMMs no
    matter how the batch is split, so the result does not depend on
    ``threads``.
    """
    if threads <= 1 or len(pitch) <= 1:
        return forward(pitch, phon, params)
    parts = np.array_split(np.arange(len(pitch)), min(threads, len(pitch)))
    with threadpool_limits(limits=1), ThreadPoolExecutor(max_workers=len(parts)) as pool:
        outs = list(pool.map(lambda ix: forward(pitch[ix], phon[ix], params), parts))
    return np.concatenate(outs)


def synthesize(
    align: FrameAlignment, params: ModelParams, plan: SegmentationPlan, threads: int = 1
) -> SynthesisResult:
    """Run every chunk in one batched forward and stitch the emitted windows."""
    t0 = time.perf_counter()
    pitch, phon = gather_inputs(align, plan)
    t1 = time.perf_counter()
    out = forward_batch(pitch, phon, params, threads)
    t2 = time.perf_counter()
    mel = stitch(out, plan)
    t3 = time.perf_counter()
    return SynthesisResult(mel, {"plan_ms": 1e3 * (t1 - t0), "forward_ms": 1e3 * (t2 - t1), "stitch_ms": 1e3 * (t3 - t2)})


def synthesize_sequential(align: FrameAlignment, params: ModelParams, plan: SegmentationPlan) -> SynthesisResult:
    """Evaluate chunks strictly one after another, each as a batch of one.

    Chunk ``j + 1`` is not started before chunk ``j``'s emitted frames have
    been copied out, mimicking the step-by-step latency of a model that
    conditions on its previous output.
    """
    t0 = time.perf_counter()
    pitch, phon = gather_inputs(align, plan)
    mel = np.empty((plan.frames, params.config.d_mel), dtype=np.float32)
    for b, c in enumerate(plan.chunks):
        out = forward(pitch[b : b + 1], phon[b : b + 1], params)[0]
        mel[c.emit_start : c.emit_end] = out[c.emit_start - c.chunk_start : c.emit_end - c.chunk_start]
    return SynthesisResult(mel, {"total_ms": 1e3 * (time.perf_counter() - t0)})
