"""Latency and real-time-factor measurement for whole-song synthesis."""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from .errors import DegenerateInputError, ParameterError
from .inference import make_plan, synthesize, synthesize_sequential
from .model import ModelParams
from .score import HOP, SAMPLE_RATE, FrameAlignment

MODES = ("batched", "batched_overlapped", "sequential")
REPORT_COLUMNS = ("mode", "frames", "median_s", "p10_s", "p90_s", "rtf")


@dataclass
class BenchResult:
    mode: str
    frames: int
    latencies: list[float] = field(default_factory=list)
    threads: int = 1

    @property
    def repeats(self) -> int:
        return len(self.latencies)

    @property
    def median_s(self) -> float:
        return float(np.median(self.latencies))

    @property
    def p10_s(self) -> float:
        return float(np.percentile(self.latencies, 10))

    @property
    def p90_s(self) -> float:
        return float(np.percentile(self.latencies, 90))

    @property
    def audio_seconds(self) -> float:
        return self.frames * HOP / SAMPLE_RATE

    @property
    def rtf(self) -> float:
        return rtf(self.audio_seconds, self.median_s)


def rtf(audio_seconds: float, latency_s: float) -> float:
    """Seconds of audio produced per second of wall-clock time."""
    return audio_seconds / latency_s


def random_alignment(frames: int, params: ModelParams, seed: int = 0) -> FrameAlignment:
    rng = np.random.default_rng([seed, frames])
    cfg = params.config
    pitch = rng.integers(0, cfg.pitch_vocab, frames).astype(np.int32)
    phon = rng.integers(0, cfg.phoneme_vocab, frames).astype(np.int32)
    return FrameAlignment(frames, pitch, phon, np.zeros(frames, dtype=np.int32))


def run_once(mode: str, align: FrameAlignment, params: ModelParams, w: int, threads: int) -> np.ndarray:
    """Plan, reshape, forward and stitch; returns the mel."""
    L = params.config.seq_len
    if mode == "batched":
        return synthesize(align, params, make_plan("naive", align.frames, L), threads).mel
    if mode == "batched_overlapped":
        return synthesize(align, params, make_plan("overlapped", align.frames, L, w), threads).mel
    if mode == "sequential":
        return synthesize_sequential(align, params, make_plan("naive", align.frames, L)).mel
    raise ParameterError(f"unknown bench mode {mode!r}")


def measure(
    params: ModelParams,
    frame_counts: Sequence[int],
    mode: str,
    repeats: int = 20,
    warmup: int = 2,
    threads: int = 1,
    w: int = 30,
    seed: int = 0,
) -> list[BenchResult]:
    """Median-of-``repeats`` wall-clock latency per frame count; input construction is untimed."""
    if mode not in MODES:
        raise ParameterError(f"unknown bench mode {mode!r}; choose from {MODES}")
    if repeats < 1:
        raise ParameterError("repeats must be >= 1")
    results = []
    # sequential mode gets the whole thread budget inside each GEMM; batched
    # modes split the batch across workers with single-threaded GEMMs
    with threadpool_limits(limits=threads):
        for frames in frame_counts:
            if frames < 1:
                raise ParameterError("frame count must be >= 1")
            align = random_alignment(frames, params, seed)
            for _ in range(warmup):
                run_once(mode, align, params, w, threads)
            res = BenchResult(mode, frames, threads=threads)
            for _ in range(repeats):
                t0 = time.perf_counter()
                run_once(mode, align, params, w, threads)
                res.latencies.append(time.perf_counter() - t0)
            results.append(res)
    return results


def report(results: Sequence[BenchResult], path) -> Path:
    if not results:
        raise DegenerateInputError("no benchmark results to report")
    path = Path(path)
    rows = sorted(results, key=lambda r: (r.mode, r.frames))
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(REPORT_COLUMNS)
        for r in rows:
            w.writerow([r.mode, r.frames, f"{r.median_s:.9g}", f"{r.p10_s:.9g}", f"{r.p90_s:.9g}", f"{r.rtf:.9g}"])
    return path


def read_report(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))
