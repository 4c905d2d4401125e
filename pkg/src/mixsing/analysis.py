"""Inspection of trained Token Mixers and of where in a segment errors occur."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import CapabilityError, DegenerateInputError, DimensionError
from .model import ModelParams, token_feedforward
from .trainer import SegmentExample, predict, stack


@dataclass
class ProbeResult:
    block: int
    matrix: np.ndarray
    diagonal_constancy: float
    bandwidth: int


def diagonal_constancy(m: np.ndarray) -> float:
    """``1 - mean(per-diagonal variance) / overall variance``; 1 for a constant matrix.

    Every one of the ``2L - 1`` diagonals counts equally.  A Toeplitz matrix
    scores exactly 1; i.i.d. entries score close to 0.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise DimensionError(f"expected a square matrix, got {m.shape}")
    n = m.shape[0]
    total = m.var()
    if total <= 1e-12 * max(1.0, float(np.mean(m * m))):
        return 1.0
    diag_var = np.mean([np.diagonal(m, k).var() for k in range(-(n - 1), n)])
    return float(1.0 - diag_var / total)


def bandwidth_estimate(m: np.ndarray, tail: float = 0.1) -> int:
    """Smallest ``b`` such that diagonals with ``|offset| > b`` hold under ``tail`` of the squared mass."""
    m = np.asarray(m, dtype=np.float64)
    n = m.shape[0]
    mass = np.array([np.sum(np.diagonal(m, k) ** 2) + (np.sum(np.diagonal(m, -k) ** 2) if k else 0.0) for k in range(n)])
    total = mass.sum()
    if total == 0:
        return 0
    # beyond[b] = mass strictly outside offset b
    beyond = total - np.cumsum(mass)
    return int(np.argmax(beyond < tail * total))


def identity_probe(params: ModelParams, block: int) -> ProbeResult:
    """Token-Mixer feedforward of block ``block`` applied to the identity matrix."""
    cfg = params.config
    if cfg.ablate_token_mixer:
        raise CapabilityError("the ablated model has no Token Mixer to probe")
    if not 0 <= block < cfg.n_blocks:
        raise DimensionError(f"block {block} out of range")
    eye = np.eye(cfg.seq_len, dtype=params[f"block.{block}.token.w1"].dtype)
    out = token_feedforward(params, block, eye)
    return ProbeResult(block, out, diagonal_constancy(out), bandwidth_estimate(out))


def loss_profile(params: ModelParams, segments: Sequence[SegmentExample]) -> np.ndarray:
    """Mean absolute error at each segment position over real frames and mel bins."""
    if not segments:
        raise DegenerateInputError("no segments")
    pred = predict(params, segments)
    b = stack(segments)
    err = np.abs(pred.astype(np.float64) - b.target).mean(axis=-1)  # (n, L)
    counts = b.mask.sum(axis=0)
    sums = np.where(b.mask, err, 0.0).sum(axis=0)
    return np.divide(sums, counts, out=np.zeros_like(sums), where=counts > 0)


def edge_middle_ratio(profile: np.ndarray, edge: int = 10, middle: tuple[int, int] | None = None) -> float:
    """Mean of the first and last ``edge`` positions over the mean of ``profile[middle]``.

    ``middle`` defaults to the central half, ``(L // 4, 3 * L // 4)``.
    """
    n = len(profile)
    lo, hi = (n // 4, 3 * n // 4) if middle is None else middle
    if edge < 1 or 2 * edge > n or not 0 <= lo < hi <= n:
        raise DimensionError(f"windows edge={edge}, middle=({lo}, {hi}) do not fit a profile of length {n}")
    edges = np.concatenate([profile[:edge], profile[-edge:]])
    return float(edges.mean() / profile[lo:hi].mean())


def to_pgm_pixels(m: np.ndarray) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    lo, hi = m.min(), m.max()
    if hi == lo:
        return np.full(m.shape, 128, dtype=np.uint8)
    return np.round((m - lo) / (hi - lo) * 255.0).astype(np.uint8)


def export_heatmap(m: np.ndarray, path) -> tuple[Path, Path]:
    """Write a min-max scaled binary PGM and an exact-values CSV next to it."""
    m = np.atleast_2d(np.asarray(m))
    pgm = Path(path).with_suffix(".pgm")
    rows, cols = m.shape
    pgm.write_bytes(f"P5\n{cols} {rows}\n255\n".encode("ascii") + to_pgm_pixels(m).tobytes())
    csv_path = pgm.with_suffix(".csv")
    with csv_path.open("w", newline="") as fh:
        w = csv.writer(fh)
        for row in m:
            w.writerow([repr(float(v)) for v in row])
    return pgm, csv_path


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    cols, rows = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(rows, cols)


def read_csv_matrix(path) -> np.ndarray:
    with Path(path).open() as fh:
        return np.array([[float(v) for v in row] for row in csv.reader(fh)])
