"""Proposal decoding from network predictions, score fusion, and Soft-NMS."""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .data import iou_1d
from .perturb import Predictions


@dataclass
class Proposal:
    start: float
    end: float
    score: float


def _boundary_set(p: np.ndarray) -> np.ndarray:
    """Indices that are strict local maxima or exceed half the global max."""
    T = p.shape[0]
    keep = p > 0.5 * p.max()
    for t in range(T):
        left = p[t - 1] if t > 0 else -np.inf
        right = p[t + 1] if t < T - 1 else -np.inf
        if p[t] > left and p[t] > right:
            keep[t] = True
    return np.flatnonzero(keep)


def decode_candidates(out: Predictions, max_duration: int | None = None) -> list[Proposal]:
    """All (start, end) combinations of boundary candidates, scored by
    p_s(s) * p_e(e-1) * m_cc(d, s) * m_cr(d, s) with d = e - s - 1.

    A start index s opens the segment at coordinate s; an end index t closes
    it at coordinate t + 1, so the pair decodes to segment [s, t+1] matching
    the (d, i) -> [i, i+d+1] map convention. Sorted by descending score.
    """
    T = out.p_s.shape[0]
    D = out.m_cc.shape[0] if max_duration is None else min(max_duration, out.m_cc.shape[0])
    starts = _boundary_set(out.p_s)
    end_snippets = _boundary_set(out.p_e)
    props: list[Proposal] = []
    for s in starts:
        for t in end_snippets:
            e = t + 1
            d = e - s - 1
            if d < 0 or d >= D:
                continue
            score = float(out.p_s[s] * out.p_e[t] * out.m_cc[d, s] * out.m_cr[d, s])
            props.append(Proposal(start=float(s), end=float(e), score=score))
    props.sort(key=lambda p: (-p.score, p.start, p.end))
    return props


def soft_nms(props: list[Proposal], sigma: float = 0.4, score_floor: float = 0.001,
             max_out: int = 100) -> list[Proposal]:
    """Gaussian Soft-NMS: keep the best proposal, decay the rest by
    exp(-iou^2 / sigma), repeat. Ties break on (start, end)."""
    if sigma <= 0.0:
        raise ValueError(f"sigma must be > 0, got {sigma}")
    pool = [Proposal(p.start, p.end, p.score) for p in props]
    out: list[Proposal] = []
    while pool and len(out) < max_out:
        best_idx = min(range(len(pool)),
                       key=lambda j: (-pool[j].score, pool[j].start, pool[j].end))
        best = pool.pop(best_idx)
        if best.score < score_floor:
            break
        out.append(best)
        for p in pool:
            ov = iou_1d((best.start, best.end), (p.start, p.end))
            if ov > 0.0:
                p.score *= float(np.exp(-(ov * ov) / sigma))
    return out


def write_proposals(props: list[Proposal], T: int, path: str | os.PathLike) -> None:
    """One line per proposal: start, end, score in snippet coordinates, then
    the segment normalized to [0, 1] by the video length."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# start end score start_norm end_norm\n")
        for p in props:
            fh.write(f"{p.start:.6f} {p.end:.6f} {p.score:.8g} "
                     f"{p.start / T:.6f} {p.end / T:.6f}\n")


def read_proposals(path: str | os.PathLike) -> list[Proposal]:
    props = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            props.append(Proposal(start=float(parts[0]), end=float(parts[1]),
                                  score=float(parts[2])))
    return props
