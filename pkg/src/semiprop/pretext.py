"""Self-supervised auxiliary tasks: masked feature reconstruction and
clip-order prediction, with their losses."""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad


@dataclass
class OrderSample:
    shuffled: np.ndarray  # (T', C), T' = T truncated to a multiple of K
    label: int  # lexicographic index of the applied permutation in S_K
    K: int


def mask_features(f1: np.ndarray, omega: float, rng: np.random.Generator):
    """Zero out round(omega*T) random rows; returns (masked copy, 0/1 mask)."""
    if not (0.0 <= omega < 1.0):
        raise ValueError(f"omega must be in [0,1), got {omega}")
    T = f1.shape[0]
    n_mask = round(omega * T)
    mask = np.zeros(T, dtype=np.int8)
    if n_mask:
        idx = rng.choice(T, size=n_mask, replace=False)
        mask[idx] = 1
    f2 = f1.copy()
    f2[mask.astype(bool)] = 0.0
    return f2, mask


def recon_loss(pred, f1, mask: np.ndarray | None = None):
    """Mean squared error between reconstruction and original features.

    With a mask (masked_only support), only masked rows enter the mean.
    Accepts plain arrays or autodiff tensors; returns the same kind.
    """
    pred_data = pred.data if isinstance(pred, ad.Tensor) else np.asarray(pred)
    f1 = np.asarray(f1)
    if pred_data.shape != f1.shape:
        raise ValueError(f"shape mismatch: {pred_data.shape} vs {f1.shape}")
    diff = ad.as_tensor(pred) - f1
    sq = ad.square(diff)
    if mask is None:
        loss = ad.tmean(sq)
    else:
        w = mask.astype(f1.dtype)[:, None]
        denom = max(float(w.sum()) * f1.shape[1], 1.0)
        loss = ad.tsum(ad.mul(sq, w)) / denom
    return loss if isinstance(pred, ad.Tensor) else loss.item()


def permutations_of(K: int) -> list[tuple[int, ...]]:
    return list(itertools.permutations(range(K)))


def make_order_sample(f1: np.ndarray, K: int, rng: np.random.Generator) -> OrderSample:
    """Split into K equal contiguous clips (trailing remainder rows dropped),
    shuffle them with a uniform permutation, label = its lexicographic index."""
    T = f1.shape[0]
    if K < 2 or K > T:
        raise ValueError(f"need 2 <= K <= T, got K={K}, T={T}")
    clip_len = T // K
    perms = permutations_of(K)
    label = int(rng.integers(len(perms)))
    perm = perms[label]
    clips = [f1[j * clip_len:(j + 1) * clip_len] for j in perm]
    return OrderSample(shuffled=np.concatenate(clips, axis=0), label=label, K=K)


def order_loss(logits, label: int):
    """Cross entropy of permutation-class logits against the true order."""
    n = logits.data.shape[0] if isinstance(logits, ad.Tensor) else np.asarray(logits).shape[0]
    if not (0 <= label < n):
        raise ValueError(f"label {label} out of range for {n} classes")
    loss = ad.cross_entropy_logits(ad.as_tensor(np.asarray(logits, dtype=np.float64))
                                   if not isinstance(logits, ad.Tensor) else logits, label)
    return loss if isinstance(logits, ad.Tensor) else loss.item()
