"""
Connectionist Temporal Classification in log space.

A lattice is a T x (V + 1) matrix of log-probabilities whose column 0 is the
blank; labels are ids in [1, V].
"""

from typing import List, Optional, Sequence, Tuple

import numpy as np
import structlog
from pydantic import BaseModel
from scipy.special import log_softmax, logsumexp, softmax

from . import numerics as nx
from .errors import ContractError
from .numerics import Tensor

logger = structlog.get_logger()

BLANK = 0
NORMALIZATION_TOL = 1e-9


class CtcResult(BaseModel):
    nll: float
    feasible: bool


def _check_inputs(lattice: np.ndarray, labels: Sequence[int], normalized: bool) -> Tuple[np.ndarray, np.ndarray]:
    lattice = np.asarray(lattice, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if lattice.ndim != 2 or lattice.shape[1] < 2:
        raise ContractError(f"lattice must be T x (V+1) with V >= 1, got {lattice.shape}")
    if labels.size and (labels.min() < 1 or labels.max() >= lattice.shape[1]):
        raise ContractError(f"labels must lie in [1, {lattice.shape[1] - 1}]")
    if normalized and lattice.shape[0]:
        drift = np.abs(logsumexp(lattice, axis=1)).max()
        if drift > NORMALIZATION_TOL:
            raise ContractError(f"lattice rows are not normalised (max |logsumexp| = {drift:.3g})")
    return lattice, labels


def min_frames(labels: Sequence[int]) -> int:
    """Frames needed to emit `labels`: one per label plus a blank between repeats."""
    labels = list(labels)
    return len(labels) + sum(1 for a, b in zip(labels, labels[1:]) if a == b)


def _extend(labels: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Blank-interleaved label sequence and the mask of states allowed to skip from s-2."""
    ext = np.zeros(2 * labels.size + 1, dtype=np.int64)
    ext[1::2] = labels
    skip = np.zeros(ext.size, dtype=bool)
    skip[2:] = (ext[2:] != BLANK) & (ext[2:] != ext[:-2])
    return ext, skip


def _forward(lp: np.ndarray, skip: np.ndarray) -> np.ndarray:
    steps, states = lp.shape
    alpha = np.full((steps, states), -np.inf)
    alpha[0, 0] = lp[0, 0]
    if states > 1:
        alpha[0, 1] = lp[0, 1]
    for t in range(1, steps):
        prev = alpha[t - 1]
        acc = prev.copy()
        acc[1:] = np.logaddexp(acc[1:], prev[:-1])
        acc[2:] = np.where(skip[2:], np.logaddexp(acc[2:], prev[:-2]), acc[2:])
        alpha[t] = acc + lp[t]
    return alpha


def _backward(lp: np.ndarray, skip: np.ndarray) -> np.ndarray:
    steps, states = lp.shape
    beta = np.full((steps, states), -np.inf)
    beta[-1, -1] = lp[-1, -1]
    if states > 1:
        beta[-1, -2] = lp[-1, -2]
    for t in range(steps - 2, -1, -1):
        nxt = beta[t + 1]
        acc = nxt.copy()
        acc[:-1] = np.logaddexp(acc[:-1], nxt[1:])
        acc[:-2] = np.where(skip[2:], np.logaddexp(acc[:-2], nxt[2:]), acc[:-2])
        beta[t] = acc + lp[t]
    return beta


def _log_total(alpha: np.ndarray) -> float:
    last = alpha[-1]
    return float(np.logaddexp(last[-1], last[-2]) if last.size > 1 else last[-1])


def ctc_loss(lattice: np.ndarray, labels: Sequence[int], normalized: bool = True) -> CtcResult:
    """Negative log-likelihood of `labels` summed over every alignment in the lattice."""
    lattice, labels = _check_inputs(lattice, labels, normalized)
    if lattice.shape[0] < min_frames(labels):
        return CtcResult(nll=float("inf"), feasible=False)
    if lattice.shape[0] == 0:
        return CtcResult(nll=0.0, feasible=True)
    ext, skip = _extend(labels)
    alpha = _forward(lattice[:, ext], skip)
    return CtcResult(nll=-_log_total(alpha), feasible=True)


def ctc_grad(lattice: np.ndarray, labels: Sequence[int], normalized: bool = True) -> np.ndarray:
    """d(nll)/d(lattice): minus the per-symbol state occupancy from forward-backward."""
    lattice, labels = _check_inputs(lattice, labels, normalized)
    if lattice.shape[0] < min_frames(labels):
        raise ContractError("ctc_grad: infeasible alignment, loss is infinite")
    grad = np.zeros_like(lattice)
    if lattice.shape[0] == 0:
        return grad
    ext, skip = _extend(labels)
    lp = lattice[:, ext]
    alpha = _forward(lp, skip)
    beta = _backward(lp, skip)
    occupancy = np.exp(alpha + beta - lp - _log_total(alpha))
    for s, symbol in enumerate(ext):
        grad[:, symbol] -= occupancy[:, s]
    return grad


def ctc_logits_grad(logits: np.ndarray, labels: Sequence[int]) -> np.ndarray:
    """Gradient with respect to unnormalised logits (lattice = log_softmax(logits))."""
    logits = np.asarray(logits, dtype=np.float64)
    g = ctc_grad(log_softmax(logits, axis=1), labels)
    return g - softmax(logits, axis=1) * g.sum(axis=1, keepdims=True)


def ctc_loss_tensor(log_probs: Tensor, labels: Sequence[int]) -> Optional[Tensor]:
    """Record the CTC loss on the active tape; None when the labels cannot fit."""
    result = ctc_loss(log_probs.data, labels, normalized=False)
    if not result.feasible:
        return None
    grad = ctc_grad(log_probs.data, labels, normalized=False)
    return nx.custom_op("ctc_loss", (log_probs,), np.asarray(result.nll), lambda g: (float(g) * grad,))


def best_path_nll(lattice: np.ndarray, labels: Sequence[int]) -> float:
    """NLL of the single most likely alignment (Viterbi over the CTC trellis)."""
    lattice, labels = _check_inputs(lattice, labels, normalized=False)
    if lattice.shape[0] < min_frames(labels):
        return float("inf")
    if lattice.shape[0] == 0:
        return 0.0
    ext, skip = _extend(labels)
    lp = lattice[:, ext]
    score = np.full(ext.size, -np.inf)
    score[0] = lp[0, 0]
    if ext.size > 1:
        score[1] = lp[0, 1]
    for t in range(1, lp.shape[0]):
        acc = score.copy()
        acc[1:] = np.maximum(acc[1:], score[:-1])
        acc[2:] = np.where(skip[2:], np.maximum(acc[2:], score[:-2]), acc[2:])
        score = acc + lp[t]
    best = max(score[-1], score[-2]) if ext.size > 1 else score[-1]
    return float(-best)


def greedy_decode(lattice: np.ndarray) -> List[int]:
    """Framewise argmax, collapse repeats, drop blanks."""
    lattice = np.atleast_2d(np.asarray(lattice))
    if lattice.shape[0] == 0:
        return []
    best = lattice.argmax(axis=1)
    keep = np.ones(best.size, dtype=bool)
    keep[1:] = best[1:] != best[:-1]
    return [int(k) for k in best[keep] if k != BLANK]
