"""Prediction at arbitrary tensor cells and the two evaluation metrics.

Continuous predictions are the canonical inducing-point posterior mean,
which needs the training-batch statistics; binary scores are the probit
link applied to the dual-coefficient projection and need the state alone.
Predictions serialize in the same line format as the tensor files, with the
score in the value column.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import IO

import numpy as np
from scipy.special import ndtr
from scipy.stats import rankdata

from .elbo import SufficientStats
from .kernel import DEFAULT_JITTER, chol_of, chol_solve, cross_cov, gram_cholesky
from .model import BINARY, CONTINUOUS, ModelState, assemble_inputs

# Above this many positive/negative pairs the exact pair count switches to
# the rank-sum formulation.
_EXACT_PAIR_LIMIT = 10_000


@dataclass(frozen=True)
class PredictionSet:
    indices: np.ndarray  # (N, K) int64
    scores: np.ndarray  # (N,) float64

    def __post_init__(self):
        idx = np.ascontiguousarray(self.indices, dtype=np.int64)
        sc = np.ascontiguousarray(self.scores, dtype=np.float64).reshape(-1)
        if idx.shape[0] != sc.shape[0]:
            raise ValueError("indices and scores must have equal length")
        if not np.all(np.isfinite(sc)):
            raise ValueError("scores must be finite")
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "scores", sc)


def predict_continuous(
    state: ModelState,
    stats: SufficientStats,
    indices: np.ndarray,
    jitter: float = DEFAULT_JITTER,
    return_variance: bool = False,
):
    """Posterior mean at the given cells from a trained continuous state and
    its cached training statistics. Optionally also the latent variance."""
    if state.mode != CONTINUOUS:
        raise ValueError("continuous-mode state required")
    idx = np.asarray(indices, dtype=np.int64)
    beta = state.noise_precision
    chol_kbb, _ = gram_cholesky(state.inducing.points, state.kernel, jitter)
    kbb = chol_kbb @ chol_kbb.T
    shifted = kbb + beta * stats.cov_outer
    chol_shifted = chol_of(0.5 * (shifted + shifted.T))
    weights = beta * chol_solve(chol_shifted, stats.cov_targets)
    if idx.shape[0] == 0:
        mean = np.zeros(0)
        var = np.zeros(0)
    else:
        kstar = cross_cov(assemble_inputs(state.factors, idx), state.inducing.points, state.kernel)
        mean = kstar @ weights
        if return_variance:
            v_prior = chol_solve(chol_kbb, kstar.T)
            v_post = chol_solve(chol_shifted, kstar.T)
            var = state.kernel.amplitude - np.sum(kstar.T * (v_prior - v_post), axis=0)
            var = np.maximum(var, 0.0)
    if return_variance:
        return mean, var
    return mean


def predict_binary_score(
    state: ModelState,
    indices: np.ndarray,
    jitter: float = DEFAULT_JITTER,
    variance_adjusted: bool = False,
    stats: SufficientStats | None = None,
) -> np.ndarray:
    """Probit score in (0, 1) per cell, monotone in the latent projection.

    With variance_adjusted=True the projection is damped by the latent
    predictive spread (needs the training statistics); rankings may differ
    from the plain score when that spread varies across cells.
    """
    if state.mode != BINARY:
        raise ValueError("binary-mode state required")
    idx = np.asarray(indices, dtype=np.int64)
    if idx.shape[0] == 0:
        return np.zeros(0)
    kstar = cross_cov(assemble_inputs(state.factors, idx), state.inducing.points, state.kernel)
    eta = kstar @ state.dual_coef
    if not variance_adjusted:
        return ndtr(eta)
    if stats is None:
        raise ValueError("variance_adjusted scores need the training statistics")
    chol_kbb, _ = gram_cholesky(state.inducing.points, state.kernel, jitter)
    kbb = chol_kbb @ chol_kbb.T
    shifted = kbb + stats.cov_outer
    chol_shifted = chol_of(0.5 * (shifted + shifted.T))
    v_prior = chol_solve(chol_kbb, kstar.T)
    v_post = chol_solve(chol_shifted, kstar.T)
    var = state.kernel.amplitude - np.sum(kstar.T * (v_prior - v_post), axis=0)
    var = np.maximum(var, 0.0)
    return ndtr(eta / np.sqrt(1.0 + var))


def mse(predictions: np.ndarray, targets: np.ndarray) -> float:
    """Mean squared error."""
    pred = np.asarray(predictions, dtype=np.float64)
    tgt = np.asarray(targets, dtype=np.float64)
    if pred.shape != tgt.shape or pred.size == 0:
        raise ValueError("predictions and targets must be equal-length and nonempty")
    return float(np.mean((pred - tgt) ** 2))


def auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Probability a positive outranks a negative, ties counted half.

    Exact pair counting up to a size cutoff, midrank formulation beyond it;
    both agree exactly.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    pos = s[y == 1]
    neg = s[y == 0]
    if pos.size == 0 or neg.size == 0:
        raise ValueError("AUC needs at least one positive and one negative label")
    if pos.size * neg.size <= _EXACT_PAIR_LIMIT:
        gt = np.sum(pos[:, None] > neg[None, :])
        eq = np.sum(pos[:, None] == neg[None, :])
        return float((gt + 0.5 * eq) / (pos.size * neg.size))
    ranks = rankdata(s)
    rank_sum = float(np.sum(ranks[y == 1]))
    u = rank_sum - pos.size * (pos.size + 1) / 2.0
    return float(u / (pos.size * neg.size))


def write_predictions(pred: PredictionSet, dims, stream: IO[str]) -> None:
    """Same line format as the tensor files: header, then index columns and
    the score."""
    k = pred.indices.shape[1] if pred.indices.size else len(dims)
    stream.write(f"{k} " + " ".join(str(int(d)) for d in dims) + "\n")
    for idx, score in zip(pred.indices, pred.scores):
        stream.write(" ".join(str(int(i)) for i in idx) + f" {float(score)!r}\n")


def read_predictions(stream: IO[str]) -> PredictionSet:
    from .sptensor import parse_coo

    tensor = parse_coo(stream)
    return PredictionSet(indices=tensor.indices, scores=tensor.values)


__all__ = [
    "PredictionSet",
    "predict_continuous",
    "predict_binary_score",
    "mse",
    "auc",
    "write_predictions",
    "read_predictions",
]
