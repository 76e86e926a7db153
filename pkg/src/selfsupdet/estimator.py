"""Monte Carlo machinery for expectations over the discrete candidate grid.

The training objective is an expectation of per-candidate losses under the
detector's categorical distribution P(c|I). Enumerating all C candidates is
the exact-but-expensive route kept for verification; training instead draws
a single candidate per image from a smoothed distribution q and reweights
by P(c)/q(c). With q treated as a constant, the gradient of that estimate
through P is exactly the score-function (likelihood-ratio) gradient, while
its value stays an unbiased estimate of the exact weighted sum.

The smoothing q(c) = P(c) * (1 - C*eps) + eps bounds importance weights
away from division blow-ups and keeps a floor of exploration over cells the
current P considers unlikely.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor


@dataclass
class SampleDraw:
    """One categorical draw recorded with its constant sampling probability."""

    index: int
    q_prob: float  # q(index); always >= the epsilon used to build q
    p_prob: float  # P(index|I) at draw time, for logging/weights

    @property
    def weight(self) -> float:
        return self.p_prob / self.q_prob


def smooth_q(p: np.ndarray, epsilon: float) -> np.ndarray:
    """Epsilon-smoothed sampling distribution q(c) = P(c)(1 - C*eps) + eps.

    Returns plain numpy: q is a constant for gradient purposes. Sums to 1
    whenever p does, and min(q) >= epsilon.
    """
    p = np.asarray(p, dtype=np.float64)
    c = p.shape[-1]
    if c * epsilon >= 1.0:
        raise ValueError(f"C*epsilon = {c * epsilon} >= 1; smoothing undefined")
    if epsilon < 0:
        raise ValueError("epsilon must be >= 0")
    return p * (1.0 - c * epsilon) + epsilon


def sample_categorical(q: np.ndarray, rng: np.random.Generator) -> int:
    """Inverse-CDF draw from a categorical distribution."""
    q = np.asarray(q, dtype=np.float64)
    cdf = np.cumsum(q)
    u = rng.random() * cdf[-1]
    return int(min(np.searchsorted(cdf, u, side="right"), q.shape[-1] - 1))


def draw_candidate(p: np.ndarray, epsilon: float, rng: np.random.Generator,
                   uniform: bool = False) -> SampleDraw:
    """Draw one candidate from smooth_q(p) (or uniform, for the ablation)."""
    p = np.asarray(p, dtype=np.float64)
    c = p.shape[-1]
    q = np.full(c, 1.0 / c) if uniform else smooth_q(p, epsilon)
    idx = sample_categorical(q, rng)
    return SampleDraw(index=idx, q_prob=float(q[idx]), p_prob=float(p[idx]))


def exact_objective(p: Tensor, losses: Tensor) -> Tensor:
    """Full weighted sum over candidates; verification path for small C."""
    if p.shape != losses.shape:
        raise ValueError(f"exact_objective length mismatch: {p.shape} vs {losses.shape}")
    return (p * losses).sum()


def importance_estimate(p: Tensor, draw: SampleDraw, loss_of_drawn: Tensor) -> Tensor:
    """Single-draw estimate (P(c)/q(c)) * loss with q constant.

    Differentiable through both the probability vector (score path) and the
    loss (pathwise); callers stop either side to route gradients.
    """
    if draw.q_prob <= 0.0:
        raise RuntimeError(f"draw has non-positive sampling probability {draw.q_prob}")
    onehot = np.zeros(p.shape, dtype=np.float64)
    onehot[..., draw.index] = 1.0
    p_c = (p * Tensor(onehot, dtype=p.dtype)).sum()
    return (p_c / draw.q_prob) * loss_of_drawn


def distribution_entropy(p: np.ndarray) -> float:
    p = np.asarray(p, dtype=np.float64)
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())
