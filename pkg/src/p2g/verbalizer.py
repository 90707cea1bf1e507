"""Gaussian label tokens lifted into vocabulary space, and their aggregation."""
from __future__ import annotations

from typing import Callable, NamedTuple, Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .prompt import VARIANCE_FLOOR


class LabelGaussian(NamedTuple):
    mean: torch.Tensor
    variance: torch.Tensor


def estimate_label_gaussian(v, head: Callable, proj_mu: nn.Linear, proj_sigma: nn.Linear) -> LabelGaussian:
    """Mean and variance over the vocabulary for label token(s) ``v`` (..., d)."""
    mean = head(F.relu(proj_mu(v)))
    variance = torch.exp(head(F.relu(proj_sigma(v))))
    return LabelGaussian(mean, variance)


def aggregate(gaussians: Sequence[LabelGaussian], lam: float, plain_sum: bool = False,
              sigma: str = "std") -> LabelGaussian:
    """Uncertainty-weighted sum of label Gaussians.

    Weights are ``exp(-lam * s)`` per component, where ``s`` is the standard
    deviation (``sigma="std"``) or the variance (``sigma="variance"``).
    ``plain_sum`` forces every weight to one. Summation runs in token order.
    """
    if not gaussians:
        raise ValueError("need at least one label Gaussian")
    if sigma not in ("std", "variance"):
        raise ValueError(f"unknown sigma reading: {sigma!r}")
    mean = var = None
    for g in gaussians:
        if plain_sum:
            m_i, v_i = g.mean, g.variance
        else:
            spread = torch.clamp(g.variance, min=VARIANCE_FLOOR)
            if sigma == "std":
                spread = torch.sqrt(spread)
            kappa = torch.exp(-lam * spread)
            m_i, v_i = kappa * g.mean, kappa * kappa * g.variance
        mean = m_i if mean is None else mean + m_i
        var = v_i if var is None else var + v_i
    return LabelGaussian(mean, var)


def label_sample(g: LabelGaussian, noise) -> torch.Tensor:
    """The pre-softmax label representation ``mean + noise * std``."""
    return g.mean + noise * torch.sqrt(torch.clamp(g.variance, min=VARIANCE_FLOOR))


def sample_label(g: LabelGaussian, noise) -> torch.Tensor:
    return torch.softmax(label_sample(g, noise), dim=-1)


class VerbalizerEstimator(nn.Module):
    def __init__(self, d: int, label_count: int = 3, lam: float = 1.0):
        super().__init__()
        if label_count < 1:
            raise ValueError("label_count must be >= 1")
        if lam <= 0:
            raise ValueError("lambda must be > 0")
        self.lam = lam
        self.label_tokens = nn.Parameter(torch.randn(label_count, d) * 0.02)
        self.proj_mu = nn.Linear(d, d)
        self.proj_sigma = nn.Linear(d, d)
        for lin in (self.proj_mu, self.proj_sigma):
            nn.init.normal_(lin.weight, std=0.02)
            nn.init.zeros_(lin.bias)

    def forward(self, head: Callable, plain_sum: bool = False, sigma: str = "std") -> LabelGaussian:
        g = estimate_label_gaussian(self.label_tokens, head, self.proj_mu, self.proj_sigma)
        per_token = [LabelGaussian(g.mean[i], g.variance[i]) for i in range(len(self.label_tokens))]
        return aggregate(per_token, self.lam, plain_sum=plain_sum, sigma=sigma)
