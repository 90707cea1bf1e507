"""Central-difference verification of the analytic gradients of the full loss."""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import torch

from .backbone import BackboneConfig, MaskedLM, Vocabulary
from .data import Event, ScriptInstance
from .model import ModelConfig, P2GModel, draw_noise

FAMILIES = {
    "embeddings": ("backbone.tok_emb.", "backbone.pos_emb."),
    "encoder": ("backbone.blocks.", "backbone.ln_f."),
    "attn_mu": ("prompt.attn_mu.",),
    "attn_sigma": ("prompt.attn_sigma.",),
    "projections": ("verbalizer.proj_mu.", "verbalizer.proj_sigma."),
    "label_tokens": ("verbalizer.label_tokens",),
    "mlm_head": ("backbone.head.",),
}


def family_of(name: str) -> Optional[str]:
    for fam, prefixes in FAMILIES.items():
        if name.startswith(prefixes):
            return fam
    return None


def _ev(s: str) -> Event:
    return Event(*s.split())


def tiny_fixture(stationary: bool = False) -> list[ScriptInstance]:
    """Two 2-event instances with three candidates over seven content tokens
    (|V| = 20 with the reserved and baseline words)."""
    chain = (_ev("s0 v0 o0 NULL"), _ev("s0 v1 o1 p0"))
    cands = (_ev("s0 v2 o0 p0"), _ev("o1 v2 s0 NULL"), _ev("o0 v0 o1 p0"))
    if stationary:
        # identical candidates: every score is 1/m whatever the parameters
        cands = (cands[0],) * 3
    return [ScriptInstance(chain, cands, 0), ScriptInstance(chain[::-1], cands, 2)]


TINY_BACKBONE = BackboneConfig(hidden_size=8, layer_count=1, head_count=2, feed_forward_size=16,
                               max_sequence_length=24)


def tiny_model(seed: int = 0, init_std: float = 0.3, stationary: bool = False):
    instances = tiny_fixture(stationary)
    vocab = Vocabulary.from_corpus(instances)
    torch.manual_seed(seed)
    model = P2GModel(MaskedLM(TINY_BACKBONE, len(vocab)), vocab, ModelConfig()).double()
    # small default inits make every gradient tiny; widen them so the check is informative
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if "ln" not in name:
                p.copy_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * init_std)
    model.eval()
    return model, instances


@dataclass
class FamilyResult:
    family: str
    max_rel_error: float
    worst: str
    checked: int


@dataclass
class GradCheckReport:
    passed: bool
    max_rel_error: float
    tolerance: float
    families: list[FamilyResult] = field(default_factory=list)
    failures: list[str] = field(default_factory=list)
    seconds: float = 0.0

    def lines(self) -> list[str]:
        out = [f"{f.family:14s} max_rel_error={f.max_rel_error:.3e} checked={f.checked} worst={f.worst}"
               for f in self.families]
        out.append(("PASS" if self.passed else "FAIL") + f" max_rel_error={self.max_rel_error:.3e}"
                   f" tol={self.tolerance:g} time={self.seconds:.2f}s")
        out.extend(f"failed: {f}" for f in self.failures)
        return out


def relative_error(analytic: float, numeric: float, floor: float = 1e-8) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def check_gradients(loss_fn: Callable[[], torch.Tensor], named_params, per_family: int = 10,
                    step: float = 1e-4, tolerance: float = 1e-3, seed: int = 0,
                    family: Callable[[str], Optional[str]] = family_of,
                    corrupt_family: Optional[str] = None) -> GradCheckReport:
    """Compare ``loss_fn``'s autograd gradient with central differences on
    ``per_family`` random scalars of every parameter family."""
    t0 = time.perf_counter()
    named_params = [(n, p) for n, p in named_params if family(n) is not None]
    for _, p in named_params:
        p.grad = None
    loss_fn().backward()
    analytic = {n: p.grad.detach().clone() for n, p in named_params}
    if corrupt_family is not None:
        for n in analytic:
            if family(n) == corrupt_family:
                analytic[n] *= 1.1

    rng = np.random.default_rng(seed)
    by_family: dict[str, list] = {}
    for n, p in named_params:
        by_family.setdefault(family(n), []).append((n, p))
    report = GradCheckReport(True, 0.0, tolerance)
    for fam, params in by_family.items():
        sizes = np.array([p.numel() for _, p in params])
        picks = rng.choice(sizes.sum(), size=min(per_family, int(sizes.sum())), replace=False)
        offsets = np.cumsum(sizes) - sizes
        worst, worst_name = 0.0, ""
        for flat in picks:
            k = int(np.searchsorted(offsets, flat, side="right") - 1)
            name, p = params[k]
            i = int(flat - offsets[k])
            view = p.data.view(-1)
            orig = view[i].item()
            with torch.no_grad():
                view[i] = orig + step
                up = float(loss_fn())
                view[i] = orig - step
                down = float(loss_fn())
                view[i] = orig
            numeric = (up - down) / (2 * step)
            err = relative_error(float(analytic[name].view(-1)[i]), numeric)
            if err >= worst:
                worst, worst_name = err, f"{name}[{i}]"
        report.families.append(FamilyResult(fam, worst, worst_name, len(picks)))
        if worst >= tolerance:
            report.passed = False
            report.failures.append(f"{fam}: {worst_name} relative error {worst:.3e}")
        report.max_rel_error = max(report.max_rel_error, worst)
    report.seconds = time.perf_counter() - t0
    return report


def gradient_check(seed: int = 0, per_family: int = 10, step: float = 1e-4, tolerance: float = 1e-3,
                   stationary: bool = False, corrupt_family: Optional[str] = None) -> GradCheckReport:
    """Full-pipeline check on the tiny fixture (d=8, one layer, |V|=20), 64-bit.

    The loss is the summed gold NLL with fixed nonzero noise, or zero noise on
    the stationary fixture.
    """
    model, instances = tiny_model(seed, stationary=stationary)
    batch = model.encode(instances)
    noise = draw_noise(seed, "check", range(len(instances)), 0, 1, batch.ids.shape[1], model.d,
                       model.vocab_size, dtype=torch.float64)
    if stationary:
        noise = noise._replace(prompt=noise.prompt * 0, label=noise.label * 0)

    def loss_fn():
        return model.loss(batch, noise)[0]

    return check_gradients(loss_fn, list(model.named_parameters()), per_family, step, tolerance,
                           seed, corrupt_family=corrupt_family)
