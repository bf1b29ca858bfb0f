"""Deployment planning: pick the decoder expansion, FC binarisation and the
(eta, B) feedback setting that fit UE/BS resource limits and a bit budget.

Procedure:

1. expansion ``k``: the largest ``k <= k_max`` whose decoder fits both BS
   limits at the largest candidate eta (FLOPs first; if the full-precision
   decoder FC then breaks the BS parameter limit, the decoder FC is
   binarised and ``k`` is lowered until the parameters fit);
2. per candidate eta, binarise an FC layer only when its full-precision
   version breaks the memory limit on its side;
3. among (eta, B) pairs with ``N_fb <= max_feedback_bits`` and
   ``eta >= 1/8``, take the best-ranked one whose configuration passes every
   limit (default rank: larger eta, then larger B).
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Dict, List, Optional, Sequence, Tuple

from .codec import feedback_bits
from .complexity import ComplexityReport, count_config
from .errors import ConfigurationError, InfeasibleError
from .model import ModelConfig, format_eta, parse_eta

DEFAULT_ETAS = (Fraction(1, 4), Fraction(1, 8))
DEFAULT_BITS = (2, 3, 4, 6, 8)
ETA_FLOOR = Fraction(1, 8)
K_MAX = 20
INF = math.inf

CONSTRAINTS = ("ue_params", "ue_flops", "bs_params", "bs_flops", "feedback_bits", "eta_floor")


@dataclass(frozen=True)
class ResourceBudget:
    """Limits in 32-bit parameter units, FLOPs and feedback bits (``inf`` = unlimited)."""

    ue_params: float = INF
    bs_params: float = INF
    ue_flops: float = INF
    bs_flops: float = INF
    max_feedback_bits: float = INF

    def __post_init__(self):
        for name in ("ue_params", "bs_params", "ue_flops", "bs_flops", "max_feedback_bits"):
            value = getattr(self, name)
            if not value > 0:
                raise ConfigurationError(f"budget {name} must be positive, got {value}")

    def violations(self, report: ComplexityReport, n_fb: int) -> List[str]:
        out = []
        if report.encoder_params > self.ue_params:
            out.append("ue_params")
        if report.encoder_flops > self.ue_flops:
            out.append("ue_flops")
        if report.decoder_params > self.bs_params:
            out.append("bs_params")
        if report.decoder_flops > self.bs_flops:
            out.append("bs_flops")
        if n_fb > self.max_feedback_bits:
            out.append("feedback_bits")
        return out


@dataclass
class DeploymentPlan:
    k: int
    binarize_encoder_fc: bool
    binarize_decoder_fc: bool
    eta: Fraction
    bits: int
    report: ComplexityReport
    feedback_bits: int
    na: int = 32
    nt: int = 32

    @property
    def config(self) -> ModelConfig:
        return ModelConfig(na=self.na, nt=self.nt, expansion=self.k, eta=self.eta, quant_bits=self.bits,
                           binarize_encoder_fc=self.binarize_encoder_fc,
                           binarize_decoder_fc=self.binarize_decoder_fc)

    def verify(self, budget: ResourceBudget) -> List[str]:
        """Re-count the planned model and list any violated limits (empty when valid)."""
        report = count_config(self.config)
        n_fb = feedback_bits(self.na, self.nt, self.eta, self.bits)
        return budget.violations(report, n_fb)

    def __str__(self):
        return "\n".join([
            f"k={self.k}",
            f"eta={format_eta(self.eta)}",
            f"feature_dim={self.config.feature_dim}",
            f"bits={self.bits}",
            f"feedback_bits={self.feedback_bits}",
            f"binarize_encoder_fc={int(self.binarize_encoder_fc)}",
            f"binarize_decoder_fc={int(self.binarize_decoder_fc)}",
            f"ue_params={self.report.encoder_params:.2f}",
            f"ue_flops={self.report.encoder_flops}",
            f"bs_params={self.report.decoder_params:.2f}",
            f"bs_flops={self.report.decoder_flops}",
        ])


def default_rank(eta: Fraction, bits: int) -> Tuple:
    """Sort key, smaller is better: larger eta first, then larger B."""
    return (-eta, -bits)


@functools.lru_cache(maxsize=512)
def _cost(cfg: ModelConfig) -> ComplexityReport:
    return count_config(cfg)


def _decoder_fits(budget: ResourceBudget, report: ComplexityReport, params: bool = True) -> bool:
    if report.decoder_flops > budget.bs_flops:
        return False
    return not params or report.decoder_params <= budget.bs_params


def choose_expansion(budget: ResourceBudget, eta: Fraction, k_max: int = K_MAX,
                     na: int = 32, nt: int = 32) -> Tuple[int, bool]:
    """Step 1: (k, binarise decoder FC) for the given (worst-case) eta."""
    base = ModelConfig(na=na, nt=nt, eta=eta)
    k_flops = 0
    for k in range(1, k_max + 1):
        if not _decoder_fits(budget, _cost(base.replace(expansion=k)), params=False):
            break
        k_flops = k
    if k_flops == 0:
        return 1, False
    if _cost(base.replace(expansion=k_flops)).decoder_params <= budget.bs_params:
        return k_flops, False
    binarized = base.replace(binarize_decoder_fc=True)
    for k in range(k_flops, 0, -1):
        if _cost(binarized.replace(expansion=k)).decoder_params <= budget.bs_params:
            return k, True
    return 1, True


def _binarization(budget: ResourceBudget, k: int, eta: Fraction, na: int, nt: int) -> Tuple[bool, bool]:
    """Step 2: binarise an FC only when its full-precision side breaks the memory limit."""
    full = _cost(ModelConfig(na=na, nt=nt, expansion=k, eta=eta))
    return full.encoder_params > budget.ue_params, full.decoder_params > budget.bs_params


def plan(budget: ResourceBudget, etas: Sequence = DEFAULT_ETAS, bits: Sequence[int] = DEFAULT_BITS,
         k_max: int = K_MAX, na: int = 32, nt: int = 32,
         rank: Callable[[Fraction, int], Tuple] = default_rank) -> DeploymentPlan:
    etas = sorted({parse_eta(e, na, nt) for e in etas}, reverse=True)
    bits = sorted(set(int(b) for b in bits), reverse=True)
    if not etas or not bits:
        raise ConfigurationError("need at least one candidate eta and one candidate B")
    if k_max < 1:
        raise ConfigurationError("k_max must be at least 1")
    k, _ = choose_expansion(budget, etas[0], k_max, na, nt)

    candidates = sorted(((e, b) for e in etas for b in bits), key=lambda eb: rank(*eb))
    rejected: Dict[Tuple[Fraction, int], List[str]] = {}
    for eta, b in candidates:
        n_fb = feedback_bits(na, nt, eta, b)
        if eta < ETA_FLOOR:
            rejected[(eta, b)] = ["eta_floor"] + (["feedback_bits"] if n_fb > budget.max_feedback_bits else [])
            continue
        bin_enc, bin_dec = _binarization(budget, k, eta, na, nt)
        cfg = ModelConfig(na=na, nt=nt, expansion=k, eta=eta, quant_bits=b,
                          binarize_encoder_fc=bin_enc, binarize_decoder_fc=bin_dec)
        report = _cost(cfg)
        violated = budget.violations(report, n_fb)
        if not violated:
            return DeploymentPlan(k, bin_enc, bin_dec, eta, b, report, n_fb, na, nt)
        rejected[(eta, b)] = violated

    binding = set(CONSTRAINTS)
    for v in rejected.values():
        binding &= set(v)
    binding = [c for c in CONSTRAINTS if c in binding]
    details = {f"{format_eta(e)},B={b}": v for (e, b), v in rejected.items()}
    if binding:
        msg = f"no feasible deployment; binding constraint(s): {', '.join(binding)}"
    else:
        msg = "no feasible deployment; no single constraint rules out every candidate"
    raise InfeasibleError(msg, binding=binding or None, details=details)
