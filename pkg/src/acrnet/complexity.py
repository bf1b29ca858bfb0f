"""Static FLOPs / parameter accounting for built ACRNet models.

Conventions:

* one multiply-accumulate counts as one FLOP; only convolutions and dense
  layers contribute. Bias adds, batch norm, activations, reshapes, residual
  additions and group sums are free.
* parameters are counted in 32-bit units. A full-precision learnable costs
  one unit; a binarised weight costs 1/32. Biases stay full precision.
* the per-row scales of a binarised layer are derived from its latent weights
  rather than learned, so they are not counted as parameters; they are listed
  separately in ``derived_scales``.
* binarised layers keep their full FLOPs count.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Dict, List

from .layers import BatchNorm2d, Conv2d, Dense, Module, PReLU, shape_only
from .model import AcrNet, ModelConfig, build, format_eta

CONVENTIONS = {
    "flops": "1 MAC = 1 FLOP; conv and dense only",
    "params": "32-bit units; binary weight = 1/32; BN affine and PReLU slopes included",
    "binary_scales": "excluded (derived from latent weights)",
    "conv_bias": "none (every conv is followed by batch norm)",
}


@dataclass
class LayerCost:
    name: str
    side: str
    kind: str
    flops: int
    param_bits: int
    derived_scales: int = 0

    @property
    def params(self) -> float:
        return self.param_bits / 32


@dataclass
class ComplexityReport:
    config: ModelConfig
    entries: List[LayerCost] = field(default_factory=list)
    conventions: Dict[str, str] = field(default_factory=lambda: dict(CONVENTIONS))

    def _total(self, attr, side=None):
        return sum(getattr(e, attr) for e in self.entries if side is None or e.side == side)

    @property
    def flops(self) -> int:
        return self._total("flops")

    @property
    def params(self) -> float:
        return self._total("param_bits") / 32

    @property
    def encoder_flops(self) -> int:
        return self._total("flops", "encoder")

    @property
    def decoder_flops(self) -> int:
        return self._total("flops", "decoder")

    @property
    def encoder_params(self) -> float:
        """UE-side parameter units."""
        return self._total("param_bits", "encoder") / 32

    @property
    def decoder_params(self) -> float:
        """BS-side parameter units."""
        return self._total("param_bits", "decoder") / 32

    def summary(self) -> str:
        return f"{self.flops / 1e6:.2f}M FLOPs / {self.params / 1e3:.0f}K params"

    def table(self) -> str:
        lines = [f"{'layer':44s} {'side':8s} {'FLOPs':>12s} {'params':>12s}"]
        for e in self.entries:
            lines.append(f"{e.name:44s} {e.side:8s} {e.flops:12d} {e.params:12.2f}")
        lines.append(f"{'encoder total':44s} {'':8s} {self.encoder_flops:12d} {self.encoder_params:12.2f}")
        lines.append(f"{'decoder total':44s} {'':8s} {self.decoder_flops:12d} {self.decoder_params:12.2f}")
        lines.append(f"{'total':44s} {'':8s} {self.flops:12d} {self.params:12.2f}")
        lines.append(self.summary())
        return "\n".join(lines)

    def key_values(self) -> str:
        c = self.config
        pairs = [
            ("k", c.expansion),
            ("eta", format_eta(c.eta)),
            ("feature_dim", c.feature_dim),
            ("quant_bits", c.quant_bits if c.quant_bits is not None else "none"),
            ("binarize_encoder_fc", int(c.binarize_encoder_fc)),
            ("binarize_decoder_fc", int(c.binarize_decoder_fc)),
            ("flops", self.flops),
            ("params", f"{self.params:.2f}"),
            ("encoder_flops", self.encoder_flops),
            ("decoder_flops", self.decoder_flops),
            ("encoder_params", f"{self.encoder_params:.2f}"),
            ("decoder_params", f"{self.decoder_params:.2f}"),
            ("derived_scales", sum(e.derived_scales for e in self.entries)),
        ]
        pairs += [(f"convention.{k}", v) for k, v in self.conventions.items()]
        return "\n".join(f"{k}={v}" for k, v in pairs)


def _named_leaves(module: Module, prefix: str):
    children = list(module.children())
    if not children:
        yield prefix.rstrip("."), module
        return
    for name, child in children:
        yield from _named_leaves(child, f"{prefix}{name}.")


def _leaf_cost(name: str, side: str, layer: Module, spatial) -> LayerCost:
    if isinstance(layer, Conv2d):
        bits = 32 * layer.weight.size + (32 * layer.bias.size if layer.bias is not None else 0)
        return LayerCost(name, side, "conv", layer.flops((layer.in_channels,) + spatial), bits)
    if isinstance(layer, Dense):
        w_bits = layer.weight.size * (1 if layer.binarized else 32)
        scales = layer.out_dim if layer.binarized else 0
        return LayerCost(name, side, "dense", layer.flops(), w_bits + 32 * layer.bias.size, scales)
    if isinstance(layer, BatchNorm2d):
        return LayerCost(name, side, "batchnorm", 0, 32 * 2 * layer.channels)
    if isinstance(layer, PReLU):
        return LayerCost(name, side, "prelu", 0, 32 * layer.alphas.size)
    return LayerCost(name, side, type(layer).__name__.lower(), 0, 0)


def count(model: AcrNet) -> ComplexityReport:
    """Walk the built model and tally every learnable and MAC."""
    cfg = model.config
    spatial = (cfg.na, cfg.nt)
    report = ComplexityReport(cfg)
    for side, part in (("encoder", model.encoder), ("decoder", model.decoder)):
        for name, leaf in _named_leaves(part, f"{side}."):
            cost = _leaf_cost(name, side, leaf, spatial)
            if cost.flops or cost.param_bits:
                report.entries.append(cost)
    return report


def count_config(config: ModelConfig) -> ComplexityReport:
    with shape_only():
        return count(build(config))


def encoder_share(report: ComplexityReport) -> Dict[str, float]:
    """Fraction of encoder FLOPs and parameters spent in its FC layer."""
    fc = [e for e in report.entries if e.side == "encoder" and e.kind == "dense"]
    fc_flops = sum(e.flops for e in fc)
    fc_params = sum(e.param_bits for e in fc) / 32
    return {"flops": fc_flops / report.encoder_flops, "params": fc_params / report.encoder_params}


def expansion_increment(eta=Fraction(1, 4), k: int = 1, na: int = 32, nt: int = 32) -> Dict[str, float]:
    """Cost added by going from ACRNet-k x to ACRNet-(k+1) x."""
    lo = count_config(ModelConfig(na=na, nt=nt, expansion=k, eta=eta))
    hi = count_config(ModelConfig(na=na, nt=nt, expansion=k + 1, eta=eta))
    return {"flops": hi.flops - lo.flops, "params": hi.params - lo.params}
