"""Elastic ACRNet encoder/decoder.

Encoder (UE side)::

    subtract 0.5 -> 5x5 conv head -> ACREnBlock x2 -> flatten -> FC(2*Na*Nt -> feature_dim)
    [-> sigmoid when a quantiser is configured]

Decoder (BS side)::

    FC(feature_dim -> 2*Na*Nt) -> reshape 2xNaxNt -> 5x5 conv head
    -> ACRDeBlock x2 -> sigmoid

Every convolution is bias-free and followed by batch norm and the configured
activation, except the last convolution of the decoder, whose output goes
(through the group sum and residual addition) straight into the sigmoid.
An ACRDeBlock with expansion k runs M = 4k parallel two-channel
branches (7x7, 1x9, 9x1), realised as grouped convolutions over a
channel-replicated input and summed back to two channels before the residual
addition.

The encoder centres its input on the normalisation midpoint before the head
convolution, which is the same as zero-padding the centred map; without it
the padding border dominates the first batch-norm statistics. This costs no
FLOPs or parameters.

Initialisation: convolution and dense weights are uniform in
``+-sqrt(1/fan_in)``. The batch-norm scales of the decoder head and of the
last normalised layer in every residual branch start at zero, so each
residual block starts as the identity and an untrained decoder outputs
exactly 0.5.
"""

from __future__ import annotations

import contextlib
from dataclasses import asdict, dataclass
from fractions import Fraction
from typing import Optional, Union

import numpy as np

from . import codec
from . import tensor as T
from .codec import MAX_BITS
from .errors import ConfigurationError, ShapeError
from .layers import (ACTIVATIONS, BatchNorm2d, Conv2d, Dense, Module, make_activation)
from .tensor import Tensor

INPUT_CENTRE = 0.5
FEATURE_CENTRE = 0.5     # sigmoid features live in (0, 1)
STANDARD_ETAS = (Fraction(1, 4), Fraction(1, 8), Fraction(1, 16), Fraction(1, 32), Fraction(1, 64))


def parse_eta(text: Union[str, int, float, Fraction], na: int = 32, nt: int = 32) -> Fraction:
    """Accept ``"1/4"``, ``0.25`` or a feature length such as ``"512"``."""
    if isinstance(text, Fraction):
        return text
    if isinstance(text, (int, np.integer)) or (isinstance(text, str) and text.strip().isdigit()):
        dim = int(text)
        if dim < 1:
            raise ConfigurationError(f"feature length must be positive, got {dim}")
        return Fraction(dim, 2 * na * nt)
    try:
        value = Fraction(str(text).strip()).limit_denominator(1 << 20)
    except (ValueError, ZeroDivisionError):
        raise ConfigurationError(f"cannot parse eta {text!r}") from None
    return value


def format_eta(eta: Fraction) -> str:
    return f"{eta.numerator}/{eta.denominator}"


@dataclass(frozen=True)
class ModelConfig:
    na: int = 32
    nt: int = 32
    expansion: int = 1
    eta: Fraction = Fraction(1, 4)
    quant_bits: Optional[int] = None
    binarize_encoder_fc: bool = False
    binarize_decoder_fc: bool = False
    activation: str = "prelu"

    def __post_init__(self):
        object.__setattr__(self, "eta", parse_eta(self.eta, self.na, self.nt))
        if self.na < 1 or self.nt < 1:
            raise ConfigurationError(f"na and nt must be positive, got {self.na}x{self.nt}")
        if not isinstance(self.expansion, (int, np.integer)) or self.expansion < 1:
            raise ConfigurationError(f"expansion must be a positive integer, got {self.expansion!r}")
        if not 0 < self.eta <= 1:
            raise ConfigurationError(f"eta must lie in (0, 1], got {self.eta}")
        dim = self.eta * 2 * self.na * self.nt
        if dim.denominator != 1:
            raise ConfigurationError(
                f"eta={format_eta(self.eta)} gives non-integer feature length {float(dim)}")
        if self.quant_bits is not None and not 1 <= self.quant_bits <= MAX_BITS:
            raise ConfigurationError(f"quant_bits must be in 1..{MAX_BITS} or None")
        if self.activation not in ACTIVATIONS:
            raise ConfigurationError(f"activation must be one of {ACTIVATIONS}")

    @property
    def feature_dim(self) -> int:
        return int(self.eta * 2 * self.na * self.nt)

    @property
    def input_dim(self) -> int:
        return 2 * self.na * self.nt

    @property
    def group_factor(self) -> int:
        return 4 * self.expansion

    @property
    def feedback_bits(self) -> Optional[int]:
        return None if self.quant_bits is None else self.feature_dim * self.quant_bits

    def replace(self, **changes) -> "ModelConfig":
        fields = asdict(self)
        fields.update(changes)
        return ModelConfig(**fields)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["eta"] = format_eta(self.eta)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)

    def label(self) -> str:
        b = "B" if self.binarize_encoder_fc or self.binarize_decoder_fc else ""
        q = f", B={self.quant_bits}" if self.quant_bits else ""
        return f"{b}ACRNet-{self.expansion}x (eta={format_eta(self.eta)}{q})"


class ConvBNAct(Module):
    def __init__(self, cin, cout, kernel, groups, activation, rng):
        self.conv = Conv2d(cin, cout, kernel, groups=groups, rng=rng)
        self.bn = BatchNorm2d(cout)
        self.act = make_activation(activation, cout)

    def forward(self, x):
        return self.act(self.bn(self.conv(x)))


class ACREnBlock(Module):
    """1x9 then 9x1 on two channels, with residual addition."""

    def __init__(self, activation: str, rng):
        self.conv1x9 = ConvBNAct(2, 2, (1, 9), 1, activation, rng)
        self.conv9x1 = ConvBNAct(2, 2, (9, 1), 1, activation, rng)

    def forward(self, x):
        return x + self.conv9x1(self.conv1x9(x))


class ACRDeBlock(Module):
    """Aggregated residual block with ``groups`` parallel two-channel branches.

    With ``final=True`` the 9x1 convolution has no batch norm or activation.
    """

    def __init__(self, groups: int, activation: str, rng, final: bool = False):
        width = 2 * groups
        self.groups = groups
        self.conv7x7 = ConvBNAct(width, width, 7, groups, activation, rng)
        self.conv1x9 = ConvBNAct(width, width, (1, 9), groups, activation, rng)
        if final:
            self.conv9x1 = Conv2d(width, width, (9, 1), groups=groups, rng=rng)
        else:
            self.conv9x1 = ConvBNAct(width, width, (9, 1), groups, activation, rng)

    def forward(self, x):
        h = T.repeat_channels(x, self.groups)
        h = self.conv9x1(self.conv1x9(self.conv7x7(h)))
        return x + T.group_sum(h, self.groups)


class Encoder(Module):
    def __init__(self, cfg: ModelConfig, rng):
        self.cfg = cfg
        self.head = ConvBNAct(2, 2, 5, 1, cfg.activation, rng)
        self.blocks = [ACREnBlock(cfg.activation, rng), ACREnBlock(cfg.activation, rng)]
        self.fc = Dense(cfg.input_dim, cfg.feature_dim, binarized=cfg.binarize_encoder_fc, rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        h = self.head(T.sub(x, INPUT_CENTRE))
        for block in self.blocks:
            h = block(h)
        v = self.fc(h.reshape(x.shape[0], self.cfg.input_dim))
        if self.cfg.quant_bits is not None:
            v = T.sigmoid(v)
        return v


class Decoder(Module):
    def __init__(self, cfg: ModelConfig, rng):
        self.cfg = cfg
        self.fc = Dense(cfg.feature_dim, cfg.input_dim, binarized=cfg.binarize_decoder_fc, rng=rng)
        self.head = ConvBNAct(2, 2, 5, 1, cfg.activation, rng)
        self.blocks = [ACRDeBlock(cfg.group_factor, cfg.activation, rng),
                       ACRDeBlock(cfg.group_factor, cfg.activation, rng, final=True)]

    def forward(self, v: Tensor) -> Tensor:
        if self.cfg.quant_bits is not None:
            # zero-mean FC input; the bias absorbs the shift
            v = T.sub(v, FEATURE_CENTRE)
        h = self.fc(v).reshape(v.shape[0], 2, self.cfg.na, self.cfg.nt)
        h = self.head(h)
        for block in self.blocks:
            h = block(h)
        return T.sigmoid(h)


class AcrNet(Module):
    def __init__(self, cfg: ModelConfig, rng: Optional[np.random.Generator] = None):
        rng = np.random.default_rng(0) if rng is None else rng
        self.config = cfg
        self.encoder = Encoder(cfg, rng)
        self.decoder = Decoder(cfg, rng)
        self._zero_residual_init()

    def _zero_residual_init(self):
        dec = self.decoder
        dec.head.bn.weight.data[...] = 0
        for block in list(self.encoder.blocks) + list(dec.blocks):
            last = block.conv9x1 if isinstance(block.conv9x1, ConvBNAct) else block.conv1x9
            last.bn.weight.data[...] = 0

    def forward(self, x: Tensor) -> Tensor:
        v = self.encoder(x)
        if self.config.quant_bits is not None:
            v = T.quantize_ste(v, self.config.quant_bits)
        return self.decoder(v)

    def freeze_slopes(self, value: Optional[float] = None):
        """Stop training every PReLU slope (optionally resetting it first)."""
        from .layers import PReLU

        for m in self.modules():
            if isinstance(m, PReLU):
                m.freeze(value)

    def __repr__(self):
        return f"AcrNet({self.config.label()})"


def build(config: ModelConfig, seed: int = 0) -> AcrNet:
    return AcrNet(config, np.random.default_rng(seed))


@contextlib.contextmanager
def inference(model: Module):
    """No graph recording and batch norm on running statistics; restores the
    previous train/eval state on exit."""
    modes = [(m, m.training) for m in model.modules()]
    model.eval()
    try:
        with T.no_grad():
            yield model
    finally:
        for m, mode in modes:
            m.training = mode


def model_dtype(model: AcrNet):
    return model.encoder.fc.weight.dtype


def _batched(model: AcrNet, x, shape, what: str) -> tuple:
    arr = x.data if isinstance(x, Tensor) else np.asarray(x)
    single = arr.shape == shape
    if single:
        arr = arr[None]
    if arr.shape[1:] != shape:
        raise ShapeError(f"{what} expects shape {shape} or (N, *{shape}), got {arr.shape}")
    return Tensor(arr.astype(model_dtype(model), copy=False)), single


def encode(model: AcrNet, ha) -> np.ndarray:
    """Compress normalised CSI (2, Na, Nt) or (N, 2, Na, Nt) into feature vectors.

    With a quantiser configured the features lie in (0, 1) and are not yet
    quantised; see :mod:`acrnet.codec`.
    """
    cfg = model.config
    x, single = _batched(model, ha, (2, cfg.na, cfg.nt), "encode")
    with inference(model):
        v = model.encoder(x).data
    return v[0] if single else v


def decode(model: AcrNet, v_hat) -> np.ndarray:
    """Reconstruct CSI in (0, 1) from (dequantised) feature vectors."""
    cfg = model.config
    v, single = _batched(model, v_hat, (cfg.feature_dim,), "decode")
    with inference(model):
        out = model.decoder(v).data
    return out[0] if single else out


def reconstruct(model: AcrNet, ha, batch: int = 500, quant_bits: Optional[int] = None) -> np.ndarray:
    """Encode, quantise and decode in inference mode, ``batch`` samples at a time.

    ``quant_bits`` overrides the configured quantiser (``0`` disables it).
    """
    bits = model.config.quant_bits if quant_bits is None else (quant_bits or None)
    ha = np.asarray(ha)
    outs = []
    for start in range(0, len(ha), batch):
        v = encode(model, ha[start:start + batch])
        if bits is not None:
            v = codec.dequantize(codec.quantize(v, bits), bits)
        outs.append(decode(model, v))
    return np.concatenate(outs) if outs else np.zeros_like(ha, dtype=model_dtype(model))
