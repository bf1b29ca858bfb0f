"""Training loop, learning-rate schedule, evaluation and checkpoints."""

from __future__ import annotations

import csv
import io
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Union

import numpy as np

from . import codec
from . import tensor as T
from .csi import Dataset, Normalization, nmse, NmseResult
from .errors import (ConfigurationError, DataError, FormatError, ShapeError, TrainingError,
                     TruncatedError, VersionError)
from .model import AcrNet, ModelConfig, model_dtype, reconstruct
from .tensor import Tensor


@dataclass(frozen=True)
class TrainConfig:
    gamma_max: float = 4e-3
    gamma_min: float = 5e-5
    epochs: int = 2500
    warmup: int = 30
    batch_size: int = 200
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    val_every: int = 1

    def __post_init__(self):
        if not 0 < self.gamma_min < self.gamma_max:
            raise ConfigurationError("need 0 < gamma_min < gamma_max")
        if self.epochs < 1 or not 0 <= self.warmup < self.epochs:
            raise ConfigurationError(f"need 0 <= warmup < epochs, got {self.warmup}, {self.epochs}")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigurationError("Adam betas must lie in [0, 1)")

    def replace(self, **changes) -> "TrainConfig":
        d = asdict(self)
        d.update(changes)
        return TrainConfig(**d)


def lr_at(t: float, cfg: TrainConfig) -> float:
    """Linear warm-up to ``gamma_max`` then cosine annealing to ``gamma_min`` at ``t = T``."""
    if t < 0 or t > cfg.epochs:
        raise ConfigurationError(f"epoch {t} outside [0, {cfg.epochs}]")
    if t < cfg.warmup:
        return cfg.gamma_max * (t + 1) / cfg.warmup
    span = cfg.epochs - cfg.warmup
    return cfg.gamma_min + 0.5 * (cfg.gamma_max - cfg.gamma_min) * (
        1 + math.cos(math.pi * (t - cfg.warmup) / span))


class Adam:
    """Adam with bias correction; parameters with ``requires_grad=False`` or no
    gradient are left untouched (their moments do not advance)."""

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, lr: float):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if not p.requires_grad or p.grad is None:
                continue
            g = p.grad.astype(p.dtype, copy=False)
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            step = (lr / c1) * m / (np.sqrt(v / c2) + self.eps)
            p.data -= step.astype(p.dtype, copy=False)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_mse: float
    val_nmse_db: float = float("nan")


@dataclass
class History:
    records: List[EpochRecord] = field(default_factory=list)

    def append(self, rec: EpochRecord):
        self.records.append(rec)

    def __len__(self):
        return len(self.records)

    def __getitem__(self, i):
        return self.records[i]

    @property
    def train_mse(self) -> List[float]:
        return [r.train_mse for r in self.records]

    @property
    def val_nmse_db(self) -> List[float]:
        return [r.val_nmse_db for r in self.records]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "lr", "train_mse", "val_nmse_db"])
        for r in self.records:
            w.writerow([r.epoch, repr(r.lr), repr(r.train_mse), repr(r.val_nmse_db)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "History":
        rows = csv.DictReader(io.StringIO(text))
        return cls([EpochRecord(int(r["epoch"]), float(r["lr"]), float(r["train_mse"]),
                                float(r["val_nmse_db"])) for r in rows])


@dataclass
class EvalReport:
    nmse: NmseResult
    count: int
    quant_bits: Optional[int] = None
    feedback_bits: Optional[int] = None
    domain: str = "normalised, 0.5 offset removed"

    @property
    def db(self) -> float:
        return self.nmse.db

    @property
    def linear(self) -> float:
        return self.nmse.linear

    def __str__(self):
        s = f"NMSE {self.nmse} over {self.count} samples [{self.domain}]"
        if self.feedback_bits is not None:
            s += f", B={self.quant_bits}, N_fb={self.feedback_bits}"
        return s


def evaluate(model, dataset: Dataset, quant_bits: Optional[int] = None,
             record: Optional[Normalization] = None, batch: int = 500) -> EvalReport:
    """NMSE of ``model`` on ``dataset``.

    ``model`` is an :class:`AcrNet` or any callable mapping an (N, 2, Na, Nt)
    array to its reconstruction. ``quant_bits`` quantises the features
    (defaults to the model's own quantiser; ``0`` disables it). ``record`` is
    the training-set normalisation, which the dataset must share.
    """
    if record is not None and record != dataset.normalization:
        raise DataError(f"dataset normalisation {dataset.normalization} differs from the "
                        f"training record {record}")
    if isinstance(model, AcrNet):
        bits = model.config.quant_bits if quant_bits is None else (quant_bits or None)
        out = reconstruct(model, dataset.samples, batch=batch, quant_bits=bits or 0)
        n_fb = codec.feedback_bits(model.config.na, model.config.nt, model.config.eta, bits) if bits else None
    else:
        if quant_bits:
            raise ConfigurationError("quantised evaluation needs an AcrNet model")
        bits, n_fb = None, None
        out = np.asarray(model(dataset.samples))
    return EvalReport(nmse(dataset.samples, out), dataset.count, bits, n_fb)


class Trainer:
    """Holds the optimiser, shuffling RNG and epoch counter so a run can be
    checkpointed and resumed exactly."""

    def __init__(self, model: AcrNet, config: TrainConfig,
                 normalization: Optional[Normalization] = None):
        self.model = model
        self.config = config
        self.normalization = normalization
        self.optimizer = Adam(model.parameters(), config.beta1, config.beta2, config.adam_eps)
        self.rng = np.random.default_rng(config.seed)
        self.epoch = 0
        self.history = History()

    def train_step(self, x: np.ndarray, lr: float) -> float:
        self.model.train()
        self.optimizer.zero_grad()
        inp = Tensor(x.astype(model_dtype(self.model), copy=False))
        loss = T.mse_loss(self.model(inp), inp.data)
        value = float(loss.data)
        if not np.isfinite(value):
            return value
        T.backward(loss)
        self.optimizer.step(lr)
        return value

    def run_epoch(self, data: Dataset, lr: Optional[float] = None) -> tuple:
        """One shuffled pass; ``lr`` overrides the scheduled rate."""
        t = self.epoch
        lr = lr_at(t, self.config) if lr is None else lr
        order = self.rng.permutation(data.count)
        bs = self.config.batch_size
        total, n = 0.0, 0
        for b, start in enumerate(range(0, data.count, bs)):
            idx = order[start:start + bs]
            value = self.train_step(data.samples[idx], lr)
            if not np.isfinite(value):
                raise TrainingError(f"non-finite loss {value} at epoch {t}, batch {b}, lr {lr:.3g}")
            total += value * len(idx)
            n += len(idx)
        self.epoch += 1
        return lr, total / n

    def fit(self, train: Dataset, val: Optional[Dataset] = None, epochs: Optional[int] = None,
            callback: Optional[Callable[[EpochRecord], None]] = None) -> History:
        """Train up to ``epochs`` more epochs (default: until ``config.epochs``)."""
        if self.normalization is None:
            self.normalization = train.normalization
        if train.normalization != self.normalization:
            raise DataError("training set normalisation differs from the trainer's record")
        stop = self.config.epochs if epochs is None else min(self.config.epochs, self.epoch + epochs)
        while self.epoch < stop:
            lr, mse = self.run_epoch(train)
            rec = EpochRecord(self.epoch - 1, lr, mse)
            if val is not None and (self.epoch % self.config.val_every == 0 or self.epoch == stop):
                rec.val_nmse_db = evaluate(self.model, val, record=self.normalization).db
            self.history.append(rec)
            if callback is not None:
                callback(rec)
        return self.history

    def checkpoint(self, include_optimizer: bool = True) -> "Checkpoint":
        opt = None
        if include_optimizer:
            names = [n for n, _ in self.model.named_parameters()]
            opt = {"t": self.optimizer.t,
                   "m": dict(zip(names, self.optimizer.m)),
                   "v": dict(zip(names, self.optimizer.v))}
        return Checkpoint.from_model(self.model, epoch=self.epoch, rng_state=self.rng.bit_generator.state,
                                     normalization=self.normalization, optimizer=opt,
                                     train_config=asdict(self.config))

    @classmethod
    def resume(cls, model: AcrNet, ckpt: "Checkpoint", config: Optional[TrainConfig] = None) -> "Trainer":
        ckpt.restore(model)
        config = config or TrainConfig(**ckpt.train_config)
        tr = cls(model, config, ckpt.normalization)
        tr.epoch = ckpt.epoch
        if ckpt.rng_state is not None:
            tr.rng.bit_generator.state = ckpt.rng_state
        if ckpt.optimizer is not None:
            names = [n for n, _ in model.named_parameters()]
            tr.optimizer.t = ckpt.optimizer["t"]
            tr.optimizer.m = [ckpt.optimizer["m"][n].copy() for n in names]
            tr.optimizer.v = [ckpt.optimizer["v"][n].copy() for n in names]
        return tr


def train(model: AcrNet, dataset: Dataset, config: TrainConfig, val: Optional[Dataset] = None,
          callback=None) -> History:
    """Train ``model`` in place; returns the per-epoch history."""
    return Trainer(model, config, dataset.normalization).fit(dataset, val, callback=callback)


# ---------------------------------------------------------------- checkpoints
#
#   b"ACKP" | version u16 | meta_len u32 | meta JSON (utf-8) | n_records u32
#   record: name_len u16 | name | dtype u8 | ndim u8 | dims u32 * ndim | data (little-endian)
#
# Optimiser moments use the record names "adam.m.<param>" / "adam.v.<param>".

CKPT_MAGIC = b"ACKP"
CKPT_VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_DTYPE_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


@dataclass
class Checkpoint:
    config: ModelConfig
    state: Dict[str, np.ndarray]
    frozen: List[str] = field(default_factory=list)
    epoch: int = 0
    rng_state: Optional[dict] = None
    normalization: Optional[Normalization] = None
    optimizer: Optional[dict] = None
    train_config: Optional[dict] = None

    @classmethod
    def from_model(cls, model: AcrNet, **kw) -> "Checkpoint":
        state = {k: np.array(v, copy=True) for k, v in model.state_dict().items()}
        frozen = [n for n, p in model.named_parameters() if not p.requires_grad]
        return cls(model.config, state, frozen, **kw)

    def restore(self, model: AcrNet):
        if model.config != self.config:
            raise ConfigurationError(
                f"checkpoint is for {self.config.label()}, model is {model.config.label()}")
        model.load_state_dict(self.state)
        frozen = set(self.frozen)
        for n, p in model.named_parameters():
            p.requires_grad = n not in frozen

    def build_model(self) -> AcrNet:
        model = AcrNet(self.config)
        self.restore(model)
        return model


def _write_record(out: list, name: str, arr: np.ndarray):
    arr = np.asarray(arr)
    code = _DTYPE_CODES.get(arr.dtype)
    if code is None:
        raise ShapeError(f"{name}: unsupported dtype {arr.dtype}")
    raw = name.encode()
    out.append(struct.pack("<H", len(raw)) + raw)
    out.append(struct.pack("<BB", code, arr.ndim))
    out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
    out.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())


def checkpoint_save(ckpt: Checkpoint, path: Union[str, Path]) -> int:
    meta = {
        "config": ckpt.config.to_dict(),
        "frozen": ckpt.frozen,
        "epoch": ckpt.epoch,
        "rng_state": ckpt.rng_state,
        "normalization": None if ckpt.normalization is None else asdict(ckpt.normalization),
        "train_config": ckpt.train_config,
        "optimizer_t": None if ckpt.optimizer is None else ckpt.optimizer["t"],
    }
    records = list(ckpt.state.items())
    if ckpt.optimizer is not None:
        records += [(f"adam.m.{k}", v) for k, v in ckpt.optimizer["m"].items()]
        records += [(f"adam.v.{k}", v) for k, v in ckpt.optimizer["v"].items()]
    meta_raw = json.dumps(meta, sort_keys=True).encode()
    parts = [CKPT_MAGIC, struct.pack("<HI", CKPT_VERSION, len(meta_raw)), meta_raw,
             struct.pack("<I", len(records))]
    for name, arr in records:
        _write_record(parts, name, arr)
    blob = b"".join(parts)
    Path(path).write_bytes(blob)
    return len(blob)


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw, self.pos, self.path = raw, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise TruncatedError(f"{self.path}: checkpoint ends early")
        chunk = self.raw[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))


def checkpoint_load(path: Union[str, Path]) -> Checkpoint:
    r = _Reader(Path(path).read_bytes(), path)
    if r.take(4) != CKPT_MAGIC:
        raise FormatError(f"{path}: not an ACKP checkpoint")
    version, meta_len = r.unpack("<HI")
    if version != CKPT_VERSION:
        raise VersionError(f"{path}: unsupported checkpoint version {version}")
    try:
        meta = json.loads(r.take(meta_len).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable checkpoint metadata ({exc})") from None
    (n,) = r.unpack("<I")
    state, m, v = {}, {}, {}
    for _ in range(n):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode()
        code, ndim = r.unpack("<BB")
        if code not in _DTYPES:
            raise FormatError(f"{path}: record {name} has unknown dtype code {code}")
        shape = r.unpack(f"<{ndim}I")
        dt = _DTYPES[code]
        count = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(r.take(count * dt.itemsize), dtype=dt).reshape(shape)
        arr = arr.astype(dt.newbyteorder("="))
        if name.startswith("adam.m."):
            m[name[7:]] = arr
        elif name.startswith("adam.v."):
            v[name[7:]] = arr
        else:
            state[name] = arr
    if r.pos != len(r.raw):
        raise ShapeError(f"{path}: {len(r.raw) - r.pos} bytes after the last record")
    try:
        config = ModelConfig.from_dict(meta["config"])
    except (KeyError, TypeError) as exc:
        raise FormatError(f"{path}: bad model config in metadata ({exc})") from None
    norm = meta.get("normalization")
    optimizer = None
    if meta.get("optimizer_t") is not None:
        optimizer = {"t": meta["optimizer_t"], "m": m, "v": v}
    return Checkpoint(config, state, meta.get("frozen", []), meta.get("epoch", 0),
                      meta.get("rng_state"), None if norm is None else Normalization(**norm),
                      optimizer, meta.get("train_config"))


def save_model(model: AcrNet, path, **kw) -> int:
    return checkpoint_save(Checkpoint.from_model(model, **kw), path)


def load_model(path, expect: Optional[ModelConfig] = None) -> AcrNet:
    ckpt = checkpoint_load(path)
    if expect is not None and expect != ckpt.config:
        raise ConfigurationError(f"checkpoint is for {ckpt.config.label()}, expected {expect.label()}")
    return ckpt.build_model()
