"""``acrnet`` command-line entry point.

Every command starts by echoing its effective configuration on lines
beginning with ``#``. Failures print a single ``error: <category>: <message>``
line to stderr and exit with status 2.
"""

from __future__ import annotations

import argparse
import sys
from fractions import Fraction
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import codec, csi, planner
from .complexity import count_config
from .errors import AcrnetError, ConfigurationError, DataError
from .model import ModelConfig, build, decode, encode, format_eta, parse_eta, reconstruct
from .trainer import (Checkpoint, TrainConfig, Trainer, checkpoint_load, checkpoint_save, evaluate)

EXIT_ERROR = 2


class UsageError(AcrnetError):
    category = "usage"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _banner(out, command: str, **items):
    out.write(f"# acrnet {command}\n")
    for key, value in items.items():
        if isinstance(value, Fraction):
            value = format_eta(value)
        out.write(f"# {key}={value}\n")


def _eta_arg(text: str) -> Fraction:
    return parse_eta(text)


def _add_model_flags(p, with_bits: bool = True):
    p.add_argument("--k", type=int, default=1, help="decoder expansion factor")
    p.add_argument("--eta", type=_eta_arg, default=Fraction(1, 4),
                   help="compression ratio as a fraction (1/4) or feature length (512)")
    if with_bits:
        p.add_argument("--bits", type=int, default=None, help="feature quantiser bits B")
    p.add_argument("--binarize-enc", action="store_true", help="binarise the encoder FC")
    p.add_argument("--binarize-dec", action="store_true", help="binarise the decoder FC")
    p.add_argument("--activation", default="prelu", choices=["prelu", "sprelu", "lrelu"])


def _model_config(args) -> ModelConfig:
    return ModelConfig(expansion=args.k, eta=args.eta, quant_bits=getattr(args, "bits", None),
                       binarize_encoder_fc=args.binarize_enc, binarize_decoder_fc=args.binarize_dec,
                       activation=args.activation)


def _config_items(cfg: ModelConfig) -> dict:
    return {"k": cfg.expansion, "eta": cfg.eta, "feature_dim": cfg.feature_dim,
            "bits": cfg.quant_bits if cfg.quant_bits is not None else "none",
            "binarize_enc": int(cfg.binarize_encoder_fc), "binarize_dec": int(cfg.binarize_decoder_fc),
            "activation": cfg.activation}


# ---------------------------------------------------------------- commands

def cmd_gen_data(args, out):
    record = None
    if args.record_from:
        record = csi.dataset_load(args.record_from).normalization
    env = None
    if args.clusters:
        env = csi.Environment.draw(args.env_seed, args.clusters, args.max_delay)
    _banner(out, "gen-data", count=args.count, seed=args.seed,
            paths=args.paths if args.paths is not None else "3..12", nc=args.nc, na=args.na, nt=args.nt,
            clusters=args.clusters or "none", env_seed=args.env_seed, max_delay=args.max_delay,
            record_from=args.record_from or "fit", output=args.output)
    ds = csi.generate_synthetic(args.count, args.paths, args.seed, args.nc, args.nt, args.na, record,
                                environment=env)
    csi.dataset_save(ds, args.output)
    out.write(f"wrote {ds.count} samples to {args.output}\n")
    out.write(f"normalization scale={ds.normalization.scale!r} offset={ds.normalization.offset!r}\n")
    out.write(f"clamp_rate={ds.clamp_rate:.6g}\n")


def cmd_train(args, out):
    data = csi.dataset_load(args.input)
    val = csi.dataset_load(args.val) if args.val else None
    tcfg = TrainConfig(gamma_max=args.lr_max, gamma_min=args.lr_min, epochs=args.epochs,
                       warmup=args.warmup, batch_size=args.batch, seed=args.seed)
    if args.resume:
        ckpt = checkpoint_load(args.resume)
        model = build(ckpt.config, args.seed)
        trainer = Trainer.resume(model, ckpt, tcfg)
        cfg = ckpt.config
    else:
        cfg = _model_config(args)
        model = build(cfg, args.seed)
        if args.activation == "prelu" and args.freeze_slopes is not None:
            model.freeze_slopes(args.freeze_slopes)
        trainer = Trainer(model, tcfg, data.normalization)
    _banner(out, "train", **_config_items(cfg), epochs=tcfg.epochs, warmup=tcfg.warmup,
            batch=tcfg.batch_size, lr_max=tcfg.gamma_max, lr_min=tcfg.gamma_min, seed=args.seed,
            input=args.input, val=args.val or "none", checkpoint=args.checkpoint,
            resume=args.resume or "none")
    out.write("epoch,lr,train_mse,val_nmse_db\n")

    def report(rec):
        out.write(f"{rec.epoch},{rec.lr:.6g},{rec.train_mse:.6g},{rec.val_nmse_db:.4f}\n")
        out.flush()

    history = trainer.fit(data, val, callback=report)
    size = checkpoint_save(trainer.checkpoint(), args.checkpoint)
    if args.history:
        Path(args.history).write_text(history.to_csv())
    out.write(f"saved checkpoint {args.checkpoint} ({size} bytes)\n")


def cmd_eval(args, out):
    ckpt = checkpoint_load(args.checkpoint)
    model = ckpt.build_model()
    data = csi.dataset_load(args.input)
    _banner(out, "eval", **_config_items(ckpt.config), checkpoint=args.checkpoint, input=args.input,
            eval_bits=args.bits if args.bits is not None else "model")
    rep = evaluate(model, data, quant_bits=args.bits, record=ckpt.normalization)
    out.write(f"{rep}\n")
    out.write(f"nmse_db={rep.db:.4f}\nnmse_linear={rep.linear:.6g}\n")


def cmd_count(args, out):
    cfg = _model_config(args)
    _banner(out, "count", **_config_items(cfg))
    report = count_config(cfg)
    out.write((report.table() if args.table else report.summary()) + "\n")
    if not args.table:
        out.write(report.key_values() + "\n")


def _grid(text: str, conv):
    return [conv(t) for t in text.split(",") if t.strip()]


def cmd_plan(args, out):
    budget = planner.ResourceBudget(args.ue_params, args.bs_params, args.ue_flops, args.bs_flops,
                                    args.max_bits)
    etas = _grid(args.etas, parse_eta)
    bits = _grid(args.bit_grid, int)
    _banner(out, "plan", ue_params=args.ue_params, bs_params=args.bs_params, ue_flops=args.ue_flops,
            bs_flops=args.bs_flops, max_bits=args.max_bits, etas=",".join(map(format_eta, etas)),
            bit_grid=",".join(map(str, bits)), k_max=args.k_max)
    result = planner.plan(budget, etas, bits, k_max=args.k_max)
    out.write(f"{result}\n")
    out.write(result.report.table() + "\n")


def _model_for_codec(args):
    ckpt = checkpoint_load(args.checkpoint)
    model = ckpt.build_model()
    bits = args.bits if args.bits is not None else model.config.quant_bits
    if bits is None:
        raise ConfigurationError("model has no quantiser; pass --bits")
    return ckpt, model, bits


def cmd_encode(args, out):
    ckpt, model, bits = _model_for_codec(args)
    data = csi.dataset_load(args.input)
    _banner(out, "encode", **_config_items(model.config), payload_bits=bits, checkpoint=args.checkpoint,
            input=args.input, output=args.output)
    if ckpt.normalization is not None and ckpt.normalization != data.normalization:
        raise DataError("input normalisation differs from the checkpoint's training record")
    payloads = []
    for start in range(0, data.count, 500):
        v = encode(model, data.samples[start:start + 500])
        payloads += [codec.pack(row, bits) for row in codec.quantize(v, bits)]
    with open(args.output, "wb") as f:
        codec.write_payloads(f, payloads)
    n_fb = payloads[0].n_bits if payloads else 0
    out.write(f"wrote {len(payloads)} payloads of {n_fb} bits to {args.output}\n")


def cmd_decode(args, out):
    ckpt = checkpoint_load(args.checkpoint)
    model = ckpt.build_model()
    _banner(out, "decode", **_config_items(model.config), checkpoint=args.checkpoint, input=args.input,
            output=args.output)
    payloads = list(codec.read_payloads(Path(args.input).read_bytes()))
    cfg = model.config
    feats = []
    for p in payloads:
        if p.feature_dim != cfg.feature_dim:
            raise DataError(f"payload has {p.feature_dim} features, model expects {cfg.feature_dim}")
        feats.append(codec.dequantize(codec.unpack(p), p.bits))
    feats = np.stack(feats) if feats else np.zeros((0, cfg.feature_dim), np.float32)
    outs = [decode(model, feats[i:i + 500]) for i in range(0, len(feats), 500)]
    samples = np.concatenate(outs) if outs else np.zeros((0, 2, cfg.na, cfg.nt), np.float32)
    record = ckpt.normalization or csi.Normalization(1.0, 0.0)
    csi.dataset_save(csi.Dataset(samples, record, csi.Scenario.IMPORTED), args.output)
    out.write(f"decoded {len(payloads)} payloads to {args.output}\n")


def cmd_roundtrip(args, out):
    data = csi.dataset_load(args.input)
    if args.checkpoint:
        ckpt = checkpoint_load(args.checkpoint)
        model = ckpt.build_model()
        bits = args.bits if args.bits is not None else model.config.quant_bits
        if bits is None:
            raise ConfigurationError("model has no quantiser; pass --bits")
        source = args.checkpoint
    else:
        cfg = _model_config(args)
        bits = cfg.quant_bits if cfg.quant_bits is not None else 4
        model = build(cfg.replace(quant_bits=bits), args.seed)
        source = f"untrained (seed {args.seed})"
    cfg = model.config
    _banner(out, "roundtrip", **_config_items(cfg), payload_bits=bits, model=source, seed=args.seed,
            input=args.input, samples=min(args.count, data.count) if args.count else data.count)
    samples = data.samples[:args.count] if args.count else data.samples
    v = encode(model, samples)
    codes = codec.quantize(v, bits)
    wire = b"".join(codec.pack(row, bits).to_bytes() for row in codes)
    back = np.stack([codec.unpack(p) for p in codec.read_payloads(wire)])
    if not np.array_equal(back, codes):
        raise DataError("payload round trip changed codewords")
    recon = decode(model, codec.dequantize(back, bits))
    direct = reconstruct(model, samples, quant_bits=bits)
    n_fb = codec.feedback_bits(cfg.na, cfg.nt, cfg.eta, bits)
    out.write(f"feedback_bits={n_fb}\n")
    out.write(f"payload_bytes={len(wire) // len(codes)}\n")
    out.write(f"bit_exact={int(np.array_equal(recon, direct))}\n")
    out.write(f"nmse_db={csi.nmse(samples, recon).db:.4f}\n")


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="acrnet", description="ACRNet CSI feedback toolkit")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate a synthetic .csid dataset")
    g.add_argument("--count", type=int, default=1000)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--paths", type=int, default=None, help="fixed path count (default: uniform 3..12)")
    g.add_argument("--nc", type=int, default=1024)
    g.add_argument("--na", type=int, default=32)
    g.add_argument("--nt", type=int, default=32)
    g.add_argument("--clusters", type=int, default=0,
                   help="draw paths from this many fixed scatterer clusters (0 = independent paths)")
    g.add_argument("--env-seed", type=int, default=0, help="seed of the cluster layout")
    g.add_argument("--max-delay", type=int, default=16, help="delay taps spanned by the clusters")
    g.add_argument("--record-from", default=None, help="reuse the normalisation of this dataset")
    g.add_argument("--output", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model and write a checkpoint")
    _add_model_flags(t)
    t.add_argument("--input", required=True)
    t.add_argument("--val", default=None)
    t.add_argument("--epochs", type=int, default=2500)
    t.add_argument("--warmup", type=int, default=30)
    t.add_argument("--batch", type=int, default=200)
    t.add_argument("--lr-max", type=float, default=4e-3)
    t.add_argument("--lr-min", type=float, default=5e-5)
    t.add_argument("--freeze-slopes", type=float, default=None, help="freeze PReLU slopes at this value")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--checkpoint", required=True)
    t.add_argument("--history", default=None, help="write per-epoch CSV here")
    t.add_argument("--resume", default=None, help="continue from this checkpoint")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="NMSE of a checkpoint on a dataset")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--input", required=True)
    e.add_argument("--bits", type=int, default=None, help="override quantiser bits (0 = off)")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("count", help="FLOPs and parameter count")
    _add_model_flags(c)
    c.add_argument("--table", action="store_true", help="per-layer breakdown")
    c.set_defaults(func=cmd_count)

    pl = sub.add_parser("plan", help="choose a deployment under resource limits")
    pl.add_argument("--ue-params", type=float, default=float("inf"))
    pl.add_argument("--bs-params", type=float, default=float("inf"))
    pl.add_argument("--ue-flops", type=float, default=float("inf"))
    pl.add_argument("--bs-flops", type=float, default=float("inf"))
    pl.add_argument("--max-bits", type=float, default=float("inf"))
    pl.add_argument("--etas", default="1/4,1/8", help="candidate etas, comma separated")
    pl.add_argument("--bit-grid", default="2,3,4,6,8", help="candidate B values, comma separated")
    pl.add_argument("--k-max", type=int, default=planner.K_MAX)
    pl.set_defaults(func=cmd_plan)

    for name, func, helptext in (("encode", cmd_encode, "CSI dataset -> packed payloads"),
                                 ("decode", cmd_decode, "packed payloads -> reconstructed dataset")):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("--checkpoint", required=True)
        s.add_argument("--input", required=True)
        s.add_argument("--output", required=True)
        if name == "encode":
            s.add_argument("--bits", type=int, default=None)
        s.set_defaults(func=func)

    r = sub.add_parser("roundtrip", help="encode, pack, unpack and decode samples")
    _add_model_flags(r)
    r.add_argument("--input", required=True)
    r.add_argument("--checkpoint", default=None)
    r.add_argument("--count", type=int, default=0, help="use only the first N samples")
    r.add_argument("--seed", type=int, default=0)
    r.set_defaults(func=cmd_roundtrip)
    return p


def run(argv: Optional[List[str]] = None, out=None, err=None) -> int:
    out = sys.stdout if out is None else out
    err = sys.stderr if err is None else err
    try:
        args = build_parser().parse_args(argv)
        args.func(args, out)
    except AcrnetError as exc:
        err.write(f"error: {exc.category}: {exc}\n")
        return EXIT_ERROR
    except FileNotFoundError as exc:
        err.write(f"error: io: no such file: {exc.filename}\n")
        return EXIT_ERROR
    except OSError as exc:
        err.write(f"error: io: {exc}\n")
        return EXIT_ERROR
    return 0


def main() -> None:
    sys.exit(run())
