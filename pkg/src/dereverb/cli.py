"""Command-line entry point: ``dereverb <command> [options]``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .config import RunConfig, parse_overrides, read_kv, resolve_train
from .errors import ContractError, DereverbError, InputError

logger = logging.getLogger("dereverb")

EXIT_OK = 0
EXIT_CONTRACT = 1
EXIT_IO = 2
EXIT_USAGE = 64


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise UsageError(message)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0, help="global random seed (default 0)")
    p.add_argument("--threads", type=int, default=1, help="cap on worker and BLAS threads (default 1)")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")


def _floats(text: str) -> list[float]:
    return [float(t) for t in text.split(",") if t.strip()]


def _ints(text: str) -> list[int]:
    return [int(t) for t in text.split(",") if t.strip()]


# ------------------------------------------------------------ commands


def cmd_synth_data(args) -> int:
    from .roomsim import DEFAULT_T60S, build_dataset, generate_clean_corpus

    out_dir = Path(args.out_dir)
    clean_dir = Path(args.clean_dir) if args.clean_dir else None
    if clean_dir is None:
        if not args.generate:
            raise ContractError("synth-data needs --clean-dir or --generate N")
        clean_dir = out_dir / "clean"
        generate_clean_corpus(clean_dir, args.generate, seed=args.seed, duration=(args.min_dur, args.max_dur))
    elif not clean_dir.is_dir():
        raise InputError(f"clean directory not found: {clean_dir}")
    t60s = tuple(_floats(args.t60)) if args.t60 else DEFAULT_T60S
    RunConfig("synth-data", {
        "clean_dir": clean_dir, "out_dir": out_dir, "t60": ",".join(map(str, t60s)),
        "rirs_per_t60": args.rirs_per_t60, "valid_frac": args.valid_frac, "test_frac": args.test_frac,
    }, args.seed).log()
    man = build_dataset(
        clean_dir, out_dir, seed=args.seed, t60_list=t60s, valid_frac=args.valid_frac,
        test_frac=args.test_frac, rirs_per_t60=args.rirs_per_t60, threads=args.threads,
    )
    counts = {s: len(man.split(s)) for s in ("train", "valid", "test")}
    print(f"wrote {out_dir / 'manifest.jsonl'}: {counts}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .roomsim import DatasetManifest
    from .train import train_loop

    layers = [read_kv(args.config)] if args.config else []
    flags = {
        "size": args.size,
        "model.preseq": args.preseq,
        "model.encoder": args.encoder,
        "train.total_steps": args.steps,
        "train.batch_size": args.batch_size,
        "train.peak_lr": args.peak_lr,
        "train.mask_half_width": args.mask_half_width,
    }
    layers.append({k: str(v) for k, v in flags.items() if v is not None})
    layers.append(parse_overrides(args.set))
    model_cfg, train_cfg, run = resolve_train(layers, args.seed)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    run.settings["manifest"] = args.manifest
    run.log()
    (out_dir / "config.txt").write_text(run.dumps())
    manifest = DatasetManifest.read(args.manifest)
    res = train_loop(manifest, model_cfg, train_cfg, out_dir=out_dir, resume=args.resume, stop_after=args.stop_after)
    last = res.curve[-1] if res.curve else None
    if last is not None:
        print(f"step {last['step']} train loss {last['train_loss']:.5f}; checkpoints in {out_dir}")
    return EXIT_OK


def cmd_enhance(args) -> int:
    from .dsp import read_wav, write_wav
    from .evaluate import enhance

    RunConfig("enhance", {"in": args.inp, "out": args.out, "checkpoint": args.checkpoint, "gl_iters": args.gl_iters}, args.seed).log()
    out = enhance(read_wav(args.inp), args.checkpoint, gl_iters=args.gl_iters)
    write_wav(args.out, out, args.format)
    return EXIT_OK


def cmd_wpe(args) -> int:
    from .dsp import read_wav, write_wav
    from .evaluate import wpe_enhance
    from .wpe import WpeConfig

    cfg = WpeConfig(args.taps, args.delay, args.iters)
    RunConfig("wpe", {"in": args.inp, "out": args.out, "taps": cfg.taps, "delay": cfg.delay, "iters": cfg.iterations}, args.seed).log()
    write_wav(args.out, wpe_enhance(read_wav(args.inp), cfg), args.format)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .roomsim import DatasetManifest
    from .evaluate import evaluate_suite

    RunConfig("evaluate", {"manifest": args.manifest, "systems": " ".join(args.systems), "split": args.split,
                           "out": args.out, "pesq_cmd": args.pesq_cmd}, args.seed).log()
    report = evaluate_suite(DatasetManifest.read(args.manifest), args.systems, args.out, args.pesq_cmd, split=args.split)
    print(report.table())
    return EXIT_OK


def cmd_inspect_attention(args) -> int:
    from .checkpoint import Checkpoint
    from .dsp import read_wav
    from .evaluate import Enhancer, attention_export

    enh = Enhancer.from_checkpoint(Checkpoint(args.checkpoint))
    dump = attention_export(enh.model, enh.features(read_wav(args.wav)))
    dump.save(args.out)
    for layer in range(dump.maps.shape[0]):
        for head in range(dump.maps.shape[1]):
            print(
                f"layer {layer} head {head}: diagonality {dump.diagonality[layer, head]:.3f} "
                f"verticality {dump.verticality[layer, head]:.3f} globality {dump.globality[layer, head]:.3f}"
            )
    return EXIT_OK


def cmd_count_params(args) -> int:
    from .model import ENCODER_KINDS, PRESEQ_VARIANTS, ModelConfig, count_params

    combos = (
        [(p, e) for e in ENCODER_KINDS for p in PRESEQ_VARIANTS]
        if args.all
        else [(args.preseq, args.encoder)]
    )
    for pre, enc in combos:
        cfg = ModelConfig.full(pre, enc) if args.size == "full" else ModelConfig.reduced(pre, enc)
        c = count_params(cfg)
        print(
            f"{cfg.label:12s} preseq {c['preseq']:>10,}  encoder {c['encoder']:>11,}  "
            f"decoder {c['decoder']:>8,}  total {c['total']:>11,}"
        )
    return EXIT_OK


def cmd_probe_mask(args) -> int:
    from .checkpoint import Checkpoint
    from .evaluate import masked_recovery_probe
    from .model import Model
    from .roomsim import DatasetManifest
    from .train import load_features
    from .dsp import FrontEnd, normalize
    from .model import stack_frames

    ck = Checkpoint(args.checkpoint)
    trained = ck.model()
    untrained = Model.create(trained.config, seed=args.seed)
    stats_in, stats_out = ck.stats("in"), ck.stats("out")
    if stats_in is None or stats_out is None:
        raise ContractError(f"{ck.path} lacks normalisation statistics")
    pairs = load_features(DatasetManifest.read(args.manifest), args.split, FrontEnd())
    if not pairs:
        raise InputError(f"manifest has no {args.split!r} entries")
    d_rate = trained.config.d_rate
    utts = []
    for x, y, _ in pairs:
        sx = stack_frames(normalize(x, stats_in), d_rate)
        sy = stack_frames(normalize(y, stats_out), d_rate)
        utts.append((sx.frames, sy.frames, sx.orig_len))
    centers = _ints(args.centers) if args.centers else [n // 2 for _, _, n in utts[:1]]
    res = masked_recovery_probe(trained, untrained, utts, centers, args.half_width)
    for k, v in res.items():
        print(f"{k} {v:.6f}")
    return EXIT_OK


def cmd_selftest(args) -> int:
    from .selftest import run_selftest

    results = run_selftest(args.seed)
    for r in results:
        print(r.line())
    failed = sum(not r.ok for r in results)
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return EXIT_OK if failed == 0 else EXIT_CONTRACT


# -------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dereverb", description="Mel-domain speech dereverberation toolkit.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("synth-data", help="simulate RIRs and build a reverberant corpus")
    p.add_argument("--clean-dir", help="clean WAVs (flat, or train/valid/test subdirectories)")
    p.add_argument("--generate", type=int, default=0, help="synthesise N clean utterances into OUT/clean")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--t60", help="comma-separated T60 targets in seconds (default 0.3,0.6,0.9)")
    p.add_argument("--rirs-per-t60", type=int, default=11)
    p.add_argument("--valid-frac", type=float, default=0.1)
    p.add_argument("--test-frac", type=float, default=0.1)
    p.add_argument("--min-dur", type=float, default=1.0)
    p.add_argument("--max-dur", type=float, default=2.0)
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("train", help="train a dereverberation model")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--config", help="key = value settings file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one setting (repeatable)")
    p.add_argument("--size", choices=("reduced", "full"))
    p.add_argument("--preseq", choices=("def", "cnn2d", "cnn1d", "lstm", "cl"))
    p.add_argument("--encoder", choices=("bert", "blstm"))
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--peak-lr", type=float)
    p.add_argument("--mask-half-width", type=int)
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--stop-after", type=int, help="stop after this many steps of this invocation")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("enhance", help="dereverberate one WAV with a trained checkpoint")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--gl-iters", type=int, default=32)
    p.add_argument("--format", choices=("float32", "pcm16"), default="float32")
    p.set_defaults(func=cmd_enhance)

    p = sub.add_parser("wpe", help="dereverberate one WAV with WPE")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--taps", type=int, default=10)
    p.add_argument("--delay", type=int, default=3)
    p.add_argument("--iters", type=int, default=3)
    p.add_argument("--format", choices=("float32", "pcm16"), default="float32")
    p.set_defaults(func=cmd_wpe)

    p = sub.add_parser("evaluate", help="score systems on a manifest split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--systems", nargs="*", default=["WPE"], help="WPE and/or checkpoint paths (NOISY is always included)")
    p.add_argument("--out", help="CSV report path")
    p.add_argument("--split", default="test")
    p.add_argument("--pesq-cmd", help="external scorer, e.g. 'pesq +16000 {ref} {deg}'")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("inspect-attention", help="dump attention maps and pattern scores")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--wav", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_inspect_attention)

    p = sub.add_parser("count-params", help="print exact parameter counts")
    p.add_argument("--preseq", choices=("def", "cnn2d", "cnn1d", "lstm", "cl"), default="def")
    p.add_argument("--encoder", choices=("bert", "blstm"), default="bert")
    p.add_argument("--size", choices=("full", "reduced"), default="full")
    p.add_argument("--all", action="store_true", help="every pre-sequence/encoder combination")
    p.set_defaults(func=cmd_count_params)

    p = sub.add_parser("probe-mask", help="masked-frame recovery: trained vs untrained")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="train")
    p.add_argument("--centers", help="comma-separated raw-frame centres (default: middle of the first utterance)")
    p.add_argument("--half-width", type=int, default=4)
    p.set_defaults(func=cmd_probe_mask)

    p = sub.add_parser("selftest", help="run gradient, round-trip and parameter-count checks")
    p.set_defaults(func=cmd_selftest)

    for action in sub.choices.values():
        _common(action)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    if not argv:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        args = parser.parse_args(argv)
    except UsageError:
        return EXIT_USAGE
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    np.random.seed(args.seed)
    try:
        with threadpool_limits(limits=max(1, args.threads)):
            return args.func(args)
    except ContractError as exc:
        logger.error("%s", exc)
        return EXIT_CONTRACT
    except (InputError, OSError) as exc:
        logger.error("%s", exc)
        return EXIT_IO
    except DereverbError as exc:
        logger.error("%s", exc)
        return EXIT_CONTRACT


if __name__ == "__main__":
    sys.exit(main())
