"""``deep-mfmvdr`` command line: synth, enhance, gradcheck, train-toy, bench.

Exit codes: 0 success, 1 usage, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import torch

from . import filters
from .audio import MixtureSpec, Waveform, make_mixture, mix_at_snr, read_wav, synth_noise, write_wav
from .errors import DegeneratePowerError, ModelFormatError, NonFiniteLossError, \
    ShapeMismatchError, SingularSystemError, WavFormatError
from .metrics import benchmark_rtf, evaluate
from .pipeline import HEAD_KEYS, PipelineConfig, enhance_waveform, head_archs, init_heads, load_config
from .tcn import load_model, save_model
from .training import TrainConfig, Utterance, gradient_check, train_toy

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _add_pipeline_flags(p):
    p.add_argument("--config", help="JSON or key=value file; flags override it")
    p.add_argument("--method", choices=["mfmvdr", "wiener", "masking", "direct", "passthrough"])
    p.add_argument("--estimator", choices=["oracle", "model-based", "neural"])
    p.add_argument("--n-taps", type=int)
    p.add_argument("--delta", type=float)
    p.add_argument("--min-gain-db", type=float)
    p.add_argument("--model-y")
    p.add_argument("--model-n")
    p.add_argument("--model-xi")
    p.add_argument("--model-filter", help="weights of the masking or direct-filter head")
    p.add_argument("--threads", type=int, default=1)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="deep-mfmvdr", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="write noisy/speech/noise WAV triples")
    p.add_argument("--out", required=True, help="existing output directory")
    p.add_argument("--snr", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--duration", type=float, default=1.0)
    p.add_argument("--noise", default="white", help="white, tonal, mixed, or a WAV path")
    p.add_argument("--speech", help="speech WAV instead of the generator")
    p.add_argument("--count", type=int, default=1,
                   help="number of triples; above 1 they go to utt000, utt001, ... subdirectories")
    p.add_argument("--encoding", choices=["float32", "pcm16"], default="float32")

    p = sub.add_parser("enhance", help="enhance a noisy WAV")
    p.add_argument("noisy")
    p.add_argument("--out", required=True)
    p.add_argument("--speech", help="clean speech track (oracle mode, evaluation)")
    p.add_argument("--noise", help="noise track (oracle mode)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--json", action="store_true", help="print the report as JSON")
    _add_pipeline_flags(p)

    p = sub.add_parser("gradcheck", help="finite-difference check of the training gradients")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--samples", type=int, help="total number of probes (default 20 per head)")
    p.add_argument("--snr", type=float, default=0.0)
    p.add_argument("--hidden", type=int, default=32)
    p.add_argument("--bottleneck", type=int, default=16)
    p.add_argument("--n-taps", type=int, default=5)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--inject-adjoint-bug", action="store_true", help=argparse.SUPPRESS)

    p = sub.add_parser("train-toy", help="train the three estimator heads on a small corpus")
    p.add_argument("dataset", help="directory of utterance subdirectories with noisy.wav and speech.wav")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--lr", type=float, default=3e-4)
    p.add_argument("--batch-size", type=int, default=2)
    p.add_argument("--hidden", type=int, default=32)
    p.add_argument("--bottleneck", type=int, default=16)
    p.add_argument("--n-taps", type=int, default=5)
    p.add_argument("--threads", type=int, default=1)

    p = sub.add_parser("bench", help="real-time factor per method")
    p.add_argument("--input", help="noisy WAV; default is a synthetic mixture")
    p.add_argument("--duration", type=float, default=1.0)
    p.add_argument("--snr", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--hidden", type=int, default=128)
    p.add_argument("--bottleneck", type=int, default=64)
    _add_pipeline_flags(p)
    return parser


def _pipeline_config(args) -> PipelineConfig:
    cfg = load_config(args.config) if args.config else PipelineConfig()
    return cfg.with_overrides(method=args.method, estimator=args.estimator, n_taps=args.n_taps,
                              delta=args.delta, min_gain_db=args.min_gain_db,
                              model_y=args.model_y, model_n=args.model_n,
                              model_xi=args.model_xi, model_filter=args.model_filter)


def _load_heads(cfg: PipelineConfig) -> dict:
    """Weight files for the heads of ``cfg.method``, checked against ``N``."""
    paths = {"y": cfg.model_y, "n": cfg.model_n, "xi": cfg.model_xi,
             "mask": cfg.model_filter, "filter": cfg.model_filter}
    keys = HEAD_KEYS.get(cfg.method, ())
    missing = [k for k in keys if not paths[k]]
    if missing:
        flags = ", ".join("--model-" + ("filter" if k in ("mask", "filter") else k) for k in missing)
        raise UsageError(f"neural {cfg.method} needs model files: {flags}")
    expected = head_archs(cfg.method, cfg.n_taps)
    models = {}
    for k in keys:
        model = load_model(paths[k])
        if (model.arch.input_dim, model.arch.output_dim) != (expected[k].input_dim, expected[k].output_dim):
            raise ShapeMismatchError(
                f"{paths[k]}: head {k!r} has {model.arch.input_dim}->{model.arch.output_dim} "
                f"features, N={cfg.n_taps} needs {expected[k].input_dim}->{expected[k].output_dim}")
        models[k] = model
    return models


def cmd_synth(args, out=None) -> int:
    out = out or sys.stdout
    root = Path(args.out)
    if not root.is_dir():
        raise FileNotFoundError(f"output directory {root} does not exist")
    if args.count < 1:
        raise UsageError("--count must be >= 1")
    for i in range(args.count):
        seed = args.seed + i
        target = root if args.count == 1 else root / f"utt{i:03d}"
        target.mkdir(exist_ok=True)
        if args.speech or Path(args.noise).suffix.lower() == ".wav":
            speech = read_wav(args.speech) if args.speech else make_mixture(
                MixtureSpec(args.snr, seed, args.duration))[1]
            noise = read_wav(args.noise) if Path(args.noise).suffix.lower() == ".wav" else \
                synth_noise(args.noise, len(speech) / speech.sample_rate, seed + 7919, speech.sample_rate)
            if len(noise) < len(speech):
                raise ValueError(f"noise ({len(noise)} samples) shorter than speech ({len(speech)})")
            noise = Waveform(noise.samples[:len(speech)], noise.sample_rate)
            noisy, noise = mix_at_snr(speech, noise, args.snr)
        else:
            noisy, speech, noise = make_mixture(MixtureSpec(args.snr, seed, args.duration, args.noise))
        for name, w in (("noisy", noisy), ("speech", speech), ("noise", noise)):
            write_wav(target / f"{name}.wav", w, args.encoding)
        print(f"wrote {target} seed={seed} snr_db={args.snr:g}", file=out)
    return EXIT_OK


def cmd_enhance(args, out=None) -> int:
    out = out or sys.stdout
    cfg = _pipeline_config(args)
    noisy = read_wav(args.noisy)
    speech = read_wav(args.speech) if args.speech else None
    noise = read_wav(args.noise) if args.noise else None
    models = None
    if cfg.estimator == "oracle" and cfg.method in ("mfmvdr", "wiener") and (speech is None or noise is None):
        raise UsageError("oracle estimation needs --speech and --noise")
    if cfg.estimator == "neural" or cfg.method in ("masking", "direct"):
        cfg = replace(cfg, estimator="neural")
        models = _load_heads(cfg)
    for name, w in (("speech", speech), ("noise", noise)):
        if w is not None and len(w) != len(noisy):
            raise ValueError(f"{name} track length {len(w)} differs from noisy length {len(noisy)}")
    enhanced, diag = enhance_waveform(noisy, cfg, speech, noise, models)
    write_wav(args.out, enhanced, "float32")
    print(cfg.echo(), file=out)
    print(f"singular_bins={diag['singular']} degenerate_bins={diag['degenerate']}", file=out)
    if speech is not None:
        report = evaluate(noisy, enhanced, speech)
        print(report.to_json() if args.json else report.to_text(), file=out)
    return EXIT_OK


def cmd_gradcheck(args, out=None) -> int:
    out = out or sys.stdout
    noisy, speech, _ = make_mixture(MixtureSpec(args.snr, args.seed, 0.5))
    cfg = TrainConfig(n_taps=args.n_taps, hidden_dim=args.hidden, bottleneck_dim=args.bottleneck)
    models = init_heads("mfmvdr", args.n_taps, args.seed, args.hidden, args.bottleneck)
    previous = filters.ADJOINT_SCALE
    if args.inject_adjoint_bug:
        filters.ADJOINT_SCALE = 1.01
    try:
        report = gradient_check(Utterance(noisy.samples, speech.samples, f"seed{args.seed}"),
                                models, cfg, seed=args.seed, max_probes=args.samples)
    finally:
        filters.ADJOINT_SCALE = previous
    for line in report.lines():
        print(line, file=out)
    worst = report.worst
    print(f"probes={len(report.probes)} max_rel_err={max(p.rel_error for p in report.probes):.3e}",
          file=out)
    if report.passed:
        print("PASS", file=out)
        return EXIT_OK
    print(f"FAIL worst head={worst.head} tensor={worst.tensor} index={list(worst.index)} "
          f"rel_err={worst.rel_error:.3e} tol={worst.tolerance:g}", file=out)
    return EXIT_NUMERIC


def load_corpus(root) -> list[Utterance]:
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset directory {root} does not exist")
    corpus = []
    for d in sorted(p for p in root.iterdir() if p.is_dir()):
        if (d / "noisy.wav").exists() and (d / "speech.wav").exists():
            noisy, speech = read_wav(d / "noisy.wav"), read_wav(d / "speech.wav")
            if len(noisy) != len(speech):
                raise ValueError(f"{d}: noisy and speech lengths differ")
            corpus.append(Utterance(noisy.samples, speech.samples, d.name))
    if not corpus:
        raise ValueError(f"no utterances (noisy.wav + speech.wav subdirectories) in {root}")
    return corpus


def cmd_train_toy(args, out=None) -> int:
    out = out or sys.stdout
    corpus = load_corpus(args.dataset)
    target = Path(args.out)
    target.mkdir(parents=True, exist_ok=True)
    cfg = TrainConfig(lr=args.lr, max_epochs=args.epochs, batch_size=args.batch_size,
                      n_taps=args.n_taps, hidden_dim=args.hidden, bottleneck_dim=args.bottleneck)
    with open(target / "train.log", "w", encoding="utf-8") as log:
        def emit(line):
            log.write(line + "\n")
            print(line, file=out)
        models, _ = train_toy(corpus, cfg, init_seed=args.seed, log=emit)
    for key, model in models.items():
        save_model(model, target / f"model_{key}.tcn")
    print(f"saved {', '.join(str(target / f'model_{k}.tcn') for k in sorted(models))}", file=out)
    return EXIT_OK


def cmd_bench(args, out=None) -> int:
    out = out or sys.stdout
    # the deployed system is the neural one; oracle timing only on request
    cfg = _pipeline_config(args)
    if args.estimator is None and not args.config:
        cfg = replace(cfg, estimator="neural")
    if args.input:
        noisy, speech, noise = read_wav(args.input), None, None
    else:
        noisy, speech, noise = make_mixture(MixtureSpec(args.snr, args.seed, args.duration))
    print(cfg.echo() + f" threads={args.threads} repeats={args.repeats} "
          f"duration_s={noisy.duration:g}", file=out)
    results = {}
    for method in ("passthrough", "mfmvdr", "masking", "direct"):
        run_cfg = replace(cfg, method=method)
        models = None
        if method in ("masking", "direct") or run_cfg.estimator == "neural" or speech is None:
            run_cfg = replace(run_cfg, estimator="neural")
            models = init_heads(method, cfg.n_taps, args.seed, args.hidden, args.bottleneck) \
                if method != "passthrough" else None
        results[method] = benchmark_rtf(
            lambda w, c=run_cfg, m=models: enhance_waveform(w, c, speech, noise, m),
            noisy, repeats=args.repeats, threads=args.threads)
        print(f"method={method} estimator={run_cfg.estimator if method != 'passthrough' else '-'} "
              f"rtf={results[method]:.6f}", file=out)
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "enhance": cmd_enhance, "gradcheck": cmd_gradcheck,
            "train-toy": cmd_train_toy, "bench": cmd_bench}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "threads", None):
            if args.threads < 1:
                parser.error("--threads must be >= 1")
            torch.set_num_threads(args.threads)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (SingularSystemError, DegeneratePowerError, NonFiniteLossError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (WavFormatError, ModelFormatError, OSError, ValueError, json.JSONDecodeError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
