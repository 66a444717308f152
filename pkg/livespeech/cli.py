"""
Command-line interface for livespeech package.
Provides the main CLI entry point and argument parsing.
"""

import argparse
import json
import os
import sys
from typing import Callable, Dict, List, Optional

import numpy as np

from . import __version__
from . import numerics as nx
from .codec import Codebooks, rvq_decode
from .config import Config, RunConfig
from .dataset import Dataset, load_dataset, synth_dataset
from .exceptions import LiveSpeechError, ValidationError
from .metrics import oracle_symbol_error_rate, speaker_similarity_proxy
from .model import encode_condition
from .sampler import DEFAULT_N_SBS, DEFAULT_TEMPERATURES, DEFAULT_TOP_KS, generate, grid_search
from .serialization import load_checkpoint, read_codebooks, write_codebooks, write_grid
from .streaming import Pacing
from .training import LMTrainer, load_tokens, tokenize_dataset, train_codec
from .evaluation import evaluate, stream_bench
from .experiments import run_tradeoff
from .utils import parse_float_list, parse_int_list, setup_logging

COMMANDS = (
    "synth-data", "train-codec", "tokenize", "train-lm", "generate", "stream-bench", "eval", "gridsearch", "tradeoff"
)


def create_parser() -> argparse.ArgumentParser:
    """Create and configure the argument parser."""
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', type=str, metavar='FILE', help='Configuration file (JSON)')
    common.add_argument('--seed', type=int, metavar='N', help='Override the run seed')
    common.add_argument('--out', type=str, metavar='PATH', help='Output directory or file')
    common.add_argument('--verbose', '-v', action='store_true', help='Enable verbose logging')

    parser = argparse.ArgumentParser(
        prog='livespeech',
        description='livespeech - codec language model TTS toolkit on synthetic speech',
        epilog='''
Examples:
  livespeech synth-data --out ./data
  livespeech train-codec --config run.json
  livespeech tokenize --config run.json
  livespeech train-lm --config run.json --out ./runs/adaptive
  livespeech stream-bench --checkpoint ./runs/adaptive/best.lspc --pacing real_time
  livespeech eval --checkpoint ./runs/adaptive/best.lspc --plots --out ./reports
  livespeech tradeoff --seeds 0,1,2 --steps 2000 --out ./runs/tradeoff
        ''',
        formatter_class=argparse.RawDescriptionHelpFormatter
    )
    parser.add_argument('--version', action='version', version=f'livespeech {__version__}')
    sub = parser.add_subparsers(dest='command', metavar='COMMAND')
    sub.required = True

    sub.add_parser('synth-data', parents=[common], help='Generate the synthetic corpus')
    sub.add_parser('train-codec', parents=[common], help='Train RVQ codebooks on the training split')
    sub.add_parser('tokenize', parents=[common], help='Encode the corpus into code grids')

    train = sub.add_parser('train-lm', parents=[common], help='Train the decoder')
    train.add_argument('--resume', type=str, metavar='CKPT', help='Continue from a checkpoint')
    train.add_argument('--steps', type=int, metavar='N', help='Stop after N more steps')
    train.add_argument('--dump-weights', type=str, metavar='CSV',
                       help='Write the loss weight matrix of one training example and exit')
    train.add_argument('--progress', action='store_true', help='Show a progress bar')

    for name, help_text in (('generate', 'Generate codes for one utterance'),
                            ('stream-bench', 'Measure streaming RTF and latency'),
                            ('eval', 'Write the evaluation report'),
                            ('gridsearch', 'Search sampler hyperparameters on the validation split')):
        cmd = sub.add_parser(name, parents=[common], help=help_text)
        cmd.add_argument('--checkpoint', type=str, metavar='CKPT', required=True, help='Decoder checkpoint')

    gen = sub.choices['generate']
    gen.add_argument('--utterance', type=str, metavar='ID', help='Utterance whose text and speaker to use')
    gen.add_argument('--frames', type=int, metavar='N', help='Frames to generate (default: reference length)')

    bench = sub.choices['stream-bench']
    bench.add_argument('--frames', type=int, metavar='N', help='Frames to stream')
    bench.add_argument('--pacing', choices=[p.value for p in Pacing], default=Pacing.OFF.value)

    sub.choices['eval'].add_argument('--plots', action='store_true', help='Also write SVG plots')

    search = sub.choices['gridsearch']
    search.add_argument('--temperatures', type=parse_float_list, default=DEFAULT_TEMPERATURES)
    search.add_argument('--top-ks', type=parse_int_list, default=DEFAULT_TOP_KS)
    search.add_argument('--n-sbs', type=parse_int_list, default=DEFAULT_N_SBS)

    tradeoff = sub.add_parser('tradeoff', parents=[common],
                              help='Train and compare the uniform, adaptive and static-priority losses')
    tradeoff.add_argument('--seeds', type=parse_int_list, default=(0, 1, 2), help='Comma-separated seeds')
    tradeoff.add_argument('--steps', type=int, metavar='N', help='Training steps per run (default: optim.total_steps)')
    tradeoff.add_argument('--progress', action='store_true', help='Show a progress bar')
    return parser


def load_config(args: argparse.Namespace) -> Config:
    config = Config(config_file=args.config)
    if args.seed is not None:
        config.set("seed", args.seed)
    if args.verbose:
        config.set("log_level", "DEBUG")
    setup_logging(config.get("log_level"))
    return config


def _out(args: argparse.Namespace, default: str) -> str:
    return args.out or default


def _checkpoint(args: argparse.Namespace):
    ckpt = load_checkpoint(args.checkpoint)
    return ckpt.params, ckpt.run


def _codebooks(run: RunConfig) -> Codebooks:
    return read_codebooks(run.paths.codec_path)


def handle_synth_data(args: argparse.Namespace, config: Config) -> int:
    if args.seed is not None:
        config.set("dataset.seed", args.seed)
    run = config.run_config()
    out_dir = _out(args, run.paths.data_dir)
    dataset = synth_dataset(run.dataset, out_dir)
    print(f"✓ Wrote {len(dataset)} utterances to {out_dir}")
    return 0


def handle_train_codec(args: argparse.Namespace, config: Config) -> int:
    run = config.run_config()
    codebooks = train_codec(load_dataset(run.paths.data_dir), run, progress=True)
    path = _out(args, run.paths.codec_path)
    write_codebooks(codebooks, path)
    print(f"✓ Codebooks written: {path}")
    return 0


def handle_tokenize(args: argparse.Namespace, config: Config) -> int:
    run = config.run_config()
    out_dir = _out(args, run.paths.tokens_dir)
    grids = tokenize_dataset(load_dataset(run.paths.data_dir), _codebooks(run), out_dir)
    print(f"✓ Tokenized {len(grids)} utterances into {out_dir}")
    return 0


def handle_train_lm(args: argparse.Namespace, config: Config) -> int:
    run = config.run_config()
    dataset = load_dataset(run.paths.data_dir)
    codebooks = _codebooks(run) if os.path.exists(run.paths.codec_path) else None
    trainer = LMTrainer(run, dataset, load_tokens(dataset, run.paths.tokens_dir), codebooks,
                        _out(args, run.paths.run_dir))
    if args.resume:
        trainer.resume(args.resume)
    if args.dump_weights:
        trainer.dump_weights(args.dump_weights)
        print(f"✓ Weight matrix written: {args.dump_weights}")
        return 0
    result = trainer.train(steps=args.steps, progress=args.progress)
    print(f"✓ Training finished: loss {result.final_loss:.4f}, checkpoint {result.last_path}")
    if result.best_path:
        print(f"  best checkpoint: {result.best_path} (valid SER {result.best_valid_ser})")
    return 0


def _pick_utterance(dataset: Dataset, utt_id: Optional[str]):
    if utt_id:
        return dataset[utt_id]
    pool = dataset.split("test") or dataset.utterances
    return pool[0]


def handle_generate(args: argparse.Namespace, config: Config) -> int:
    paths = config.run_config().paths
    params, run = _checkpoint(args)
    dataset = load_dataset(paths.data_dir)
    codebooks = read_codebooks(paths.codec_path)
    utt = _pick_utterance(dataset, args.utterance)
    enrol = dataset.enrollment(utt)
    with nx.no_grad():
        prefix = encode_condition(utt.text, enrol.features, params)
        grid = generate(params, prefix, args.frames or utt.n_frames, run.sampler)
    path = _out(args, os.path.join(paths.run_dir, f"{utt.utt_id}.generated.grid"))
    write_grid(grid, path)
    features = rvq_decode(grid, codebooks, frame_rate_hz=utt.features.frame_rate_hz)
    ser = oracle_symbol_error_rate(features, utt.text, dataset.world)
    sim = speaker_similarity_proxy(features, enrol.features, dataset.world)
    print(f"✓ Generated {grid.n_frames} frames for {utt.utt_id}: SER {ser:.3f}, speaker {sim:.3f} -> {path}")
    return 0


def handle_stream_bench(args: argparse.Namespace, config: Config) -> int:
    paths = config.run_config().paths
    params, run = _checkpoint(args)
    dataset = load_dataset(paths.data_dir)
    report = stream_bench(params, dataset, read_codebooks(paths.codec_path), run.sampler,
                          args.frames or run.eval.stream_frames, Pacing(args.pacing))
    if args.out:
        report.to_json(args.out)
    print(report.summary_line())
    return 0


def handle_eval(args: argparse.Namespace, config: Config) -> int:
    paths = config.run_config().paths
    params, run = _checkpoint(args)
    out_dir = _out(args, os.path.join(paths.run_dir, "eval"))
    metrics_csv = os.path.join(os.path.dirname(args.checkpoint), "metrics.csv")
    evaluate(params, run, load_dataset(paths.data_dir), read_codebooks(paths.codec_path), run.sampler,
             out_dir, plots=args.plots, metrics_csv=metrics_csv)
    print(f"✓ Report written: {os.path.join(out_dir, 'report.json')}")
    return 0


def handle_gridsearch(args: argparse.Namespace, config: Config) -> int:
    paths = config.run_config().paths
    params, run = _checkpoint(args)
    dataset = load_dataset(paths.data_dir)
    codebooks = read_codebooks(paths.codec_path)
    utterances = dataset.split("valid")[:run.optim.eval_utterances]
    if not utterances:
        raise ValidationError("gridsearch: dataset has no validation utterances")
    enrolments = [dataset.enrollment(u) for u in utterances]
    with nx.no_grad():
        conditions = [encode_condition(u.text, e.features, params) for u, e in zip(utterances, enrolments)]

    def objective(grids) -> float:
        scores = []
        for utt, enrol, grid in zip(utterances, enrolments, grids):
            feats = rvq_decode(grid, codebooks, frame_rate_hz=utt.features.frame_rate_hz)
            scores.append(speaker_similarity_proxy(feats, enrol.features, dataset.world)
                          - oracle_symbol_error_rate(feats, utt.text, dataset.world))
        return float(np.mean(scores))

    with nx.no_grad():
        result = grid_search(params, conditions, [u.n_frames for u in utterances], objective,
                             args.temperatures, args.top_ks, args.n_sbs, seed=run.sampler.seed, progress=True)
    path = _out(args, os.path.join(paths.run_dir, "sampler.json"))
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        json.dump({"sampler": result.best.to_dict(), "score": result.best_score}, f, indent=2)
    best = result.best
    print(f"✓ Best sampler: tau={best.temperature} k={best.top_k} n_sb={best.n_sb} "
          f"(score {result.best_score:.4f}) -> {path}")
    return 0


def handle_tradeoff(args: argparse.Namespace, config: Config) -> int:
    run = config.run_config()
    out_dir = _out(args, os.path.join(os.path.dirname(run.paths.run_dir) or ".", "tradeoff"))
    result = run_tradeoff(run, args.seeds, out_dir, steps=args.steps, progress=args.progress)
    for row in result.rows:
        print(f"  seed {row.seed} {row.scheme:<15} SER {row.ser:.3f}  speaker {row.speaker_sim:.3f}")
    held = sum(result.direction.values())
    mark = "✓" if result.holds else "✗"
    print(f"{mark} Trade-off direction held in {held}/{len(result.direction)} seeds -> "
          f"{os.path.join(out_dir, 'tradeoff.json')}")
    return 0


HANDLERS: Dict[str, Callable[[argparse.Namespace, Config], int]] = {
    "synth-data": handle_synth_data,
    "train-codec": handle_train_codec,
    "tokenize": handle_tokenize,
    "train-lm": handle_train_lm,
    "generate": handle_generate,
    "stream-bench": handle_stream_bench,
    "eval": handle_eval,
    "gridsearch": handle_gridsearch,
    "tradeoff": handle_tradeoff,
}


def main(argv: Optional[List[str]] = None) -> int:
    """Main CLI entry point. Returns 0 on success, 1 on invalid input, 2 on runtime failure."""
    parser = create_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code == 0 else 1

    try:
        config = load_config(args)
        return HANDLERS[args.command](args, config)
    except ValidationError as e:
        print(f"Error: {e}")
        return 1
    except LiveSpeechError as e:
        print(f"Error: {e}")
        return 2
    except KeyboardInterrupt:
        print("\nCancelled by user")
        return 2
    except Exception as e:
        print(f"Unexpected error: {e}")
        return 2


if __name__ == '__main__':
    sys.exit(main())
