"""
Evaluation report: codec reference rows, zero-shot generation metrics per
enrollment length, reference-conditioned per-codebook accuracy and a streaming run.
"""

import csv
import json
import logging
import os
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from . import numerics as nx
from .codec import Codebooks, rvq_decode, rvq_encode
from .config import RunConfig
from .dataset import Dataset, Utterance
from .exceptions import ValidationError
from .metrics import logits_accuracy, oracle_symbol_error_rate, speaker_similarity_proxy
from .model import Parameters, encode_condition, forward_full
from .patterns import shift_delayed
from .sampler import SamplerConfig, generate
from .streaming import Pacing, StreamReport, generate_stream
from .utils import ensure_directory_exists

logger = logging.getLogger("livespeech.evaluation")

REPORT_VERSION = 1

# key -> expected type; nested dicts describe objects, one-element lists describe arrays
_METRIC_ROW = {"ser": float, "speaker_sim": float}
REPORT_SCHEMA: Dict[str, Any] = {
    "version": int,
    "n_utterances": int,
    "reference": {
        "clean_ser": float,
        "q_full": {"q_used": int, **_METRIC_ROW},
        "q_half": {"q_used": int, **_METRIC_ROW},
        "sweep": [{"q_used": int, "mse": float, **_METRIC_ROW}],
    },
    "model": {
        "sampler": {"temperature": float, "n_sb": int, "seed": int},
        "enrollment": [{"frames": int, **_METRIC_ROW}],
        "per_codebook_accuracy": [float],
    },
    "stream": {"frames": int, "rtf": float, "first_chunk_latency_s": float, "prefill_s": float,
               "step_p50_s": float, "step_p95_s": float},
}


def _check(value: Any, schema: Any, where: str):
    if isinstance(schema, dict):
        if not isinstance(value, dict):
            raise ValidationError(f"report: {where} must be an object")
        for key, sub in schema.items():
            if key not in value:
                raise ValidationError(f"report: missing field {where}.{key}")
            _check(value[key], sub, f"{where}.{key}")
    elif isinstance(schema, list):
        if not isinstance(value, list) or not value:
            raise ValidationError(f"report: {where} must be a non-empty array")
        for i, item in enumerate(value):
            _check(item, schema[0], f"{where}[{i}]")
    elif schema is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ValidationError(f"report: {where} must be a number, got {value!r}")
    elif not isinstance(value, schema) or isinstance(value, bool):
        raise ValidationError(f"report: {where} must be {schema.__name__}, got {value!r}")


def validate_report(report: Dict[str, Any]):
    """Raise ValidationError unless the report matches REPORT_SCHEMA."""
    _check(report, REPORT_SCHEMA, "report")
    n_q = len(report["model"]["per_codebook_accuracy"])
    if len(report["reference"]["sweep"]) != n_q:
        raise ValidationError(f"report: sweep has {len(report['reference']['sweep'])} rows for {n_q} codebooks")


def _mean(values: Sequence[float]) -> float:
    return float(np.mean(values)) if values else 0.0


def codec_reference(dataset: Dataset, codebooks: Codebooks, utterances: Sequence[Utterance]) -> Dict[str, Any]:
    """Oracle metrics of codec round-trips for every q_used, plus the clean-feature baseline."""
    if not utterances:
        raise ValidationError("codec_reference: no utterances to evaluate")
    world = dataset.world
    clean = _mean([oracle_symbol_error_rate(u.features, u.text, world) for u in utterances])
    sweep = []
    for q_used in range(1, codebooks.n_codebooks + 1):
        errors, sims, mse = [], [], []
        for utt in utterances:
            grid = rvq_encode(utt.features, codebooks)
            decoded = rvq_decode(grid, codebooks, q_used, utt.features.frame_rate_hz)
            errors.append(oracle_symbol_error_rate(decoded, utt.text, world))
            sims.append(speaker_similarity_proxy(decoded, utt.features, world))
            mse.append(float(np.mean((decoded.frames - utt.features.frames) ** 2)))
        sweep.append({"q_used": q_used, "ser": _mean(errors), "speaker_sim": _mean(sims), "mse": _mean(mse)})
    half = max(1, codebooks.n_codebooks // 2)
    return {
        "clean_ser": clean,
        "q_full": {k: sweep[-1][k] for k in ("q_used", "ser", "speaker_sim")},
        "q_half": {k: sweep[half - 1][k] for k in ("q_used", "ser", "speaker_sim")},
        "sweep": sweep,
    }


def reference_accuracy(params: Parameters, dataset: Dataset, codebooks: Codebooks,
                       utterances: Sequence[Utterance]) -> List[float]:
    accs = []
    with nx.no_grad():
        for utt in utterances:
            shifted = shift_delayed(rvq_encode(utt.features, codebooks))
            prefix = encode_condition(utt.text, dataset.enrollment(utt).features, params)
            logits = forward_full(prefix, shifted, params)
            accs.append(logits_accuracy(logits.value, shifted.codes, shifted.pad_code))
    return [float(a) for a in np.mean(accs, axis=0)]


def zero_shot_metrics(params: Parameters, dataset: Dataset, codebooks: Codebooks,
                      utterances: Sequence[Utterance], sampler_cfg: SamplerConfig,
                      enrollment_frames: int) -> Dict[str, Any]:
    """
    Generate every utterance's text from a cropped enrollment of the same speaker.

    The enrollment comes from a different utterance than the one whose text
    is spoken; speaker similarity is measured against the full enrollment
    utterance.
    """
    world = dataset.world
    errors, sims = [], []
    for utt in utterances:
        enrol = dataset.enrollment(utt)
        prefix = encode_condition(utt.text, enrol.features.crop(enrollment_frames), params)
        with nx.no_grad():
            grid = generate(params, prefix, utt.n_frames, sampler_cfg)
        features = rvq_decode(grid, codebooks, frame_rate_hz=utt.features.frame_rate_hz)
        errors.append(oracle_symbol_error_rate(features, utt.text, world))
        sims.append(speaker_similarity_proxy(features, enrol.features, world))
    return {"frames": int(enrollment_frames), "ser": _mean(errors), "speaker_sim": _mean(sims)}


def stream_bench(params: Parameters, dataset: Dataset, codebooks: Codebooks, sampler_cfg: SamplerConfig,
                 n_frames: int, pacing: Pacing = Pacing.OFF, utterance: Optional[Utterance] = None) -> StreamReport:
    """Stream n_frames frames for one test (or any) utterance and return the timings."""
    pool = dataset.split("test") or dataset.utterances
    utt = utterance or pool[0]
    prefix = encode_condition(utt.text, dataset.enrollment(utt).features, params)
    with nx.no_grad():
        _, report = generate_stream(params, prefix, n_frames, sampler_cfg, codebooks, pacing,
                                    frame_rate_hz=utt.features.frame_rate_hz)
    return report


def evaluate(params: Parameters, run: RunConfig, dataset: Dataset, codebooks: Codebooks,
             sampler_cfg: Optional[SamplerConfig] = None, out_dir: Optional[str] = None,
             plots: bool = False, metrics_csv: Optional[str] = None) -> Dict[str, Any]:
    """Build, validate and optionally write the evaluation report (report.json, report.csv)."""
    sampler_cfg = sampler_cfg or run.sampler
    utterances = dataset.split("test")[:run.eval.max_utterances]
    if not utterances:
        raise ValidationError("eval: dataset has no test utterances")
    dataset.check_zero_shot()

    reference = codec_reference(dataset, codebooks, utterances)
    enrollment = [zero_shot_metrics(params, dataset, codebooks, utterances, sampler_cfg, frames)
                  for frames in run.eval.enrollment_frames]
    stream = stream_bench(params, dataset, codebooks, sampler_cfg, run.eval.stream_frames)
    report = {
        "version": REPORT_VERSION,
        "n_utterances": len(utterances),
        "reference": reference,
        "model": {
            "sampler": sampler_cfg.to_dict(),
            "enrollment": enrollment,
            "per_codebook_accuracy": reference_accuracy(params, dataset, codebooks, utterances),
        },
        "stream": stream.to_dict(),
    }
    validate_report(report)
    for row in enrollment:
        logger.info(f"enrollment {row['frames']} frames: SER {row['ser']:.3f} speaker {row['speaker_sim']:.3f}")
    logger.info(f"reference Q={reference['q_full']['q_used']}: SER {reference['q_full']['ser']:.3f}; "
                f"stream {stream.summary_line()}")

    if out_dir:
        write_report(report, out_dir)
        if plots:
            plot_codec_sweep(reference["sweep"], os.path.join(out_dir, "codec_sweep.svg"))
            if metrics_csv and os.path.exists(metrics_csv):
                plot_training_curves(metrics_csv, os.path.join(out_dir, "training.svg"))
    return report


def write_report(report: Dict[str, Any], out_dir: str):
    json_path = os.path.join(out_dir, "report.json")
    ensure_directory_exists(json_path)
    with open(json_path, 'w', encoding='utf-8') as f:
        json.dump(report, f, indent=2)
    with open(os.path.join(out_dir, "report.csv"), 'w', newline='', encoding='utf-8') as f:
        writer = csv.writer(f)
        writer.writerow(["row", "q_used", "enrollment_frames", "ser", "speaker_sim"])
        for row in report["reference"]["sweep"]:
            writer.writerow(["reference", row["q_used"], "", row["ser"], row["speaker_sim"]])
        for row in report["model"]["enrollment"]:
            writer.writerow(["model", "", row["frames"], row["ser"], row["speaker_sim"]])
    logger.info(f"Wrote report to {json_path}")


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


def plot_codec_sweep(sweep: Sequence[Dict[str, Any]], path: str):
    """Symbol error and speaker similarity against the number of codebooks used."""
    plt = _pyplot()
    q = [row["q_used"] for row in sweep]
    fig, ax = plt.subplots(figsize=(6, 3.6), constrained_layout=True)
    ax.plot(q, [row["ser"] for row in sweep], marker="o", label="symbol error")
    ax.plot(q, [row["speaker_sim"] for row in sweep], marker="s", label="speaker similarity")
    ax.set_xlabel("Codebooks used")
    ax.set_ylim(0.0, 1.05)
    ax.grid(True, alpha=0.3)
    ax.legend(loc="best", fontsize=8)
    ensure_directory_exists(path)
    fig.savefig(path, format="svg")
    plt.close(fig)


def plot_training_curves(metrics_csv: str, path: str):
    """Loss and mean per-codebook accuracy from a training metrics CSV."""
    with open(metrics_csv, 'r', encoding='utf-8') as f:
        rows = list(csv.DictReader(f))
    if not rows:
        raise ValidationError(f"plot_training_curves: {metrics_csv} has no rows")
    steps = [int(r["step"]) for r in rows]
    acc_keys = [k for k in rows[0] if k.startswith("acc_q")]
    plt = _pyplot()
    fig, (ax_loss, ax_acc) = plt.subplots(1, 2, figsize=(10, 3.6), constrained_layout=True)
    ax_loss.plot(steps, [float(r["loss"]) for r in rows])
    ax_loss.set_xlabel("Step")
    ax_loss.set_ylabel("Loss")
    ax_loss.set_yscale("log")
    ax_loss.grid(True, alpha=0.3)
    for key in acc_keys:
        ax_acc.plot(steps, [float(r[key]) for r in rows], label=key.replace("acc_", ""))
    ax_acc.set_xlabel("Step")
    ax_acc.set_ylabel("Accuracy")
    ax_acc.grid(True, alpha=0.3)
    ax_acc.legend(loc="best", fontsize=7, ncol=2)
    ensure_directory_exists(path)
    fig.savefig(path, format="svg")
    plt.close(fig)
