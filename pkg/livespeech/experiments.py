"""
Loss-weighting trade-off: the same corpus, codec and decoder trained under the
uniform, adaptive and static-priority schemes, then evaluated side by side.

Expected direction: both weighted schemes reach a lower oracle symbol error
than uniform, and uniform keeps at least the speaker similarity of the
static-priority run.
"""

import csv
import json
import logging
import os
from dataclasses import asdict, dataclass, replace
from typing import Dict, List, Optional, Sequence

from tqdm import tqdm

from . import numerics as nx
from .config import RunConfig
from .dataset import synth_dataset
from .evaluation import evaluate
from .exceptions import ValidationError
from .loss import LossConfig
from .serialization import load_checkpoint
from .training import tokenize_dataset, train_codec, train_lm
from .utils import ensure_directory_exists

logger = logging.getLogger("livespeech.experiments")

TRADEOFF_SCHEMES = ("uniform", "adaptive", "static_priority")


def scheme_loss(scheme: str, total_steps: int, static_init: Sequence[float] = (16.0, 8.0, 4.0, 2.0)) -> LossConfig:
    """Loss settings of one arm: uniform lambda = 0, adaptive lambda = 0.1 with p_max = 0.5, static priority."""
    if scheme == "uniform":
        return LossConfig(scheme="uniform", lam=0.0, total_steps=total_steps)
    if scheme == "adaptive":
        return LossConfig(scheme="adaptive", lam=0.1, p_max=0.5, total_steps=total_steps)
    if scheme == "static_priority":
        return LossConfig(scheme="static_priority", lam=0.0, static_init=tuple(static_init), total_steps=total_steps)
    raise ValidationError(f"tradeoff: unknown scheme {scheme!r}, expected one of {TRADEOFF_SCHEMES}")


@dataclass
class TradeoffRow:
    seed: int
    scheme: str
    ser: float
    speaker_sim: float
    final_loss: float
    per_codebook_accuracy: List[float]


@dataclass
class TradeoffResult:
    rows: List[TradeoffRow]
    direction: Dict[int, bool]

    @property
    def holds(self) -> bool:
        """True when the expected direction shows up in a majority of seeds."""
        return sum(self.direction.values()) * 2 > len(self.direction)

    def to_dict(self) -> Dict:
        return {
            "rows": [asdict(row) for row in self.rows],
            "direction": {str(seed): ok for seed, ok in self.direction.items()},
            "holds": self.holds,
        }


def tradeoff_direction(rows: Sequence[TradeoffRow]) -> Dict[int, bool]:
    """Per seed: adaptive and static SER below uniform, uniform speaker similarity >= static."""
    by_seed: Dict[int, Dict[str, TradeoffRow]] = {}
    for row in rows:
        by_seed.setdefault(row.seed, {})[row.scheme] = row
    direction = {}
    for seed, arms in sorted(by_seed.items()):
        missing = [s for s in TRADEOFF_SCHEMES if s not in arms]
        if missing:
            raise ValidationError(f"tradeoff: seed {seed} has no result for {missing}")
        uniform, adaptive, static = (arms[s] for s in TRADEOFF_SCHEMES)
        direction[seed] = (adaptive.ser < uniform.ser and static.ser < uniform.ser
                           and uniform.speaker_sim >= static.speaker_sim)
    return direction


def _mean(values: Sequence[float]) -> float:
    return float(sum(values) / len(values))


def run_tradeoff(run: RunConfig, seeds: Sequence[int], out_dir: str, steps: Optional[int] = None,
                 progress: bool = False) -> TradeoffResult:
    """
    Train and evaluate every scheme for every seed.

    Each seed gets its own corpus, codec and tokens, shared by the three
    arms; the arms differ only in their loss settings. Runs land in
    out_dir/seed<N>/<scheme>, the summary in tradeoff.csv and tradeoff.json.
    """
    if not seeds:
        raise ValidationError("tradeoff: need at least one seed")
    total = steps or run.optim.total_steps
    optim = replace(run.optim, total_steps=total, warmup_steps=min(run.optim.warmup_steps, total))
    rows: List[TradeoffRow] = []
    with tqdm(total=len(seeds) * len(TRADEOFF_SCHEMES), desc="tradeoff", disable=not progress) as bar:
        for seed in seeds:
            base = replace(run, dataset=replace(run.dataset, seed=seed), optim=optim, seed=seed)
            dataset = synth_dataset(base.dataset)
            codebooks = train_codec(dataset, base)
            grids = tokenize_dataset(dataset, codebooks)
            for scheme in TRADEOFF_SCHEMES:
                arm = replace(base, loss=scheme_loss(scheme, total, run.loss.static_init))
                arm_dir = os.path.join(out_dir, f"seed{seed}", scheme)
                trained = train_lm(arm, dataset, grids, codebooks, out_dir=arm_dir)
                params = load_checkpoint(trained.best_path or trained.last_path, arm.model).params
                with nx.no_grad():
                    report = evaluate(params, arm, dataset, codebooks, out_dir=os.path.join(arm_dir, "eval"))
                enrollment = report["model"]["enrollment"]
                row = TradeoffRow(
                    seed=seed,
                    scheme=scheme,
                    ser=_mean([r["ser"] for r in enrollment]),
                    speaker_sim=_mean([r["speaker_sim"] for r in enrollment]),
                    final_loss=trained.final_loss,
                    per_codebook_accuracy=report["model"]["per_codebook_accuracy"],
                )
                logger.info(f"seed {seed} {scheme}: SER {row.ser:.3f} speaker {row.speaker_sim:.3f}")
                rows.append(row)
                bar.update(1)

    result = TradeoffResult(rows, tradeoff_direction(rows))
    write_tradeoff(result, out_dir)
    logger.info(f"Trade-off direction held in {sum(result.direction.values())}/{len(seeds)} seeds")
    return result


def write_tradeoff(result: TradeoffResult, out_dir: str):
    json_path = os.path.join(out_dir, "tradeoff.json")
    ensure_directory_exists(json_path)
    with open(json_path, 'w', encoding='utf-8') as f:
        json.dump(result.to_dict(), f, indent=2)
    n_q = len(result.rows[0].per_codebook_accuracy) if result.rows else 0
    with open(os.path.join(out_dir, "tradeoff.csv"), 'w', newline='', encoding='utf-8') as f:
        writer = csv.writer(f)
        writer.writerow(["seed", "scheme", "ser", "speaker_sim", "final_loss"] + [f"acc_q{q + 1}" for q in range(n_q)])
        for row in result.rows:
            writer.writerow([row.seed, row.scheme, row.ser, row.speaker_sim, row.final_loss]
                            + list(row.per_codebook_accuracy))
