"""
Training loops for the codec and the decoder.

Batches are drawn from a generator seeded by (seed, step), and Adam moments
are saved with every checkpoint, so a resumed run continues exactly where an
uninterrupted run would be.
"""

import csv
import logging
import math
import os
import time
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from . import numerics as nx
from .codec import CodeGrid, Codebooks, rvq_decode, rvq_encode, train_codebooks
from .config import OptimConfig, RunConfig
from .dataset import Dataset, Utterance
from .exceptions import DatasetError, TrainingError, ValidationError
from .loss import FrameWeightMatrix, compute_loss, dump_weights_csv
from .metrics import logits_accuracy, oracle_symbol_error_rate
from .model import ConditionPrefix, Parameters, count_by_prefix, describe, encode_condition, forward_full, init_params
from .patterns import shift_delayed
from .sampler import SamplerConfig, generate
from .serialization import Checkpoint, load_checkpoint, read_grid, save_checkpoint, write_grid
from .utils import derive_rng, format_duration

logger = logging.getLogger("livespeech.training")

GREEDY = SamplerConfig(temperature=1.0, top_k=1, n_sb=0, seed=0)


def lr_at(step: int, cfg: OptimConfig) -> float:
    """Linear warmup to lr, then cosine decay to min_lr at total_steps."""
    if step < cfg.warmup_steps:
        return cfg.lr * (step + 1) / (cfg.warmup_steps + 1)
    if step >= cfg.total_steps:
        return cfg.min_lr
    decay_ratio = (step - cfg.warmup_steps) / max(1, cfg.total_steps - cfg.warmup_steps)
    coeff = 0.5 * (1.0 + math.cos(math.pi * decay_ratio))
    return cfg.min_lr + coeff * (cfg.lr - cfg.min_lr)


class Adam:
    """Adam with bias correction, optional decoupled weight decay and global norm clipping."""

    def __init__(self, params: Parameters, cfg: OptimConfig):
        self.params = params
        self.cfg = cfg
        self.step_count = 0
        self.m = {name: np.zeros_like(node.value) for name, node in params.items()}
        self.v = {name: np.zeros_like(node.value) for name, node in params.items()}

    def grad_norm(self) -> float:
        total = 0.0
        for _, node in self.params.items():
            if node.grad is not None:
                total += float(np.sum(node.grad.astype(np.float64) ** 2))
        return math.sqrt(total)

    def update(self, lr: float) -> float:
        """Apply one update from the accumulated gradients; returns the pre-clip gradient norm."""
        cfg = self.cfg
        norm = self.grad_norm()
        scale = cfg.grad_clip / norm if cfg.grad_clip > 0 and norm > cfg.grad_clip else 1.0
        self.step_count += 1
        bias1 = 1.0 - cfg.beta1 ** self.step_count
        bias2 = 1.0 - cfg.beta2 ** self.step_count
        for name, node in self.params.items():
            if node.grad is None:
                continue
            g = node.grad * scale
            m, v = self.m[name], self.v[name]
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * g * g
            update = (m / bias1) / (np.sqrt(v / bias2) + cfg.eps)
            if cfg.weight_decay > 0 and node.value.ndim >= 2:
                update = update + cfg.weight_decay * node.value
            node.value -= (lr * update).astype(node.value.dtype)
        return norm

    def state_dict(self) -> Dict[str, np.ndarray]:
        state: Dict[str, np.ndarray] = {}
        for name in self.m:
            state[f"optim.m.{name}"] = self.m[name]
        for name in self.v:
            state[f"optim.v.{name}"] = self.v[name]
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray], step_count: int):
        for name in self.m:
            try:
                self.m[name] = np.array(state[f"optim.m.{name}"], dtype=self.m[name].dtype)
                self.v[name] = np.array(state[f"optim.v.{name}"], dtype=self.v[name].dtype)
            except KeyError as e:
                raise TrainingError(f"Adam: optimizer state is missing {e}")
        self.step_count = step_count


# ---------------------------------------------------------------------------
# Codec and tokens
# ---------------------------------------------------------------------------

def train_codec(dataset: Dataset, run: RunConfig, progress: bool = False) -> Codebooks:
    """Fit codebooks on the training split."""
    corpus = [u.features for u in dataset.split("train")]
    cfg = run.codec
    started = time.time()
    codebooks = train_codebooks(corpus, cfg.n_codebooks, cfg.codebook_size, run.seed,
                                zero_reserved=cfg.zero_reserved, iterations=cfg.iterations, progress=progress)
    logger.info(f"Trained codec on {len(corpus)} utterances in {format_duration(time.time() - started)}")
    return codebooks


def tokenize_dataset(dataset: Dataset, codebooks: Codebooks, out_dir: Optional[str] = None) -> Dict[str, CodeGrid]:
    """Encode every utterance; optionally write one GRID file per utterance."""
    grids = {}
    for utt in dataset.utterances:
        grids[utt.utt_id] = rvq_encode(utt.features, codebooks)
        if out_dir:
            write_grid(grids[utt.utt_id], os.path.join(out_dir, f"{utt.utt_id}.grid"))
    if out_dir:
        logger.info(f"Wrote {len(grids)} code grids to {out_dir}")
    return grids


def load_tokens(dataset: Dataset, tokens_dir: str) -> Dict[str, CodeGrid]:
    grids = {}
    for utt in dataset.utterances:
        path = os.path.join(tokens_dir, f"{utt.utt_id}.grid")
        if not os.path.exists(path):
            raise DatasetError(f"load_tokens: missing code grid {path}; run tokenize first")
        grid = read_grid(path)
        if not isinstance(grid, CodeGrid) or grid.n_frames != utt.n_frames:
            raise DatasetError(f"load_tokens: {path} does not match utterance {utt.utt_id}")
        grids[utt.utt_id] = grid
    return grids


# ---------------------------------------------------------------------------
# Decoder training
# ---------------------------------------------------------------------------

@dataclass
class StepResult:
    step: int
    loss: float
    lr: float
    grad_norm: float
    accuracy: np.ndarray
    mean_weights: np.ndarray


@dataclass
class TrainResult:
    last_path: str
    best_path: Optional[str]
    metrics_path: str
    final_loss: float
    best_valid_ser: Optional[float]


class LMTrainer:
    """
    Reference-conditioned training of the decoder on delayed grids.

    Writes metrics.csv (one row per log_every steps), valid.csv (one row per
    eval_every steps), last.lspc and best.lspc into out_dir.
    """

    def __init__(self, run: RunConfig, dataset: Dataset, grids: Dict[str, CodeGrid],
                 codebooks: Optional[Codebooks] = None, out_dir: Optional[str] = None):
        if not dataset.split("train"):
            raise DatasetError("train_lm: dataset has no training utterances")
        dataset.check_zero_shot()
        check_compatible(run, dataset, codebooks)
        self.run = run
        self.dataset = dataset
        self.grids = grids
        self.codebooks = codebooks
        self.out_dir = out_dir or run.paths.run_dir
        self.train_utts = dataset.split("train")
        self.valid_utts = dataset.split("valid")[:run.optim.eval_utterances]
        self.params = init_params(run.model, run.seed)
        self.optimizer = Adam(self.params, run.optim)
        self.step = 0
        self.best_ser: Optional[float] = None
        self.best_loss: Optional[float] = None
        logger.info(f"Decoder: {describe(run.model)}")
        logger.debug(f"Parameter groups: {count_by_prefix(self.params)}")

    @property
    def metrics_path(self) -> str:
        return os.path.join(self.out_dir, "metrics.csv")

    @property
    def valid_path(self) -> str:
        return os.path.join(self.out_dir, "valid.csv")

    @property
    def last_path(self) -> str:
        return os.path.join(self.out_dir, "last.lspc")

    @property
    def best_path(self) -> str:
        return os.path.join(self.out_dir, "best.lspc")

    # -- checkpoints -------------------------------------------------------

    def save(self, path: str):
        extra = {"best_valid_ser": self.best_ser, "best_valid_loss": self.best_loss}
        save_checkpoint(path, self.params, self.run, self.step, self.optimizer.state_dict(), extra)

    def resume(self, path: str):
        """Continue from a checkpoint written by this trainer."""
        ckpt: Checkpoint = load_checkpoint(path, expected_model=self.run.model)
        if ckpt.run.to_dict() != self.run.to_dict():
            raise ValidationError(f"resume: {path} was written by a different run configuration")
        self.params = ckpt.params
        self.optimizer = Adam(self.params, self.run.optim)
        self.optimizer.load_state_dict(ckpt.optim_state, ckpt.step)
        self.step = ckpt.step
        self.best_ser = ckpt.extra.get("best_valid_ser")
        self.best_loss = ckpt.extra.get("best_valid_loss")
        logger.info(f"Resumed from {path} at step {self.step}")

    # -- one example -------------------------------------------------------

    def condition_for(self, utt: Utterance, params: Optional[Parameters] = None) -> ConditionPrefix:
        enrol = self.dataset.enrollment(utt)
        return encode_condition(utt.text, enrol.features, params or self.params)

    def example_loss(self, utt: Utterance, step: int):
        shifted = shift_delayed(self.grids[utt.utt_id])
        logits = forward_full(self.condition_for(utt), shifted, self.params)
        return compute_loss(logits, shifted, self.run.loss, step), logits, shifted

    def batch(self, step: int) -> List[Utterance]:
        rng = derive_rng(self.run.seed, 3, step)
        picks = rng.integers(len(self.train_utts), size=self.run.optim.batch_size)
        return [self.train_utts[i] for i in picks]

    def weight_matrix(self, utt: Utterance) -> FrameWeightMatrix:
        with nx.no_grad():
            result, _, _ = self.example_loss(utt, self.step)
        return result.weights

    def dump_weights(self, path: str, utt: Optional[Utterance] = None):
        dump_weights_csv(self.weight_matrix(utt or self.train_utts[0]), path)

    # -- training ----------------------------------------------------------

    def train_step(self) -> StepResult:
        step = self.step
        self.params.zero_grad()
        n_q = self.run.model.n_codebooks
        total = None
        losses, accs, weights = [], [], []
        for utt in self.batch(step):
            result, logits, shifted = self.example_loss(utt, step)
            total = result.loss if total is None else total + result.loss
            losses.append(result.loss.item())
            accs.append(logits_accuracy(logits.value, shifted.codes, shifted.pad_code))
            weights.append(result.weights.mean_per_codebook(shifted.valid_mask()))
        loss_value = float(np.mean(losses))
        if not np.isfinite(loss_value):
            raise TrainingError(self._diagnose(step, losses))
        nx.backward(total / len(losses))
        lr = lr_at(step, self.run.optim)
        norm = self.optimizer.update(lr)
        if not np.isfinite(norm):
            raise TrainingError(f"train_lm: non-finite gradient norm at step {step} (lr {lr:.3e})")
        self.step += 1
        return StepResult(step, loss_value, lr, norm, np.mean(accs, axis=0).reshape(n_q),
                          np.mean(weights, axis=0).reshape(n_q))

    def _diagnose(self, step: int, losses: Sequence[float]) -> str:
        bad = [name for name, node in self.params.items() if not np.all(np.isfinite(node.value))]
        return (f"train_lm: loss became non-finite at step {step} (lr {lr_at(step, self.run.optim):.3e}, "
                f"batch losses {['%.4g' % v for v in losses]}, non-finite parameters: {bad or 'none'})")

    def validate(self) -> Tuple[float, Optional[float]]:
        """Validation loss and, with codebooks, greedy oracle symbol error."""
        if not self.valid_utts:
            return float("nan"), None
        losses, errors = [], []
        with nx.no_grad():
            for utt in self.valid_utts:
                result, _, _ = self.example_loss(utt, self.step)
                losses.append(result.loss.item())
                if self.codebooks is not None:
                    grid = generate(self.params, self.condition_for(utt), utt.n_frames, GREEDY)
                    features = rvq_decode(grid, self.codebooks, frame_rate_hz=utt.features.frame_rate_hz)
                    errors.append(oracle_symbol_error_rate(features, utt.text, self.dataset.world))
        ser = float(np.mean(errors)) if errors else None
        return float(np.mean(losses)), ser

    def _is_best(self, loss: float, ser: Optional[float]) -> bool:
        if ser is not None:
            if self.best_ser is None or ser < self.best_ser:
                self.best_ser = ser
                return True
            return False
        if np.isfinite(loss) and (self.best_loss is None or loss < self.best_loss):
            self.best_loss = loss
            return True
        return False

    def _metric_fields(self) -> List[str]:
        n_q = self.run.model.n_codebooks
        return (["step", "loss", "lr", "grad_norm"] + [f"acc_q{q + 1}" for q in range(n_q)]
                + [f"weight_q{q + 1}" for q in range(n_q)])

    def _open_csv(self, path: str, fields: List[str]):
        os.makedirs(self.out_dir, exist_ok=True)
        # a resumed run appends to the rows written before the checkpoint
        fresh = self.step == 0 or not os.path.exists(path)
        handle = open(path, 'w' if fresh else 'a', newline='', encoding='utf-8')
        writer = csv.writer(handle)
        if fresh:
            writer.writerow(fields)
        return handle, writer

    def train(self, steps: Optional[int] = None, progress: bool = False) -> TrainResult:
        """Run until total_steps (or `steps` more steps)."""
        cfg = self.run.optim
        end = cfg.total_steps if steps is None else min(cfg.total_steps, self.step + steps)
        started = time.time()
        last_loss = float("nan")
        metrics_file, metrics = self._open_csv(self.metrics_path, self._metric_fields())
        valid_file, valid = self._open_csv(self.valid_path, ["step", "valid_loss", "valid_ser"])
        try:
            with tqdm(total=end - self.step, desc="train-lm", disable=not progress) as bar:
                while self.step < end:
                    result = self.train_step()
                    last_loss = result.loss
                    bar.update(1)
                    if result.step % cfg.log_every == 0 or self.step == end:
                        metrics.writerow([result.step, repr(result.loss), repr(result.lr), repr(result.grad_norm)]
                                         + [repr(float(a)) for a in result.accuracy]
                                         + [repr(float(w)) for w in result.mean_weights])
                        metrics_file.flush()
                        logger.info(f"step {result.step}: loss {result.loss:.4f} lr {result.lr:.2e} "
                                    f"mean weight {float(np.mean(result.mean_weights)):.3f}")
                    if self.step % cfg.eval_every == 0 or self.step == end:
                        v_loss, v_ser = self.validate()
                        valid.writerow([self.step, repr(v_loss), "" if v_ser is None else repr(v_ser)])
                        valid_file.flush()
                        if self._is_best(v_loss, v_ser):
                            self.save(self.best_path)
                            logger.info(f"step {self.step}: new best (valid loss {v_loss:.4f}, SER {v_ser})")
                        self.save(self.last_path)
        finally:
            metrics_file.close()
            valid_file.close()
        logger.info(f"Trained to step {self.step} in {format_duration(time.time() - started)}")
        best = self.best_path if os.path.exists(self.best_path) else None
        return TrainResult(self.last_path, best, self.metrics_path, last_loss, self.best_ser)


def train_lm(run: RunConfig, dataset: Dataset, grids: Dict[str, CodeGrid],
             codebooks: Optional[Codebooks] = None, out_dir: Optional[str] = None,
             resume: Optional[str] = None, progress: bool = False) -> TrainResult:
    trainer = LMTrainer(run, dataset, grids, codebooks, out_dir)
    if resume:
        trainer.resume(resume)
    return trainer.train(progress=progress)


def check_compatible(run: RunConfig, dataset: Dataset, codebooks: Optional[Codebooks] = None):
    """The decoder must cover the corpus vocabulary, feature width and code layout."""
    model, spec = run.model, dataset.spec
    if model.text_vocab < spec.symbol_vocab:
        raise ValidationError(f"model text_vocab {model.text_vocab} is smaller than the corpus vocabulary {spec.symbol_vocab}")
    if model.feature_dim != spec.feature_dim:
        raise ValidationError(f"model feature_dim {model.feature_dim} does not match corpus feature_dim {spec.feature_dim}")
    if codebooks is not None and (codebooks.n_codebooks, codebooks.codebook_size) != (model.n_codebooks, model.codebook_size):
        raise ValidationError(
            f"codebooks are {codebooks.n_codebooks}x{codebooks.codebook_size}, model expects "
            f"{model.n_codebooks}x{model.codebook_size}"
        )
