"""Training loop, scoring pass and training log."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autograd as ag
from .checkpoint import load_checkpoint, save_checkpoint
from .data import ScoreRecord, Utterance, batch_iter, fix_length, holdout_split
from .metrics import compute_eer
from .model import BONAFIDE, SPOOF, ModelConfig, ModelParams, model_forward, model_init, scores_from_logits

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    epochs: int = 100
    batch_size: int = 32
    seed: int = 0
    preset: str = "paper"
    scale: str = "mel"
    validation_fraction: float = 0.1
    dtype: str = "float32"
    random_crop: bool = False

    def __post_init__(self):
        if self.learning_rate <= 0 or self.epochs < 1 or self.batch_size < 1:
            raise ValueError("learning rate, epochs and batch size must be positive")
        if not 0 < self.validation_fraction < 1:
            raise ValueError("validation fraction must be in (0, 1)")

    def model_config(self) -> ModelConfig:
        return ModelConfig.preset(self.preset, scale=self.scale)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_eer: float
    wall_time: float


@dataclass
class TrainLog:
    epochs: list[EpochRecord] = field(default_factory=list)

    def to_tsv(self, with_time: bool = True) -> str:
        head = "epoch\ttrain_loss\tval_loss\tval_eer" + ("\twall_time" if with_time else "")
        lines = [head]
        for e in self.epochs:
            row = f"{e.epoch}\t{e.train_loss:.8f}\t{e.val_loss:.8f}\t{e.val_eer:.6f}"
            lines.append(row + (f"\t{e.wall_time:.3f}" if with_time else ""))
        return "\n".join(lines) + "\n"

    def to_json(self) -> list[dict]:
        return [asdict(e) for e in self.epochs]

    @classmethod
    def from_json(cls, rows: list[dict]) -> TrainLog:
        return cls([EpochRecord(**r) for r in rows])


def _label(u: Utterance) -> int:
    return BONAFIDE if u.entry.key == "bonafide" else SPOOF


def prepare_inputs(utts: Sequence[Utterance], n_samples: int, dtype,
                   rng: np.random.Generator | None = None) -> np.ndarray:
    """(N, 1, n_samples) array of fixed-length waveforms."""
    rows = [fix_length(u.samples, n_samples, random_crop=rng is not None, rng=rng) for u in utts]
    return np.stack(rows).astype(dtype)[:, None, :]


def _eval_logits(params: ModelParams, x: np.ndarray) -> np.ndarray:
    # one utterance at a time: results never depend on batch composition
    with ag.no_grad():
        return np.stack([model_forward(x[i], params, training=False).data for i in range(x.shape[0])])


def _validate(params: ModelParams, x: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    logits = _eval_logits(params, x).astype(np.float64)
    loss = float(ag.softmax_cross_entropy(ag.Tensor(logits), y).data)
    s = scores_from_logits(logits)
    if np.all(y == BONAFIDE) or np.all(y == SPOOF):
        return loss, float("nan")
    eer, _ = compute_eer(s[y == BONAFIDE], s[y == SPOOF])
    return loss, eer


def train(dataset: Sequence[Utterance], config: TrainConfig = TrainConfig(),
          model_config: ModelConfig | None = None, checkpoint_path=None, resume: bool = False,
          on_epoch: Callable[[EpochRecord], None] | None = None) -> tuple[ModelParams, TrainLog]:
    """Train with softmax cross-entropy and ADAM; return the best-validation-loss parameters.

    A stratified ``validation_fraction`` of ``dataset`` is held out. Batch
    order depends only on (seed, epoch), so a run resumed from
    ``checkpoint_path`` continues exactly where the interrupted one stopped.
    """
    labels = {u.entry.key for u in dataset}
    if labels != {"bonafide", "spoof"}:
        raise ValueError(f"training data must contain both classes, found {sorted(labels)}")
    cfg = model_config or config.model_config()
    dtype = np.dtype(config.dtype)
    train_items, val_items = holdout_split(list(dataset), config.validation_fraction, config.seed)
    if not val_items:
        raise ValueError("validation split is empty; use more data or a larger fraction")
    y_train = np.array([_label(u) for u in train_items])
    y_val = np.array([_label(u) for u in val_items])
    x_val = prepare_inputs(val_items, cfg.n_samples, dtype)
    x_train = None if config.random_crop else prepare_inputs(train_items, cfg.n_samples, dtype)

    params = model_init(config.seed, cfg, dtype=dtype)
    adam = ag.AdamState.for_params(params.parameters(), lr=config.learning_rate)
    history = TrainLog()
    best_loss = np.inf
    best_state = {k: v.copy() for k, v in params.state_arrays().items()}
    start = 0
    if resume and checkpoint_path is not None and Path(checkpoint_path).exists():
        ck = load_checkpoint(checkpoint_path, expected_config=cfg)
        params, adam = ck.params, ck.adam
        history = TrainLog.from_json(ck.meta["log"])
        best_loss = ck.meta["best_val_loss"]
        best_state = ck.extra["best"]
        start = len(history.epochs)
        log.info("resumed from %s at epoch %d", checkpoint_path, start)

    for epoch in range(start, config.epochs):
        t0 = time.perf_counter()
        if config.random_crop:
            x_train = prepare_inputs(train_items, cfg.n_samples, dtype,
                                     rng=np.random.default_rng([config.seed, epoch, 1]))
        total = 0.0
        for idx in batch_iter(len(train_items), config.batch_size, config.seed, epoch):
            params.zero_grad()
            logits = model_forward(ag.Tensor(x_train[idx]), params, training=True)
            loss = ag.softmax_cross_entropy(logits, y_train[idx])
            loss.backward()
            ag.adam_step(params.parameters(), params.grads(), adam)
            total += float(loss.data) * len(idx)
        params.zero_grad()
        val_loss, val_eer = _validate(params, x_val, y_val)
        rec = EpochRecord(epoch + 1, total / len(train_items), val_loss, val_eer, time.perf_counter() - t0)
        history.epochs.append(rec)
        if val_loss < best_loss:
            best_loss = val_loss
            best_state = {k: v.copy() for k, v in params.state_arrays().items()}
        log.info("epoch %d train %.4f val %.4f eer %.4f", rec.epoch, rec.train_loss, val_loss, val_eer)
        if on_epoch is not None:
            on_epoch(rec)
        if checkpoint_path is not None:
            save_checkpoint(checkpoint_path, params, adam, train_config=asdict(config),
                            meta={"log": history.to_json(), "best_val_loss": float(best_loss)},
                            extra={"best": best_state})

    best = model_init(config.seed, cfg, dtype=dtype, filterbank=params.filterbank)
    best.load_state_arrays(best_state)
    return best, history


def evaluate(params: ModelParams, dataset: Sequence[Utterance]) -> list[ScoreRecord]:
    """One score per utterance, in input order."""
    if not dataset:
        return []
    x = prepare_inputs(dataset, params.config.n_samples, params.dtype)
    scores = scores_from_logits(_eval_logits(params, x))
    return [ScoreRecord(u.entry.utterance_id, u.entry.attack_id, u.entry.key, float(s))
            for u, s in zip(dataset, scores)]
