"""
Training loop
Adam with bias correction, reduce-on-plateau schedule, P x K class-balanced
batches and best-validation checkpoint selection
"""
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from crossstate_ecg.core.autodiff import ParamStore, Tape, Tensor
from crossstate_ecg.core.data_io import Segment
from crossstate_ecg.core.errors import InsufficientData, NonFiniteGradient, TooFewClasses
from crossstate_ecg.core.losses import total_loss
from crossstate_ecg.core.network import CrossStateNet
from crossstate_ecg.models.schemas import AdamConfig, EpochRecord, LossConfig, PlateauConfig, TrainConfig

logger = logging.getLogger(__name__)

HISTORY_NAME = "history.csv"


@dataclass
class OptimState:
    """Adam moments plus plateau bookkeeping"""
    lr: float
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    best_metric: float = math.inf
    bad_epochs: int = 0

    @classmethod
    def for_params(cls, store: ParamStore, lr: float) -> "OptimState":
        return cls(
            lr=lr,
            m={name: np.zeros_like(p.data) for name, p in store},
            v={name: np.zeros_like(p.data) for name, p in store},
        )


def adam_step(store: ParamStore, state: OptimState, config: Optional[AdamConfig] = None) -> None:
    """
    Apply one bias-corrected Adam update from the gradients held in `store`

    All gradients are checked before any parameter changes.

    Args:
        store: Parameters with populated gradients
        state: Moment buffers and step counter, updated in place
        config: Adam hyper-parameters
    """
    config = config or AdamConfig()
    bad = [name for name, p in store if p.grad is None or not np.all(np.isfinite(p.grad))]
    if bad:
        raise NonFiniteGradient(f"Non-finite gradient in {len(bad)} parameter(s)", {"params": bad[:10]})

    state.step += 1
    b1, b2 = config.beta1, config.beta2
    correction1 = 1.0 - b1 ** state.step
    correction2 = 1.0 - b2 ** state.step
    for name, p in store:
        g = p.grad
        state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        state.v[name] = b2 * state.v[name] + (1.0 - b2) * g * g
        m_hat = state.m[name] / correction1
        v_hat = state.v[name] / correction2
        p.data -= (state.lr * m_hat / (np.sqrt(v_hat) + config.eps)).astype(p.dtype, copy=False)


def plateau_update(state: OptimState, val_loss: float, config: Optional[PlateauConfig] = None) -> float:
    """
    Reduce the learning rate after `patience` epochs without improvement

    Args:
        state: Optimizer state, updated in place
        val_loss: This epoch's monitored loss
        config: Schedule settings

    Returns:
        The learning rate for the next epoch
    """
    config = config or PlateauConfig()
    if val_loss < state.best_metric - config.threshold:
        state.best_metric = val_loss
        state.bad_epochs = 0
    else:
        state.bad_epochs += 1
        if state.bad_epochs >= config.patience:
            new_lr = max(state.lr * config.factor, config.min_lr)
            if new_lr < state.lr:
                logger.info("Plateau: learning rate %.3g -> %.3g", state.lr, new_lr)
            state.lr = new_lr
            state.bad_epochs = 0
    return state.lr


def balanced_batch(labels: Sequence, classes_per_batch: int, samples_per_class: int,
                   rng: np.random.Generator) -> np.ndarray:
    """
    Draw P distinct classes and K indices from each

    Classes holding fewer than K samples are drawn with replacement.

    Args:
        labels: Label of every pool item
        classes_per_batch: P
        samples_per_class: K
        rng: Random generator

    Returns:
        P * K pool indices grouped by class
    """
    labels = np.asarray(labels)
    classes = np.unique(labels)
    if classes.size < classes_per_batch:
        raise TooFewClasses(f"Pool has {classes.size} classes, batch needs {classes_per_batch}",
                            {"available": int(classes.size), "required": classes_per_batch})
    chosen = rng.choice(classes, size=classes_per_batch, replace=False)
    batch = []
    for c in chosen:
        members = np.flatnonzero(labels == c)
        batch.append(rng.choice(members, size=samples_per_class, replace=members.size < samples_per_class))
    return np.concatenate(batch)


@dataclass
class FitResult:
    """Outcome of fit()"""
    history: List[EpochRecord]
    best_epoch: int
    best_val_loss: float
    classes: List[str]


class Trainer:
    """
    Deterministic training driver for CrossStateNet
    """

    def __init__(self, net: CrossStateNet, train_config: Optional[TrainConfig] = None,
                 loss_config: Optional[LossConfig] = None):
        """
        Initialize Trainer

        Args:
            net: Network to optimize in place
            train_config: Optimizer, schedule and sampler settings
            loss_config: Objective settings
        """
        self.net = net
        self.train_config = train_config or TrainConfig()
        self.loss_config = loss_config or LossConfig()
        self.state = OptimState.for_params(net.store, self.train_config.lr)

    def _evaluate(self, samples: List[np.ndarray], targets: np.ndarray) -> tuple:
        emb, logits = self.net.infer(samples)
        loss = total_loss(Tensor(logits), Tensor(emb), targets, self.loss_config).item()
        acc = float(np.mean(np.argmax(logits, axis=1) == targets))
        return loss, acc

    def train_epoch(self, samples: List[np.ndarray], targets: np.ndarray, rng: np.random.Generator) -> float:
        """One pass of ceil(|train| / batch_size) balanced batches; returns the mean batch loss"""
        cfg = self.train_config
        n_batches = math.ceil(len(samples) / cfg.batch_size)
        self.net.train()
        losses = []
        for b in range(n_batches):
            idx = balanced_batch(targets, cfg.sampler.classes_per_batch, cfg.sampler.samples_per_class, rng)
            self.net.store.zero_grad()
            with Tape() as tape:
                emb, logits, order = self.net.forward_segments([samples[i] for i in idx])
                loss = total_loss(logits, emb, targets[idx][order], self.loss_config)
            tape.backward(loss)
            adam_step(self.net.store, self.state, cfg.adam)
            losses.append(loss.item())
            logger.debug("batch %d/%d loss %.5f", b + 1, n_batches, losses[-1])
        return float(np.mean(losses))

    def fit(self, train: Sequence[Segment], val: Sequence[Segment], out_dir=None) -> FitResult:
        """
        Train for the configured epochs and keep the best-validation weights

        Args:
            train: Training segments
            val: Validation segments from the same subjects
            out_dir: When set, history.csv and the best checkpoint are written here

        Returns:
            FitResult
        """
        cfg = self.train_config
        if not train:
            raise InsufficientData("Training set is empty")
        classes = sorted({s.subject_id for s in train})
        index = {c: i for i, c in enumerate(classes)}
        unknown = sorted({s.subject_id for s in val} - set(index))
        if unknown:
            raise InsufficientData("Validation subjects missing from the training set", {"subjects": unknown})

        train_x = [s.samples for s in train]
        train_y = np.array([index[s.subject_id] for s in train])
        val_x = [s.samples for s in val]
        val_y = np.array([index[s.subject_id] for s in val])
        if not val_x:
            logger.warning("Validation set is empty; monitoring training loss instead")

        batch_rng = np.random.default_rng(np.random.SeedSequence(cfg.seed).spawn(2)[1])
        history: List[EpochRecord] = []
        best_loss, best_epoch, best_state = math.inf, 0, None
        for epoch in range(1, cfg.epochs + 1):
            lr = self.state.lr
            train_loss = self.train_epoch(train_x, train_y, batch_rng)
            if val_x:
                val_loss, val_acc = self._evaluate(val_x, val_y)
            else:
                val_loss, val_acc = train_loss, float("nan")
            record = EpochRecord(epoch=epoch, train_loss=train_loss, val_loss=val_loss, val_acc=val_acc, lr=lr)
            history.append(record)
            logger.info("epoch %d train_loss=%.5f val_loss=%.5f val_acc=%.4f lr=%.3g",
                        epoch, train_loss, val_loss, val_acc, lr)
            if val_loss < best_loss:
                best_loss, best_epoch, best_state = val_loss, epoch, self.net.store.snapshot()
                if out_dir is not None:
                    # disk always holds the best weights seen so far
                    self.save(FitResult(list(history), best_epoch, best_loss, classes), out_dir)
                    logger.debug("Checkpoint written for epoch %d", epoch)
            plateau_update(self.state, val_loss, cfg.plateau)

        if best_state is not None:
            self.net.store.restore(best_state)
        self.net.eval()
        result = FitResult(history=history, best_epoch=best_epoch, best_val_loss=best_loss, classes=classes)
        if out_dir is not None:
            self.save(result, out_dir)
        return result

    def save(self, result: FitResult, out_dir) -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_history(result.history, out_dir / HISTORY_NAME)
        self.net.save(out_dir, metadata={
            "best_epoch": result.best_epoch,
            "best_val_loss": result.best_val_loss,
            "classes": result.classes,
            "seed": self.train_config.seed,
        })


def write_history(history: Sequence[EpochRecord], path) -> Path:
    """history.csv with columns epoch, train_loss, val_loss, val_acc, lr"""
    frame = pd.DataFrame([r.model_dump() for r in history],
                         columns=["epoch", "train_loss", "val_loss", "val_acc", "lr"])
    frame.to_csv(path, index=False, float_format="%.10g")
    return Path(path)


def fit(train: Sequence[Segment], val: Sequence[Segment], net: CrossStateNet,
        train_config: Optional[TrainConfig] = None, loss_config: Optional[LossConfig] = None,
        out_dir=None) -> FitResult:
    """Functional form of Trainer.fit"""
    return Trainer(net, train_config, loss_config).fit(train, val, out_dir)
