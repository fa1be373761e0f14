"""Optimisation loop: Adam, learning-rate schedules, checkpoints, evaluation."""

from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from .autodiff import NumericError, Tensor, backward, no_grad, precision
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .data import ArrayDataset
from .losses import LossConfig, PredictionPair, combined_loss
from .metrics import MetricsReport, binarize, metrics
from .models import Model
from .stats import PairedVolumes, lesion_volume

SCHEDULERS = ("reduce_on_plateau", "cosine_annealing")


class TrainingDivergedError(NumericError):
    pass


# ---------------------------------------------------------------------------
# optimiser


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: dict[str, Tensor], **kw) -> "OptimizerState":
        return cls({k: np.zeros_like(p.data) for k, p in params.items()},
                   {k: np.zeros_like(p.data) for k, p in params.items()}, **kw)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "OptimizerState":
        return cls(**d)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: OptimizerState,
              lr: float, weight_decay: float = 0.0) -> None:
    """Bias-corrected Adam update in place; weight decay is added to the gradient."""
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for parameter {name}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1 ** t
    c2 = 1 - b2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if weight_decay:
            g = g + weight_decay * p.data
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        if lr:
            p.data = p.data - (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.data.dtype)


# ---------------------------------------------------------------------------
# schedules


@dataclass
class ReduceLROnPlateau:
    """Cut the rate by ``factor`` after ``patience`` epochs without improvement.

    An epoch improves when the monitored loss drops more than ``threshold``
    below the best seen so far. The bad-epoch count resets after each cut.
    """

    lr: float
    factor: float = 0.1
    patience: int = 5
    threshold: float = 1e-4
    min_lr: float = 1e-7
    best: float = math.inf
    bad_epochs: int = 0

    def step(self, loss: float) -> float:
        if loss < self.best - self.threshold:
            self.best = loss
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
        if self.bad_epochs >= self.patience:
            self.lr = max(self.lr * self.factor, self.min_lr)
            self.bad_epochs = 0
        return self.lr

    def to_dict(self) -> dict:
        d = asdict(self)
        d["best"] = None if math.isinf(self.best) else self.best
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ReduceLROnPlateau":
        d = dict(d)
        d["best"] = math.inf if d["best"] is None else d["best"]
        return cls(**d)


def cosine_annealing(epoch: int, total_epochs: int, lr0: float, lr_min: float = 0.0) -> float:
    if not 0 <= epoch <= total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {total_epochs}]")
    return lr_min + 0.5 * (lr0 - lr_min) * (1 + math.cos(math.pi * epoch / total_epochs))


# ---------------------------------------------------------------------------
# configuration and records


@dataclass
class TrainConfig:
    """Optimisation settings; ``None`` fields take variant-dependent defaults.

    Defaults: batch 32 (16 for unettransformer2d, 4 in 3-D), 50 epochs in
    2-D and a 100 epoch cap in 3-D, weight decay 0 in 2-D and 1e-4 in 3-D.
    """

    lr: float = 1e-3
    batch_size: int | None = None
    epochs: int | None = None
    early_stop_patience: int | None = None
    scheduler: str = "reduce_on_plateau"
    weight_decay: float | None = None
    gamma: float = 0.9
    seed: int = 0
    threshold: float = 0.5
    plateau_factor: float = 0.1
    plateau_patience: int = 5
    plateau_threshold: float = 1e-4
    min_lr: float = 1e-7
    cosine_min_lr: float = 0.0
    target_train_dice: float | None = None

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.scheduler not in SCHEDULERS:
            raise ValueError(f"scheduler must be one of {', '.join(SCHEDULERS)}")

    def resolved(self, variant: str) -> "TrainConfig":
        is_3d = variant.endswith("3d")
        d = asdict(self)
        if d["batch_size"] is None:
            d["batch_size"] = 4 if is_3d else (16 if variant == "unettransformer2d" else 32)
        if d["epochs"] is None:
            d["epochs"] = 100 if is_3d else 50
        if d["weight_decay"] is None:
            d["weight_decay"] = 1e-4 if is_3d else 0.0
        return TrainConfig(**d)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training options: {', '.join(sorted(unknown))}")
        return cls(**d)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_dice: float
    lr: float
    train_dice: float | None = None
    wall_time: float = 0.0


RECORD_COLUMNS = ("epoch", "train_loss", "val_loss", "val_dice", "lr", "train_dice")


@dataclass
class TrainRecord:
    epochs: list[EpochRecord] = field(default_factory=list)
    stopped_early: bool = False

    def append(self, r: EpochRecord) -> None:
        if self.epochs and r.epoch <= self.epochs[-1].epoch:
            raise ValueError("epoch indices must increase")
        if r.lr <= 0:
            raise ValueError("learning rate must be positive")
        self.epochs.append(r)

    def to_csv(self, include_wall_time: bool = False) -> str:
        cols = RECORD_COLUMNS + (("wall_time",) if include_wall_time else ())
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        for r in self.epochs:
            w.writerow(["" if getattr(r, c) is None else repr(getattr(r, c)) for c in cols])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "TrainRecord":
        rec = cls()
        for row in csv.DictReader(io.StringIO(text)):
            rec.append(EpochRecord(
                int(row["epoch"]), float(row["train_loss"]), float(row["val_loss"]), float(row["val_dice"]),
                float(row["lr"]), float(row["train_dice"]) if row.get("train_dice") else None,
                float(row.get("wall_time") or 0.0)))
        return rec


# ---------------------------------------------------------------------------
# evaluation


def predict(model: Model, images: np.ndarray, batch_size: int = 8) -> np.ndarray:
    model.eval()
    out = []
    with no_grad():
        for i in range(0, len(images), batch_size):
            out.append(model(Tensor(images[i:i + batch_size])).data)
    return np.concatenate(out)


def _scores(probs: np.ndarray, ds: ArrayDataset, threshold: float) -> MetricsReport:
    report = MetricsReport()
    for i, sid in enumerate(ds.ids):
        report.add(sid, metrics(binarize(probs[i], threshold), ds.masks[i]))
    return report


def evaluate(model: Model, ds: ArrayDataset, threshold: float = 0.5, batch_size: int = 8) -> MetricsReport:
    """Per-sample Dice, IoU, precision and recall with dropout off and frozen norms.

    For volumetric data ``report.volumes`` holds predicted and actual lesion
    volumes per subject.
    """
    with precision("float32"):
        probs = predict(model, ds.images, batch_size)
    report = _scores(probs, ds, threshold)
    if model.spec.is_3d:
        actual, predicted = [], []
        for i in range(len(ds)):
            spacing = ds.spacing[i] if ds.spacing else (1.0, 1.0, 1.0)
            actual.append(lesion_volume(ds.masks[i], spacing))
            predicted.append(lesion_volume(binarize(probs[i], threshold), spacing))
        report.volumes = PairedVolumes(ds.ids, actual, predicted)
    return report


# ---------------------------------------------------------------------------
# training loop


@dataclass
class _LoopState:
    opt: OptimizerState
    plateau: ReduceLROnPlateau
    rng: np.random.Generator
    epoch: int = 0
    best_dice: float = -1.0
    since_best: int = 0
    lr: float = 0.0


def _to_checkpoint(model: Model, st: _LoopState, record: TrainRecord, cfg: TrainConfig,
                   meta: dict | None = None) -> Checkpoint:
    return Checkpoint(
        model, st.opt.step, st.epoch,
        [{k: v for k, v in asdict(r).items() if k != "wall_time"} for r in record.epochs],
        st.opt.to_dict(), st.plateau.to_dict(), st.rng.bit_generator.state,
        {"best_dice": st.best_dice, "since_best": st.since_best, "lr": st.lr, "config": asdict(cfg),
         "stopped_early": record.stopped_early, "meta": meta or {}},
    )


def _restore(ckpt: Checkpoint, model: Model, cfg: TrainConfig) -> tuple[_LoopState, TrainRecord]:
    params = model.parameters()
    for name, t in ckpt.model.parameters().items():
        params[name].data = t.data.copy()
    bufs = model.buffers()
    for name, b in ckpt.model.buffers().items():
        np.copyto(bufs[name], b)
    rng = np.random.default_rng()
    rng.bit_generator.state = ckpt.rng_state
    opt = OptimizerState.from_dict(ckpt.optimizer)
    opt.m = {k: v.copy() for k, v in opt.m.items()}
    opt.v = {k: v.copy() for k, v in opt.v.items()}
    st = _LoopState(opt, ReduceLROnPlateau.from_dict(ckpt.scheduler), rng, ckpt.epoch,
                    ckpt.extra["best_dice"], ckpt.extra["since_best"], ckpt.extra["lr"])
    record = TrainRecord([EpochRecord(**r) for r in ckpt.history], ckpt.extra.get("stopped_early", False))
    return st, record


def _mean_loss(model: Model, ds: ArrayDataset, loss_cfg: LossConfig, batch_size: int) -> tuple[float, np.ndarray]:
    losses, weights, probs = [], [], []
    model.eval()
    with no_grad():
        for i in range(0, len(ds), batch_size):
            p = model(Tensor(ds.images[i:i + batch_size]))
            losses.append(combined_loss(PredictionPair(p, ds.masks[i:i + batch_size]), loss_cfg).item())
            weights.append(p.shape[0])
            probs.append(p.data)
    return float(np.average(losses, weights=weights)), np.concatenate(probs)


def train(model: Model, train_ds: ArrayDataset, val_ds: ArrayDataset, cfg: TrainConfig = TrainConfig(),
          run_dir=None, resume=None, log: Callable[[str], None] | None = None,
          meta: dict | None = None) -> tuple[Model, TrainRecord]:
    """Fit ``model`` in float32 and return it with the per-epoch record.

    Each epoch shuffles the training set from the seeded stream, takes Adam
    steps on the combined loss, validates, updates the schedule and, when
    ``run_dir`` is given, writes ``last.ckpt`` and ``best.ckpt`` (best
    validation Dice). ``resume`` names a checkpoint to continue from; the
    continuation is bit-identical to an uninterrupted run. ``meta`` is stored
    verbatim in every checkpoint.
    """
    cfg = cfg.resolved(model.spec.variant)
    if train_ds.images.ndim != model.spec.ndim + 2:
        raise ValueError(f"{model.spec.variant} expects {model.spec.ndim}-D samples, "
                         f"got arrays of shape {train_ds.images.shape}")
    if len(train_ds) == 0 or len(val_ds) == 0:
        raise ValueError("training and validation sets must be nonempty")
    loss_cfg = LossConfig(cfg.gamma)
    run_dir = Path(run_dir) if run_dir is not None else None
    with precision("float32"):
        model.astype(np.float32)
        params = model.parameters()
        if resume is not None:
            st, record = _restore(load_checkpoint(resume), model, cfg)
        else:
            st = _LoopState(OptimizerState.zeros_like(params),
                            ReduceLROnPlateau(cfg.lr, cfg.plateau_factor, cfg.plateau_patience,
                                              cfg.plateau_threshold, cfg.min_lr),
                            np.random.default_rng(cfg.seed), lr=cfg.lr)
            record = TrainRecord()
            if run_dir is not None:
                save_checkpoint(run_dir / "last.ckpt", _to_checkpoint(model, st, record, cfg, meta))
        last_good = _to_checkpoint(model, st, record, cfg, meta) if run_dir is not None else None

        while st.epoch < cfg.epochs and not record.stopped_early:
            t0 = time.perf_counter()
            epoch = st.epoch
            if cfg.scheduler == "cosine_annealing":
                st.lr = cosine_annealing(epoch, cfg.epochs, cfg.lr, cfg.cosine_min_lr)
            model.train()
            order = st.rng.permutation(len(train_ds))
            batch_losses, sizes = [], []
            for i in range(0, len(order), cfg.batch_size):
                idx = np.sort(order[i:i + cfg.batch_size])
                p = model(Tensor(train_ds.images[idx]), st.rng)
                loss = combined_loss(PredictionPair(p, train_ds.masks[idx]), loss_cfg)
                value = loss.item()
                grads = backward(loss) if math.isfinite(value) else None
                if grads is None or not all(np.isfinite(g).all() for g in grads.values()):
                    if run_dir is not None:
                        save_checkpoint(run_dir / "last.ckpt", last_good)
                    what = f"loss became {value}" if grads is None else "gradients became non-finite"
                    raise TrainingDivergedError(f"{what} at epoch {epoch}, step {st.opt.step}")
                adam_step(params, {k: grads[t] for k, t in params.items() if t in grads},
                          st.opt, st.lr, cfg.weight_decay)
                batch_losses.append(value)
                sizes.append(len(idx))
            train_loss = float(np.average(batch_losses, weights=sizes))

            val_loss, val_probs = _mean_loss(model, val_ds, loss_cfg, cfg.batch_size)
            val_dice = _scores(val_probs, val_ds, cfg.threshold).mean().dice
            train_dice = None
            if cfg.target_train_dice is not None:
                # overfitting runs often validate on the training set itself
                train_dice = val_dice if val_ds is train_ds else \
                    evaluate(model, train_ds, cfg.threshold, cfg.batch_size).mean().dice

            lr_used = st.lr
            if cfg.scheduler == "reduce_on_plateau":
                st.lr = st.plateau.step(val_loss)
            st.epoch = epoch + 1
            record.append(EpochRecord(epoch, train_loss, val_loss, val_dice, lr_used, train_dice,
                                      time.perf_counter() - t0))
            if log:
                extra = "" if train_dice is None else f" train_dice {train_dice:.4f}"
                log(f"epoch {epoch:3d} loss {train_loss:.4f} val_loss {val_loss:.4f} "
                    f"val_dice {val_dice:.4f} lr {lr_used:.3g}{extra}")

            improved = val_dice > st.best_dice
            if improved:
                st.best_dice = val_dice
                st.since_best = 0
            else:
                st.since_best += 1
            if cfg.early_stop_patience is not None and st.since_best >= cfg.early_stop_patience:
                record.stopped_early = True
            if train_dice is not None and train_dice >= cfg.target_train_dice:
                record.stopped_early = True
            if run_dir is not None:
                last_good = _to_checkpoint(model, st, record, cfg, meta)
                save_checkpoint(run_dir / "last.ckpt", last_good)
                if improved:
                    save_checkpoint(run_dir / "best.ckpt", last_good)
    if run_dir is not None:
        (run_dir / "train_record.csv").write_text(record.to_csv())
    return model, record
