"""Training loop with early stopping, evaluation metrics, k-fold CV and greedy tuning."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .data import AugmentConfig, Dataset, kfold_split, make_batches
from .errors import ConfigError, InputError, NumericError, TrainingDiverged
from .layers import Mode
from .model import DAMAGE, Model, build, predict_labels
from .optim import SGD, cross_entropy, l2_penalty, make_rng

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    batch_size: int = 64
    lr: float = 0.001
    momentum: float = 0.9
    l2_lambda: float = 0.001
    max_epochs: int = 50
    patience: int = 5
    seed: int = 0
    augment: bool = False
    batchnorm: bool = False
    dropout: bool = False
    weight_decay: bool = False
    dropout_rate: float = 0.5
    threshold: float = 0.5
    augment_config: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.lr <= 0:
            raise ConfigError("lr must be > 0")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must be in [0, 1)")
        if self.l2_lambda < 0:
            raise ConfigError("lambda must be >= 0")
        if self.max_epochs < 1:
            raise ConfigError("max_epochs must be >= 1")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if not 0 <= self.dropout_rate < 1:
            raise ConfigError("dropout_rate must be in [0, 1)")

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["augment_config"] = dataclasses.asdict(self.augment_config)
        return d


# early stopping


class EarlyStopping:
    """Stop after ``patience`` consecutive epochs without a strict drop in the monitored loss."""

    def __init__(self, patience: int = 5):
        if patience < 1:
            raise ConfigError("patience must be >= 1")
        self.patience = patience
        self.best = math.inf
        self.best_epoch = None
        self.wait = 0

    def update(self, loss: float, epoch: int) -> bool:
        """Record one epoch; returns True when it is the new best."""
        if loss < self.best:
            self.best = loss
            self.best_epoch = epoch
            self.wait = 0
            return True
        self.wait += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.wait >= self.patience


@dataclass
class TrainHistory:
    train_loss: list = field(default_factory=list)
    train_acc: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    val_acc: list = field(default_factory=list)
    best_epoch: int | None = None
    stop_reason: str = ""

    @property
    def epochs(self) -> int:
        return len(self.val_loss)

    def rows(self):
        for i in range(self.epochs):
            yield {
                "epoch": i + 1,
                "train_loss": self.train_loss[i],
                "train_acc": self.train_acc[i],
                "val_loss": self.val_loss[i],
                "val_acc": self.val_acc[i],
            }

    def to_dict(self) -> dict:
        return {"epochs": list(self.rows()), "best_epoch": self.best_epoch, "stop_reason": self.stop_reason}

    def summary(self) -> dict:
        best = self.best_epoch
        return {
            "epochs_run": self.epochs,
            "best_epoch": best,
            "best_val_loss": self.val_loss[best - 1] if best else None,
            "best_val_acc": self.val_acc[best - 1] if best else None,
            "stop_reason": self.stop_reason,
        }

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["epoch", "train_loss", "train_acc", "val_loss", "val_acc"])
            w.writeheader()
            for row in self.rows():
                w.writerow({k: (f"{v:.10g}" if isinstance(v, float) else v) for k, v in row.items()})

    def write_json(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))


def _model_dtype(model: Model):
    params = model.parameters()
    return next(iter(params.values())).dtype if params else np.float32


def dataset_loss(model: Model, dataset: Dataset, batch_size: int = 256, threshold: float = 0.5) -> tuple[float, float]:
    """Mean cross-entropy and accuracy of an infer-mode pass."""
    if len(dataset) == 0:
        raise InputError("cannot score an empty dataset")
    dtype = _model_dtype(model)
    total_loss = 0.0
    correct = 0
    for batch in make_batches(dataset, batch_size, dtype=dtype):
        probs = model.forward(batch.images, Mode.INFER)
        loss, _ = cross_entropy(probs, batch.one_hot)
        total_loss += loss * len(batch.labels)
        correct += int(np.sum(predict_labels(probs, threshold) == batch.labels))
    return total_loss / len(dataset), correct / len(dataset)


def train(
    model: Model,
    train_set: Dataset,
    val_set: Dataset,
    config: TrainConfig,
    on_epoch_end: Callable | None = None,
    val_fn: Callable | None = None,
) -> tuple[Model, TrainHistory]:
    """Mini-batch SGD with momentum, early stopping on validation loss, best-weight restore.

    ``val_fn(model) -> (loss, accuracy)`` replaces the validation pass
    (used to drive the stopping rule from canned losses);
    ``on_epoch_end(epoch, model, history)`` is called after each epoch.
    """
    if len(train_set) == 0 or len(val_set) == 0:
        raise InputError("training and validation sets must be non-empty")
    val_fn = val_fn or (lambda m: dataset_loss(m, val_set, threshold=config.threshold))
    shuffle_rng = make_rng([config.seed, 1])
    opt = SGD(config.lr, config.momentum)
    stopper = EarlyStopping(config.patience)
    history = TrainHistory()
    decayed = model.decayed_parameter_names() if config.weight_decay else []
    dtype = _model_dtype(model)
    augment_config = config.augment_config if config.augment else None
    best_state = model.state_dict()
    params = model.parameters()

    for epoch in range(1, config.max_epochs + 1):
        seen = 0
        loss_sum = 0.0
        correct = 0
        batches = make_batches(
            train_set, config.batch_size, True, shuffle_rng, augment_config, epoch, config.seed, dtype
        )
        for batch in batches:
            try:
                probs = model.forward(batch.images, Mode.TRAIN)
            except NumericError as exc:
                history.stop_reason = "diverged"
                raise TrainingDiverged(
                    f"non-finite logits at epoch {epoch}: {exc}", last_state=best_state, history=history
                ) from exc
            loss, grad_logits = cross_entropy(probs, batch.one_hot)
            grads = model.backward(grad_logits)
            if decayed:
                penalty, extra = l2_penalty([params[n] for n in decayed], config.l2_lambda)
                loss += penalty
                for name, g in zip(decayed, extra):
                    grads[name] = grads[name] + g
            if not math.isfinite(loss):
                history.stop_reason = "diverged"
                raise TrainingDiverged(
                    f"non-finite training loss at epoch {epoch}; last finite weights attached",
                    last_state=best_state,
                    history=history,
                )
            opt.step(params, grads)
            n = len(batch.labels)
            seen += n
            loss_sum += loss * n
            correct += int(np.sum(predict_labels(probs, config.threshold) == batch.labels))

        try:
            val_loss, val_acc = val_fn(model)
        except NumericError as exc:
            history.stop_reason = "diverged"
            raise TrainingDiverged(f"non-finite validation logits at epoch {epoch}", best_state, history) from exc
        history.train_loss.append(loss_sum / seen)
        history.train_acc.append(correct / seen)
        history.val_loss.append(float(val_loss))
        history.val_acc.append(float(val_acc))
        log.info(
            "epoch %d: loss %.4f acc %.4f val_loss %.4f val_acc %.4f",
            epoch, loss_sum / seen, correct / seen, val_loss, val_acc,
        )  # fmt: skip
        if not math.isfinite(val_loss):
            history.stop_reason = "diverged"
            raise TrainingDiverged(
                f"non-finite validation loss at epoch {epoch}", last_state=best_state, history=history
            )
        if stopper.update(val_loss, epoch):
            best_state = model.state_dict()
        if on_epoch_end is not None:
            on_epoch_end(epoch, model, history)
        if stopper.should_stop:
            history.stop_reason = f"early stopping: no val-loss improvement for {config.patience} epochs"
            break
    else:
        history.stop_reason = "max_epochs reached"

    history.best_epoch = stopper.best_epoch
    model.load_state_dict(best_state)
    model.metadata["history"] = history.summary()
    return model, history


# evaluation


@dataclass(frozen=True)
class ConfusionMatrix:
    """2x2 tally with Flooded/Damaged as the positive class."""

    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise InputError("confusion-matrix counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    @classmethod
    def from_labels(cls, y_true, y_pred) -> "ConfusionMatrix":
        y_true = np.asarray(y_true)
        y_pred = np.asarray(y_pred)
        pos_t = y_true == DAMAGE
        pos_p = y_pred == DAMAGE
        return cls(
            tp=int(np.sum(pos_t & pos_p)),
            fp=int(np.sum(~pos_t & pos_p)),
            fn=int(np.sum(pos_t & ~pos_p)),
            tn=int(np.sum(~pos_t & ~pos_p)),
        )

    def to_dict(self) -> dict:
        return {"tp": self.tp, "fp": self.fp, "fn": self.fn, "tn": self.tn}

    def render(self) -> str:
        """Raw counts next to the row-normalized matrix; rows are true classes, T = Flooded/Damaged."""
        rows = [("T", self.tp, self.fn), ("F", self.fp, self.tn)]
        lines = ["true\\pred        T       F  |      T       F"]
        for name, a, b in rows:
            s = a + b
            na, nb = (f"{a / s:.4f}", f"{b / s:.4f}") if s else ("-", "-")
            lines.append(f"{name:<9} {a:>7} {b:>7}  | {na:>6}  {nb:>6}")
        return "\n".join(lines)


def evaluate(model, dataset: Dataset, batch_size: int = 256, threshold: float = 0.5) -> ConfusionMatrix:
    if len(dataset) == 0:
        raise InputError("cannot build a confusion matrix from an empty dataset")
    preds = model.predict(dataset.images, threshold)
    return ConfusionMatrix.from_labels(dataset.labels, preds)


METRIC_NAMES = ("accuracy", "f1", "tpr", "tnr", "ppv", "npv")


def _ratio(num: int, den: int) -> float | None:
    return num / den if den else None


@dataclass(frozen=True)
class MetricsReport:
    """Confusion-matrix metrics; ``None`` marks a 0/0 ratio."""

    accuracy: float
    tpr: float | None
    tnr: float | None
    ppv: float | None
    npv: float | None
    f1: float | None

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def metrics(cm: ConfusionMatrix) -> MetricsReport:
    if cm.total <= 0:
        raise InputError("metrics need a non-empty confusion matrix")
    tpr = _ratio(cm.tp, cm.tp + cm.fn)
    ppv = _ratio(cm.tp, cm.tp + cm.fp)
    f1 = None
    if tpr is not None and ppv is not None and ppv + tpr > 0:
        f1 = 2 * ppv * tpr / (ppv + tpr)
    return MetricsReport(
        accuracy=(cm.tp + cm.tn) / cm.total,
        tpr=tpr,
        tnr=_ratio(cm.tn, cm.tn + cm.fp),
        ppv=ppv,
        npv=_ratio(cm.tn, cm.tn + cm.fn),
        f1=f1,
    )


def write_metrics(cm: ConfusionMatrix, report: MetricsReport, out_dir, stem: str = "metrics", extra=None) -> dict:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    row = {**cm.to_dict(), **report.to_dict()}
    with open(out_dir / f"{stem}.csv", "w", newline="") as fh:
        fields = ["tp", "fp", "fn", "tn", "accuracy", "tpr", "tnr", "ppv", "npv", "f1"]
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        w.writerow({k: ("" if row[k] is None else row[k]) for k in fields})
    payload = {"confusion_matrix": cm.to_dict(), "metrics": report.to_dict(), **(extra or {})}
    (out_dir / f"{stem}.json").write_text(json.dumps(payload, indent=2))
    (out_dir / "confusion_matrix.txt").write_text(cm.render() + "\n")
    return payload


# cross-validation


@dataclass
class CVReport:
    folds: list
    mean: dict
    std: dict
    std_kind: str = "population"

    def format_row(self, name: str) -> str:
        m, s = self.mean.get(name), self.std.get(name)
        if m is None:
            return "n/a"
        if name == "accuracy":
            return f"{m * 100:.2f}% ({s * 100:.4g}%)"
        return f"{m:.4f} ({s:.4g})"

    def table(self) -> str:
        labels = {
            "accuracy": "Accuracy",
            "f1": "F1 Score",
            "tpr": "TPR/Recall",
            "tnr": "TNR/Specificity",
            "ppv": "PPV/Precision",
            "npv": "NPV",
        }
        width = max(len(v) for v in labels.values())
        lines = [f"{'Measurement':<{width}}  mean (std)"]
        lines += [f"{labels[k]:<{width}}  {self.format_row(k)}" for k in METRIC_NAMES]
        lines.append(f"({len(self.folds)} folds; standard deviation is the {self.std_kind} std)")
        return "\n".join(lines)

    def to_dict(self) -> dict:
        return {
            "folds": self.folds,
            "mean": self.mean,
            "std": self.std,
            "std_kind": self.std_kind,
            "formatted": {k: self.format_row(k) for k in METRIC_NAMES},
        }


def aggregate(reports: Sequence[MetricsReport]) -> tuple[dict, dict]:
    mean, std = {}, {}
    for name in METRIC_NAMES:
        vals = [getattr(r, name) for r in reports if getattr(r, name) is not None]
        mean[name] = float(np.mean(vals)) if vals else None
        std[name] = float(np.std(vals)) if vals else None
    return mean, std


def cross_validate(
    arch_id,
    dataset: Dataset,
    k: int,
    config: TrainConfig,
    model_factory: Callable[[int], Model] | None = None,
    train_fn: Callable = train,
) -> CVReport:
    """k-fold CV: fold ``i`` trains a fresh model seeded ``config.seed + i`` and is scored on held-out fold ``i``."""
    folds = kfold_split(dataset, k, make_rng(config.seed))
    if model_factory is None:

        def model_factory(seed):
            return build(
                arch_id,
                dataset.image_shape,
                len(dataset.class_names),
                seed=seed,
                batchnorm=config.batchnorm,
                dropout=config.dropout,
                dropout_rate=config.dropout_rate,
            )

    results, reports = [], []
    for i, (train_idx, val_idx) in enumerate(folds):
        fold_seed = config.seed + i
        train_part = dataset.subset(train_idx, "train")
        val_part = dataset.subset(val_idx, "validation")
        model = model_factory(fold_seed)
        model, history = train_fn(model, train_part, val_part, config.replace(seed=fold_seed))
        cm = evaluate(model, val_part, threshold=config.threshold)
        rep = metrics(cm)
        reports.append(rep)
        results.append(
            {
                "fold": i,
                "seed": fold_seed,
                "train_size": len(train_idx),
                "val_size": len(val_idx),
                "confusion_matrix": cm.to_dict(),
                "metrics": rep.to_dict(),
                "history": history.summary() if history is not None else None,
            }
        )
        log.info("fold %d/%d: accuracy %.4f", i + 1, k, rep.accuracy)
    mean, std = aggregate(reports)
    return CVReport(results, mean, std)


# greedy tuning

_ALIASES = {"lambda": "l2_lambda", "learning_rate": "lr"}


def greedy_tune(
    grids: Mapping[str, Sequence] | Sequence[tuple[str, Sequence]],
    config: TrainConfig,
    objective: Callable[[TrainConfig], float],
) -> tuple[TrainConfig, list[dict]]:
    """Coordinate-wise search: tune each dimension in order with the others at their incumbents.

    ``objective`` returns a validation score (higher is better).  Ties keep
    the earlier candidate.  The number of trials is the sum of grid sizes.
    """
    items = list(grids.items()) if isinstance(grids, Mapping) else list(grids)
    field_names = {f.name for f in dataclasses.fields(TrainConfig)}
    for name, candidates in items:
        if _ALIASES.get(name, name) not in field_names:
            raise ConfigError(f"unknown hyperparameter {name!r}")
        if len(candidates) < 1:
            raise ConfigError(f"hyperparameter {name!r} has no candidates")
    incumbent = config
    log_rows = []
    for name, candidates in items:
        attr = _ALIASES.get(name, name)
        best_value, best_score = None, -math.inf
        for value in candidates:
            trial_cfg = incumbent.replace(**{attr: value})
            score = float(objective(trial_cfg))
            log_rows.append(
                {
                    "trial": len(log_rows) + 1,
                    "dimension": name,
                    "value": value,
                    "score": score,
                    "config": {n: getattr(trial_cfg, _ALIASES.get(n, n)) for n, _ in items},
                }
            )
            if score > best_score:
                best_value, best_score = value, score
        incumbent = incumbent.replace(**{attr: best_value})
    return incumbent, log_rows


def holdout_objective(arch_id, train_set: Dataset, val_set: Dataset) -> Callable[[TrainConfig], float]:
    """Objective for :func:`greedy_tune`: validation accuracy of a freshly trained model."""

    def objective(cfg: TrainConfig) -> float:
        model = build(
            arch_id,
            train_set.image_shape,
            len(train_set.class_names),
            seed=cfg.seed,
            batchnorm=cfg.batchnorm,
            dropout=cfg.dropout,
            dropout_rate=cfg.dropout_rate,
        )
        model, _ = train(model, train_set, val_set, cfg)
        return metrics(evaluate(model, val_set, threshold=cfg.threshold)).accuracy

    return objective

