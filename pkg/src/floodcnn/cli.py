"""Command-line entry point.

Usage: ``floodcnn COMMAND [--config FILE] [flags]`` where COMMAND is one of
train, evaluate, predict, cv, tune, param-count, gradcheck.  Settings come
from a flat ``key = value`` file (``#`` starts a comment) and flags, with
flags winning.  Known keys:

    arch data val test checkpoint out seed batch_size lr momentum lambda
    patience max_epochs k augment batchnorm dropout dropout_rate
    weight_decay resize input_size threshold grid trials
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import gradcheck
from .data import IMAGE_SUFFIXES, Dataset, _read_image, load_dataset
from .errors import ConfigError, FloodCNNError, TrainingDiverged
from .model import ARCH_IDS, CLASS_NAMES, DAMAGE, build, load_checkpoint, parameter_table, predict_labels, save_checkpoint
from .trainer import TrainConfig, cross_validate, evaluate, greedy_tune, holdout_objective, metrics, train, write_metrics

log = logging.getLogger("floodcnn")

COMMANDS = ("train", "evaluate", "predict", "cv", "tune", "param-count", "gradcheck")


@dataclass
class RunConfig:
    command: str = "train"
    arch: str = "vgg3block"
    data: str | None = None
    val: str | None = None
    test: str | None = None
    checkpoint: str | None = None
    out: str = "runs"
    seed: int = 0
    batch_size: int = 64
    lr: float = 0.001
    momentum: float = 0.9
    l2_lambda: float = 0.001
    patience: int = 5
    max_epochs: int = 50
    k: int = 5
    augment: bool = False
    batchnorm: bool = False
    dropout: bool = False
    dropout_rate: float = 0.5
    weight_decay: bool = False
    resize: str | None = None
    input_size: int = 128
    threshold: float = 0.5
    grid: str = "lr=0.01,0.001;lambda=0.001,0.0001"
    trials: int = 20
    formats: list = field(default_factory=lambda: ["csv", "json"])

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            batch_size=self.batch_size,
            lr=self.lr,
            momentum=self.momentum,
            l2_lambda=self.l2_lambda,
            max_epochs=self.max_epochs,
            patience=self.patience,
            seed=self.seed,
            augment=self.augment,
            batchnorm=self.batchnorm,
            dropout=self.dropout,
            weight_decay=self.weight_decay,
            dropout_rate=self.dropout_rate,
            threshold=self.threshold,
        )

    @property
    def image_shape(self):
        return (self.input_size, self.input_size, 3)


# config-file key -> RunConfig field
_KEY_FIELDS = {f.name: f.name for f in dataclasses.fields(RunConfig) if f.name not in ("command", "l2_lambda")}
_KEY_FIELDS["lambda"] = "l2_lambda"
_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(RunConfig)}


def _coerce(key: str, raw: str):
    """Parse a config-file value for ``key`` (a file key such as ``lambda``)."""
    kind = _FIELD_TYPES[_KEY_FIELDS[key]]
    text = raw.strip()
    try:
        if kind == "bool":
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        if kind == "list":
            return [t.strip() for t in text.split(",") if t.strip()]
        if kind == "str | None" and text.lower() in ("", "none"):
            return None
        return text
    except ValueError:
        raise ConfigError(f"config key '{key}': malformed value {raw!r}") from None


def read_config_file(path) -> dict:
    if not Path(path).is_file():
        raise ConfigError(f"config file {path} does not exist")
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in _KEY_FIELDS:
            raise ConfigError(f"{path}:{lineno}: unknown config key '{key}'")
        values[_KEY_FIELDS[key]] = _coerce(key, raw)
    return values


def parse_config(path=None, overrides: dict | None = None, command: str = "train") -> RunConfig:
    """Defaults, then the config file, then flag overrides (``None`` values are ignored)."""
    values = read_config_file(path) if path else {}
    file_keys = {v: k for k, v in _KEY_FIELDS.items()}
    for key, val in (overrides or {}).items():
        if val is None:
            continue
        name = _KEY_FIELDS.get(key, key)
        if name not in file_keys:
            raise ConfigError(f"unknown config key '{key}'")
        if isinstance(val, str):
            val = _coerce(file_keys[name], val)
        values[name] = val
    cfg = RunConfig(command=command, **values)
    if cfg.arch not in ARCH_IDS:
        raise ConfigError(f"config key 'arch': unknown architecture {cfg.arch!r}; expected one of {ARCH_IDS}")
    cfg.train_config()  # range checks
    return cfg


def _require(cfg: RunConfig, *keys):
    for key in keys:
        value = getattr(cfg, key)
        if value is None:
            raise ConfigError(f"'{cfg.command}' needs config key '{key}'")
        if key != "out" and not Path(value).exists():
            raise ConfigError(f"config key '{key}': path {value} does not exist")


def _checkpoint_path(cfg: RunConfig) -> Path:
    return Path(cfg.checkpoint) if cfg.checkpoint else Path(cfg.out) / "model.ckpt"


def _load(cfg: RunConfig, key: str) -> Dataset:
    return load_dataset(getattr(cfg, key), resize=cfg.resize, image_shape=cfg.image_shape, split=key)


def _write_json(path: Path, payload):
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _run_record(cfg: RunConfig, **extra) -> dict:
    cfg_dict = dataclasses.asdict(cfg)
    return {"config": cfg_dict, "seed": cfg.seed, **extra, "metadata": {"generated_at": time.strftime("%Y-%m-%dT%H:%M:%S")}}


def cmd_train(cfg: RunConfig, out: Path) -> int:
    _require(cfg, "data", "val")
    train_set, val_set = _load(cfg, "data"), _load(cfg, "val")
    tc = cfg.train_config()
    model = build(cfg.arch, cfg.image_shape, seed=cfg.seed, batchnorm=cfg.batchnorm, dropout=cfg.dropout, dropout_rate=cfg.dropout_rate)
    ckpt = _checkpoint_path(cfg)
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    try:
        model, history = train(model, train_set, val_set, tc)
    except TrainingDiverged as exc:
        partial = ckpt.with_suffix(".partial.ckpt")
        if exc.last_state is not None:
            model.load_state_dict(exc.last_state)
            save_checkpoint(model, partial, cfg.seed, {"stop_reason": "diverged"})
        print(f"error: {exc}; last finite weights written to {partial} (PARTIAL)", file=sys.stderr)
        return 1
    save_checkpoint(model, ckpt, cfg.seed, history.summary())
    if "csv" in cfg.formats:
        history.write_csv(out / "history.csv")
    if "json" in cfg.formats:
        history.write_json(out / "history.json")
    val_report = metrics(evaluate(model, val_set, threshold=cfg.threshold))
    _write_json(out / "run.json", _run_record(cfg, history=history.summary(), val_metrics=val_report.to_dict()))
    print(f"trained {cfg.arch}: {history.epochs} epochs, best epoch {history.best_epoch}, val accuracy {val_report.accuracy:.4f}")
    print(f"checkpoint: {ckpt}")
    return 0


def cmd_evaluate(cfg: RunConfig, out: Path) -> int:
    _require(cfg, "checkpoint")
    key = "test" if cfg.test else "data"
    _require(cfg, key)
    model = load_checkpoint(cfg.checkpoint)
    dataset = load_dataset(getattr(cfg, key), resize=cfg.resize, image_shape=model.input_shape, split=key)
    cm = evaluate(model, dataset, threshold=cfg.threshold)
    report = metrics(cm)
    write_metrics(cm, report, out, extra={"seed": cfg.seed, "checkpoint": str(cfg.checkpoint), "dataset": getattr(cfg, key)})
    print(cm.render())
    for name, value in report.to_dict().items():
        print(f"{name:>9}: {'n/a' if value is None else f'{value:.4f}'}")
    return 0


def _images_for_prediction(root: Path, cfg: RunConfig, shape) -> tuple[np.ndarray, list[str]]:
    if all((root / name).is_dir() for name in CLASS_NAMES):
        ds = load_dataset(root, resize=cfg.resize, image_shape=shape)
        return ds.images, ds.paths
    files = sorted(p for p in root.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    images = np.stack([_read_image(p, shape, cfg.resize) for p in files]) if files else np.zeros((0, *shape), np.float32)
    return images, [str(p) for p in files]


def cmd_predict(cfg: RunConfig, out: Path) -> int:
    _require(cfg, "checkpoint", "data")
    model = load_checkpoint(cfg.checkpoint)
    images, paths = _images_for_prediction(Path(cfg.data), cfg, model.input_shape)
    probs = model.predict_proba(images) if len(images) else np.zeros((0, 2))
    labels = predict_labels(probs, cfg.threshold) if len(images) else []
    with open(out / "predictions.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["path", "p_damage", "label"])
        for path, p, lab in zip(paths, probs, labels):
            w.writerow([path, f"{p[DAMAGE]:.8f}", CLASS_NAMES[lab]])
    print(f"wrote {len(paths)} predictions to {out / 'predictions.csv'}")
    return 0


def cmd_cv(cfg: RunConfig, out: Path) -> int:
    _require(cfg, "data")
    parts = [_load(cfg, "data")]
    if cfg.val:
        _require(cfg, "val")
        parts.append(_load(cfg, "val"))
    combined = Dataset.concat(parts, "combined") if len(parts) > 1 else parts[0]
    report = cross_validate(cfg.arch, combined, cfg.k, cfg.train_config())
    (out / "cv_report.txt").write_text(report.table() + "\n")
    _write_json(out / "cv_report.json", {**report.to_dict(), "seed": cfg.seed, "arch": cfg.arch, "k": cfg.k})
    print(report.table())
    return 0


def parse_grid(text: str) -> list[tuple[str, list]]:
    """``"lr=0.01,0.001; lambda=0.001,0.0001"`` -> ordered (name, candidates) pairs."""
    dims = []
    for part in text.split(";"):
        part = part.strip()
        if not part:
            continue
        if "=" not in part:
            raise ConfigError(f"config key 'grid': expected name=v1,v2,..., got {part!r}")
        name, raw = (s.strip() for s in part.split("=", 1))
        if name not in _KEY_FIELDS:
            raise ConfigError(f"config key 'grid': unknown hyperparameter '{name}'")
        dims.append((name, [_coerce(name, v) for v in raw.split(",") if v.strip()]))
    if not dims:
        raise ConfigError("config key 'grid' is empty")
    return dims


def cmd_tune(cfg: RunConfig, out: Path) -> int:
    _require(cfg, "data", "val")
    grids = parse_grid(cfg.grid)
    train_set, val_set = _load(cfg, "data"), _load(cfg, "val")
    best, trials = greedy_tune(grids, cfg.train_config(), holdout_objective(cfg.arch, train_set, val_set))
    with open(out / "trials.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        names = [n for n, _ in grids]
        w.writerow(["trial", "dimension", "value", "score", *names])
        for t in trials:
            w.writerow([t["trial"], t["dimension"], t["value"], f"{t['score']:.6f}", *(t["config"][n] for n in names)])
    _write_json(out / "trials.json", trials)
    best_lines = [f"{n} = {getattr(best, 'l2_lambda' if n == 'lambda' else n)}" for n, _ in grids]
    (out / "best_config.txt").write_text("# greedy tuning result\n" + "\n".join(best_lines) + "\n")
    print("\n".join(best_lines))
    return 0


def cmd_param_count(cfg: RunConfig, out: Path | None) -> int:
    model = build(cfg.arch, cfg.image_shape, initialize=False, batchnorm=cfg.batchnorm, dropout=cfg.dropout)
    table = parameter_table(model)
    print(table)
    if out is not None:
        (out / f"param_count_{cfg.arch}.txt").write_text(table + "\n")
    return 0


def cmd_gradcheck(cfg: RunConfig, out: Path | None) -> int:
    worst = gradcheck.run(cfg.trials, cfg.seed)
    failed = False
    for kind, err in worst.items():
        ok = err <= gradcheck.TOLERANCE
        failed |= not ok
        print(f"{kind:<10} max relative error {err:.3e}  {'ok' if ok else 'FAIL'}")
    if out is not None:
        _write_json(out / "gradcheck.json", {"trials": cfg.trials, "seed": cfg.seed, "tolerance": gradcheck.TOLERANCE, "max_relative_error": worst})
    return 1 if failed else 0


HANDLERS = {
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "predict": cmd_predict,
    "cv": cmd_cv,
    "tune": cmd_tune,
    "param-count": cmd_param_count,
    "gradcheck": cmd_gradcheck,
}


def dispatch(cfg: RunConfig, out_given: bool = True) -> int:
    out = Path(cfg.out)
    if cfg.command in ("param-count", "gradcheck") and not out_given:
        return HANDLERS[cfg.command](cfg, None)
    out.mkdir(parents=True, exist_ok=True)
    return HANDLERS[cfg.command](cfg, out)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="floodcnn", description="CNN damage classifier for post-hurricane imagery")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", help="key = value settings file")
    parser.add_argument("-v", "--verbose", action="store_true")
    add = parser.add_argument
    add("--arch", choices=ARCH_IDS)
    for flag in ("data", "val", "test", "checkpoint", "out", "resize", "grid"):
        add(f"--{flag}")
    add("--seed", type=int)
    add("--batch-size", type=int, dest="batch_size")
    add("--lr", type=float)
    add("--momentum", type=float)
    add("--lambda", type=float, dest="l2_lambda")
    add("--patience", type=int)
    add("--max-epochs", type=int, dest="max_epochs")
    add("--k", type=int)
    add("--dropout-rate", type=float, dest="dropout_rate")
    add("--input-size", type=int, dest="input_size")
    add("--threshold", type=float)
    add("--trials", type=int)
    for flag in ("augment", "batchnorm", "dropout", "weight-decay"):
        add(f"--{flag}", action=argparse.BooleanOptionalAction, default=None, dest=flag.replace("-", "_"))
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    overrides = {k: v for k, v in vars(args).items() if k not in ("command", "config", "verbose")}
    try:
        cfg = parse_config(args.config, overrides, args.command)
        out_given = args.out is not None or (args.config is not None and "out" in read_config_file(args.config))
        return dispatch(cfg, out_given)
    except FloodCNNError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
