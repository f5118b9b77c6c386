"""Training, evaluation and gradient checking for the MERA classifier."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff, checkpoint, mera
from .data import Dataset, load_any, resize_dataset
from .tensor import project_isometry, rng_stream

log = logging.getLogger(__name__)

METRICS_HEADER = ["epoch", "step", "loss", "train_acc", "val_acc", "wall_ms"]


class NumericalError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    train_data: str = ""
    test_data: str = ""
    resize: int = 0
    resize_mode: str = "downsample_mean"
    # model geometry and init
    block_size: int = 4
    bond_dim: int = 4
    num_classes: int = 0
    boundary: str = "open"
    embedding: str = "flatten_bias"
    weight_sharing: str = "none"
    layout: str = "offset"
    auto_pad: bool = False
    init_mode: str = "noise"
    init_std: float = 1e-4
    init_gain: bool = False
    # optimization
    lr: float = 1e-5
    optimizer: str = "sgd"
    batch_size: int = 32
    chunk_size: int = 0
    epochs: int = 1
    target_train_acc: float = 0.0  # stop early once reached; 0 disables
    seed: int = 0
    val_fraction: float = 0.0
    retract: bool = False
    precision: str = "float64"
    workers: int = 1
    single_thread: bool = False
    log_steps: bool = False
    out_dir: str = "runs/run"

    def validate(self):
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not 0 <= self.val_fraction < 1:
            raise ValueError("val_fraction must lie in [0, 1)")
        if self.optimizer not in ("sgd", "adaptive"):
            raise ValueError("optimizer must be sgd or adaptive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.precision not in ("float64", "float32"):
            raise ValueError("precision must be float64 or float32")
        return self

    def mera_config(self, height: int, width: int, num_classes: int) -> mera.MeraConfig:
        names = {f.name for f in fields(mera.MeraConfig)}
        kw = {k: v for k, v in asdict(self).items() if k in names}
        kw.update(image_height=height, image_width=width, num_classes=self.num_classes or num_classes)
        return mera.MeraConfig(**kw).validate()


def parse_config_text(text: str) -> dict:
    """``key = value`` lines; ``#`` starts a comment; keys may use dashes."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def coerce_config(raw: dict) -> dict:
    types = {f.name: f.type for f in fields(TrainConfig)}
    out = {}
    for key, value in raw.items():
        if key not in types:
            raise ValueError(f"unknown config key {key!r}")
        t = types[key]
        if not isinstance(value, str):
            out[key] = value
        elif t == "bool":
            out[key] = value.lower() in ("1", "true", "yes", "on")
        elif t == "int":
            out[key] = int(value)
        elif t == "float":
            out[key] = float(value)
        else:
            out[key] = value
    return out


# -- gradients -------------------------------------------------------------

def loss_and_grads(model: mera.MeraModel, images, labels, params=None, chunk_size: int = 0,
                   workers: int = 1) -> tuple[float, dict, np.ndarray]:
    """Mean cross-entropy over a batch, its gradient, and the logits.

    The batch is split into fixed-size chunks whose gradients are summed with
    a fixed pairwise tree, so the result does not depend on ``workers``.
    """
    params = model.params if params is None else params
    n = len(labels)
    size = chunk_size or n
    bounds = [(s, min(s + size, n)) for s in range(0, n, size)]

    def one(bound):
        s, e = bound
        tape, logits = mera.record(model, images[s:e], params)
        loss, g = autodiff.batch_softmax_cross_entropy(logits, labels[s:e])
        grads = autodiff.backward(tape, g * ((e - s) / n))
        return float(loss) * (e - s) / n, grads, logits

    if workers > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(one, bounds))
    else:
        parts = [one(b) for b in bounds]
    loss = math.fsum(p[0] for p in parts)
    grads = autodiff.tree_reduce([p[1] for p in parts])
    logits = np.concatenate([p[2] for p in parts])
    return loss, grads, logits


def predict_dataset(model: mera.MeraModel, images, chunk: int = 256) -> np.ndarray:
    preds = [mera.predict(model, images[s:s + chunk]) for s in range(0, len(images), chunk)]
    return np.concatenate(preds) if preds else np.zeros(0, dtype=int)


def accuracy(model: mera.MeraModel, ds: Dataset) -> float:
    if len(ds) == 0:
        return float("nan")
    return float(np.mean(predict_dataset(model, ds.images) == ds.labels))


def mean_loss(model: mera.MeraModel, ds: Dataset, chunk: int = 256) -> float:
    total = 0.0
    for s in range(0, len(ds), chunk):
        logits = mera.forward_logits(model, ds.images[s:s + chunk])
        loss, _ = autodiff.batch_softmax_cross_entropy(logits, ds.labels[s:s + chunk])
        total += float(loss) * len(logits)
    return total / len(ds)


def _diagnose(model: mera.MeraModel, grads: dict) -> str:
    for name, t in model.params.items():
        if not np.all(np.isfinite(t)):
            return f"parameter {name}"
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            return f"gradient of {name}"
    return "logits (all parameters finite)"


# -- training --------------------------------------------------------------

@dataclass
class RunResult:
    model: mera.MeraModel
    metrics: list[dict] = field(default_factory=list)
    out_dir: Path | None = None


def prepare_data(cfg: TrainConfig, spec: str) -> Dataset:
    ds = load_any(spec)
    if cfg.resize:
        ds = resize_dataset(ds, cfg.resize, cfg.resize_mode)
    return ds


def split_validation(ds: Dataset, fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    if fraction <= 0:
        return ds, ds.subset(np.zeros(0, dtype=int))
    order = rng_stream(seed, "split").permutation(len(ds))
    k = int(round(fraction * len(ds)))
    return ds.subset(np.sort(order[k:])), ds.subset(np.sort(order[:k]))


def train(cfg: TrainConfig, train_set: Dataset | None = None, model: mera.MeraModel | None = None,
          write: bool = True) -> RunResult:
    """Mini-batch gradient descent on the cross-entropy loss.

    Writes ``metrics.csv`` (one row before training and one per epoch),
    ``config.json`` and ``model.ckpt`` into ``cfg.out_dir``. In single-thread
    mode the wall-clock column is written as 0 so the file is reproducible
    byte for byte; timings then go to ``timing.csv``.
    """
    cfg.validate()
    if train_set is None:
        train_set = prepare_data(cfg, cfg.train_data)
    train_set, val_set = split_validation(train_set, cfg.val_fraction, cfg.seed)
    n, h, w = train_set.images.shape
    if model is None:
        model = mera.build(cfg.mera_config(h, w, train_set.num_classes), cfg.seed)
    mcfg = model.config
    if train_set.labels.max() >= mcfg.num_classes:
        raise ValueError("dataset labels exceed the model's class count")
    dtype = np.float32 if cfg.precision == "float32" else np.float64
    if dtype is np.float32:
        model.params = {k: v.astype(np.float32) for k, v in model.params.items()}
    images = train_set.images.astype(dtype)
    opt = autodiff.Adam(cfg.lr) if cfg.optimizer == "adaptive" else autodiff.SGD(cfg.lr)
    workers = 1 if cfg.single_thread else cfg.workers

    out_dir = Path(cfg.out_dir)
    if write:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "config.json").write_text(json.dumps(asdict(cfg), indent=1, sort_keys=True) + "\n")
    rows, timings = [], []
    t0 = time.perf_counter()

    def emit(epoch, step, loss):
        wall = int(round(1000 * (time.perf_counter() - t0)))
        row = {
            "epoch": epoch, "step": step, "loss": loss,
            "train_acc": accuracy(model, train_set),
            "val_acc": accuracy(model, val_set) if len(val_set) else float("nan"),
            "wall_ms": 0 if cfg.single_thread else wall,
        }
        rows.append(row)
        timings.append({"epoch": epoch, "step": step, "wall_ms": wall})
        log.info("epoch %d step %d loss %.6f train_acc %.4f val_acc %.4f", epoch, step, loss,
                 row["train_acc"], row["val_acc"])

    try:
        emit(0, 0, mean_loss(model, train_set))
    except FloatingPointError:
        raise NumericalError(f"non-finite logits before training: {_diagnose(model, {})}") from None
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        order = rng_stream(cfg.seed, "shuffle", epoch).permutation(n)
        losses = []
        for s in range(0, n, cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            try:
                loss, grads, _ = loss_and_grads(model, images[idx], train_set.labels[idx],
                                                chunk_size=cfg.chunk_size, workers=workers)
            except FloatingPointError:
                raise NumericalError(f"non-finite logits at epoch {epoch} step {step}: "
                                     f"{_diagnose(model, {})}") from None
            if not math.isfinite(loss) or not autodiff.all_finite(grads.values()):
                raise NumericalError(f"non-finite loss at epoch {epoch} step {step}: {_diagnose(model, grads)}")
            model.params = opt.step(model.params, grads)
            if cfg.retract:
                _retract(model)
            step += 1
            losses.append(loss * len(idx))
            if cfg.log_steps:
                log.info("step %d loss %.6f", step, loss)
        emit(epoch, step, math.fsum(losses) / n)
        if cfg.target_train_acc and rows[-1]["train_acc"] >= cfg.target_train_acc:
            break

    if write:
        write_metrics(out_dir / "metrics.csv", rows)
        write_metrics(out_dir / "timing.csv", timings, ["epoch", "step", "wall_ms"])
        checkpoint.save(model, out_dir / "model.ckpt", extra={"train_config": asdict(cfg)})
    return RunResult(model, rows, out_dir if write else None)


def _retract(model: mera.MeraModel):
    kinds = {n.ref: n.kind for n in model.nodes}
    for name, t in model.params.items():
        if kinds[name] in ("disentangler", "isometry"):
            model.params[name] = project_isometry(t, range(4))


def _fmt(v):
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


def write_metrics(path, rows, header=METRICS_HEADER):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(r[k]) for k in header])


# -- evaluation --------------------------------------------------------------

@dataclass
class EvalResult:
    accuracy: float
    confusion: np.ndarray
    predictions: np.ndarray


def evaluate(model: mera.MeraModel, ds: Dataset) -> EvalResult:
    if ds.images.shape[1:] not in ((model.config.image_height, model.config.image_width),
                                   (model.config.padded_size,) * 2):
        raise mera.GeometryError(
            f"dataset images {ds.images.shape[1:]} do not match model "
            f"{model.config.image_height}x{model.config.image_width}")
    preds = predict_dataset(model, ds.images)
    c = model.config.num_classes
    conf = np.zeros((c, c), dtype=np.int64)
    np.add.at(conf, (ds.labels, preds), 1)
    return EvalResult(float(np.mean(preds == ds.labels)), conf, preds)


def write_confusion(path, conf: np.ndarray):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["label"] + [f"pred_{j}" for j in range(conf.shape[1])])
        for i, row in enumerate(conf):
            w.writerow([i] + [int(v) for v in row])


# -- gradient check ----------------------------------------------------------

@dataclass
class GradcheckReport:
    max_rel_err: float
    worst: tuple
    num_params: int
    seconds: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tol


def gradcheck_config(size=8, block_size=2, bond_dim=2, num_classes=2, **kw) -> mera.MeraConfig:
    """Small well-scaled model for finite-difference checks.

    Constant-norm pixel features and gain-scaled isometries keep logits of
    order one, so gradient entries stay well above the finite-difference
    noise floor.
    """
    base = dict(image_height=size, image_width=size, block_size=block_size, bond_dim=bond_dim,
                num_classes=num_classes, embedding="pixel_map", init_mode="qr", init_gain=True)
    base.update(kw)
    return mera.MeraConfig(**base).validate()


def gradcheck(cfg: mera.MeraConfig, seed: int = 0, num_images: int = 2, h: float = 1e-5,
              tol: float = 1e-6, fd_dtype=np.longdouble) -> GradcheckReport:
    """Compare taped gradients with central finite differences of the loss.

    The analytic gradient is computed in float64. The loss values that enter
    each difference quotient are evaluated in ``fd_dtype`` (extended precision
    by default) so their rounding error stays far below the tolerance.
    Relative error is |a - b| / max(|a|, |b|, 1e-12).
    """
    t0 = time.perf_counter()
    model = mera.build(cfg, seed)
    rng = rng_stream(seed, "gradcheck")
    images = rng.random((num_images, cfg.padded_size, cfg.padded_size))
    labels = rng.integers(0, cfg.num_classes, size=num_images)
    _, grads, _ = loss_and_grads(model, images, labels)

    base = {k: v.astype(fd_dtype) for k, v in model.params.items()}
    sites = mera.site_inputs(mera.embed_batch(images, cfg))
    sites = {k: v.astype(fd_dtype) for k, v in sites.items()}

    def loss_at(params):
        logits = autodiff.evaluate(params, sites, model.schedule)
        return autodiff.batch_softmax_cross_entropy(logits, labels)[0]

    worst, where = 0.0, None
    for name, p in base.items():
        for idx in np.ndindex(p.shape):
            trial = dict(base)
            q = p.copy()
            q[idx] = p[idx] + fd_dtype(h)
            trial[name] = q
            fp = loss_at(trial)
            q = p.copy()
            q[idx] = p[idx] - fd_dtype(h)
            trial[name] = q
            fm = loss_at(trial)
            numeric = float((fp - fm) / (2 * fd_dtype(h)))
            analytic = float(grads[name][idx])
            rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-12)
            if rel > worst or where is None:
                worst, where = max(rel, worst), (name, idx, analytic, numeric)
    return GradcheckReport(worst, where, model.num_parameters(), time.perf_counter() - t0, tol)
