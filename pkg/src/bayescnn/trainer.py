"""Training, evaluation and noise-sweep runs with CSV metric files and checkpoints."""

from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt_io
from . import tensor as T
from .data import BatchPlan, Dataset, NoiseSpec, adapt_input, add_noise, batches, load_dataset
from .exceptions import ContractError, NumericalError
from .layers import INIT_GAIN, NoiseStream
from .models import build
from .objective import KLWeightSchedule, LossBreakdown, free_energy, nll_categorical
from .optim import Adam
from .uncertainty import batch_uncertainty, normalize

log = logging.getLogger(__name__)

MODES = ("bayesian", "frequentist")
DATASET_CLASSES = {"mnist": 10, "cifar10": 10, "cifar100": 100}

# purpose tags for derived seeds
_TRAIN_NOISE, _EVAL_NOISE, _SWEEP_PIXELS = 1, 2, 3


def derive_seed(seed, purpose, epoch=0):
    return int(np.random.SeedSequence([int(seed), purpose, int(epoch)]).generate_state(1)[0])


@dataclass
class TrainConfig:
    arch: str = "lenet5"
    dataset: str = "mnist"
    data_dir: str = "data"
    epochs: int = 100
    batch_size: int = 128
    learning_rate: float = 0.001
    mc_samples: int = 10
    weight_decay: float = 0.0005
    seed: int = 0
    eval_T: int = 25
    train_n: int = 0
    val_n: int = 0
    mode: str = "bayesian"
    uncertainty_n: int = 512
    train_acc_n: int = 2000
    checkpoint_every: int = 10
    dtype: str = "float32"
    init: str = "fan_in"
    init_gain: float = INIT_GAIN
    kl_per_example: bool = True
    val_mc: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ContractError(f"mode must be one of {MODES}, got {self.mode!r}")
        for name in ("epochs", "batch_size", "mc_samples", "eval_T"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be positive")
        if self.learning_rate <= 0 or self.weight_decay < 0:
            raise ContractError("learning_rate must be positive and weight_decay nonnegative")

    @property
    def bayesian(self):
        return self.mode == "bayesian"

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class MetricsRow:
    epoch: int
    train_nll: float
    train_kl: float
    train_total: float
    train_acc: float
    val_acc: float
    val_aleatoric: float
    val_epistemic: float
    wall_seconds: float


METRIC_COLUMNS = [f.name for f in fields(MetricsRow)]


def _fmt(value):
    return f"{value:.9g}" if isinstance(value, float) else str(value)


def write_csv(path, header, rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_fmt(v) for v in row])
    ckpt_io.atomic_write_bytes(path, buf.getvalue().encode())


def read_metrics(path):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        return [
            MetricsRow(**{k: (int(v) if k == "epoch" else float(v)) for k, v in row.items()})
            for row in reader
        ]


# -- model / checkpoint plumbing -----------------------------------------------------


def in_channels_for(arch, dataset):
    if arch == "lenet5":
        return 1 if dataset == "mnist" else 3
    return 3


def make_model(config, num_classes, in_channels):
    return build(
        config.arch, num_classes, init_seed=config.seed, in_channels=in_channels,
        dtype=np.dtype(config.dtype), init=config.init, gain=config.init_gain,
    )  # fmt: skip


def make_optimizer(model, config):
    named = model.named_parameters()
    if not config.bayesian:
        named = {k: v for k, v in named.items() if not k.endswith(".log_alpha")}
    decay = [k for k in named if k.endswith(".mu")]
    return Adam(named, lr=config.learning_rate, weight_decay=config.weight_decay, decay=decay)


def snapshot(model, optimizer, config, epoch):
    cfg = asdict(config)
    cfg.update(num_classes=model.spec.num_classes, in_channels=model.spec.input_shape[0])
    tensors = {k: t.data for k, t in model.named_parameters().items()}
    if optimizer is not None:
        tensors.update(optimizer.state_tensors())
    step = optimizer.state.step if optimizer is not None else 0
    return ckpt_io.Checkpoint(cfg, tensors, epoch, step)


def restore(checkpoint):
    """Rebuild ``(model, config)`` from a checkpoint (path or object)."""
    if not isinstance(checkpoint, ckpt_io.Checkpoint):
        checkpoint = ckpt_io.load(checkpoint)
    cfg = checkpoint.config
    config = TrainConfig.from_dict(cfg)
    model = make_model(config, cfg["num_classes"], cfg["in_channels"])
    for name, t in model.named_parameters().items():
        t.data = np.array(checkpoint.tensors[name], dtype=t.dtype)
    return model, config


# -- data ---------------------------------------------------------------------------------


def load_splits(config, arch_input):
    train = load_dataset(config.dataset, config.data_dir, "train").subset(config.train_n)
    val = load_dataset(config.dataset, config.data_dir, "test").subset(config.val_n)
    return adapt_input(train, arch_input), adapt_input(val, arch_input)


def map_accuracy(model, ds, chunk=1000):
    """Accuracy of the posterior-mean network (variance paths off)."""
    if len(ds) == 0:
        return float("nan")
    correct = 0
    with T.no_grad():
        for start in range(0, len(ds), chunk):
            logits = model.forward(ds.images[start : start + chunk], stochastic=False).data
            correct += int(np.sum(logits.argmax(axis=1) == ds.labels[start : start + chunk]))
    return correct / len(ds)


# -- training -------------------------------------------------------------------------------


def train_step(model, optimizer, batch, schedule, i, config, noise, kl_scale):
    if config.bayesian:
        loss = free_energy(batch, model, schedule, i, S=config.mc_samples, noise=noise, kl_scale=kl_scale)
    else:
        images, labels = batch
        logits = model.forward(images, stochastic=False)
        nll = nll_categorical(normalize(logits), labels)
        loss = LossBreakdown(nll.item(), 0.0, schedule.beta(i), nll.item(), kl_scale, nll)
    if not math.isfinite(loss.total):
        raise NumericalError(f"non-finite loss at batch {i}: {loss}")
    optimizer.zero_grad()
    loss.objective.backward()
    optimizer.step()
    return loss


def train_epoch(model, optimizer, ds, epoch, config):
    """One pass over ``ds``; returns mean nll/kl/total over the minibatches."""
    plan = BatchPlan(len(ds), config.batch_size, shuffle_seed=config.seed)
    schedule = KLWeightSchedule(plan.M)
    noise = NoiseStream(derive_seed(config.seed, _TRAIN_NOISE, epoch))
    kl_scale = float(len(ds)) if config.kl_per_example else 1.0
    sums = np.zeros(3)
    for images, labels, i in batches(ds, plan, epoch):
        loss = train_step(model, optimizer, (images, labels), schedule, i, config, noise, kl_scale)
        sums += (loss.nll, loss.kl, loss.total)
    return dict(zip(("nll", "kl", "total"), sums / plan.M))


def epoch_metrics(model, train, val, epoch, stats, config, started):
    train_acc = map_accuracy(model, train.subset(min(config.train_acc_n, len(train))))
    slice_ = val.subset(min(config.uncertainty_n, len(val)))
    unc = batch_uncertainty(
        model, slice_.images, T=config.eval_T, noise=NoiseStream(derive_seed(config.seed, _EVAL_NOISE)),
        labels=slice_.labels, stochastic=config.bayesian,
    )  # fmt: skip
    if config.val_mc:
        val_acc = batch_uncertainty(
            model, val.images, T=config.eval_T, noise=NoiseStream(derive_seed(config.seed, _EVAL_NOISE, 1)),
            labels=val.labels, stochastic=config.bayesian,
        ).accuracy  # fmt: skip
    else:
        val_acc = map_accuracy(model, val)
    return MetricsRow(
        epoch=epoch,
        train_nll=float(stats["nll"]),
        train_kl=float(stats["kl"]),
        train_total=float(stats["total"]),
        train_acc=float(train_acc),
        val_acc=float(val_acc),
        val_aleatoric=unc.aleatoric,
        val_epistemic=unc.epistemic,
        wall_seconds=round(time.perf_counter() - started, 3),
    )


def train(config, out_dir, resume=None, stop_after=None):
    """Run (or resume) training, writing ``metrics.csv`` and ``checkpoint.bcnn`` under ``out_dir``.

    ``stop_after`` ends the run after that epoch while keeping the configured
    total, which is how an interrupted run is reproduced in tests.
    Returns ``(checkpoint_path, metrics_rows)``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if config.dataset not in DATASET_CLASSES:
        raise ContractError(f"unknown dataset {config.dataset!r}")
    num_classes = DATASET_CLASSES[config.dataset]
    model = make_model(config, num_classes, in_channels_for(config.arch, config.dataset))
    optimizer = make_optimizer(model, config)
    rows, start = [], 1
    if resume is not None:
        state = ckpt_io.load(resume)
        for name, t in model.named_parameters().items():
            t.data = np.array(state.tensors[name], dtype=t.dtype)
        optimizer.load_state_tensors(state.tensors, state.optimizer_step)
        start = state.epoch + 1
        metrics_path = out_dir / "metrics.csv"
        if metrics_path.exists():
            rows = [r for r in read_metrics(metrics_path) if r.epoch <= state.epoch]

    train_ds, val_ds = load_splits(config, model.spec.input_shape)
    log.info("training %s on %s: %d train / %d val", config.arch, config.dataset, len(train_ds), len(val_ds))
    ckpt_path = out_dir / "checkpoint.bcnn"
    last = config.epochs if stop_after is None else min(stop_after, config.epochs)
    for epoch in range(start, last + 1):
        started = time.perf_counter()
        stats = train_epoch(model, optimizer, train_ds, epoch, config)
        row = epoch_metrics(model, train_ds, val_ds, epoch, stats, config, started)
        rows.append(row)
        log.info("epoch %d: %s", epoch, row)
        write_csv(out_dir / "metrics.csv", METRIC_COLUMNS, [list(asdict(r).values()) for r in rows])
        if epoch % config.checkpoint_every == 0 or epoch == last:
            ckpt_io.save(ckpt_path, snapshot(model, optimizer, config, epoch))
    return ckpt_path, rows


# -- evaluation ---------------------------------------------------------------------------


@dataclass
class EvalResult:
    accuracy: float
    aleatoric: float
    epistemic: float
    n: int


def _eval_data(config, dataset, data_dir, model, n):
    name = dataset or config.dataset
    ds = load_dataset(name, data_dir or config.data_dir, "test")
    if ds.num_classes != model.spec.num_classes:
        raise ContractError(
            f"checkpoint predicts {model.spec.num_classes} classes but {name} has {ds.num_classes}"
        )
    return adapt_input(ds.subset(n), model.spec.input_shape)


def evaluate_dataset(model, ds, T=25, normalizer="softplus_n", seed=0, stochastic=True, out_dir=None):
    if ds.num_classes != model.spec.num_classes:
        raise ContractError(f"model predicts {model.spec.num_classes} classes, data has {ds.num_classes}")
    unc = batch_uncertainty(
        model, ds.images, T=T, normalizer=normalizer, noise=NoiseStream(derive_seed(seed, _EVAL_NOISE)),
        labels=ds.labels, stochastic=stochastic,
    )  # fmt: skip
    if out_dir is not None:
        rows = zip(range(len(ds)), unc.per_image_aleatoric.tolist(), unc.per_image_epistemic.tolist(),
                   unc.predicted.tolist(), ds.labels.tolist())  # fmt: skip
        write_csv(Path(out_dir) / "uncertainty.csv",
                  ["image_index", "scalar_aleatoric", "scalar_epistemic", "predicted", "label"], rows)  # fmt: skip
    return EvalResult(unc.accuracy, unc.aleatoric, unc.epistemic, len(ds))


def evaluate(checkpoint, dataset=None, T=25, normalizer="softplus_n", data_dir=None, n=0, seed=0, stochastic=True, out_dir=None):
    """Accuracy and averaged uncertainties of a saved model; writes ``uncertainty.csv``."""
    model, config = restore(checkpoint)
    ds = _eval_data(config, dataset, data_dir, model, n)
    stochastic = stochastic and config.bayesian
    return evaluate_dataset(model, ds, T, normalizer, seed, stochastic, out_dir)


def sweep_dataset(model, ds, gammas, T=25, seed=0, stochastic=True, normalizer="softplus_n"):
    if not len(gammas):
        raise ContractError("noise sweep needs at least one gamma")
    rows = []
    for gamma in gammas:
        noisy = add_noise(ds, NoiseSpec(float(gamma), derive_seed(seed, _SWEEP_PIXELS, round(gamma * 1e6))))
        res = evaluate_dataset(model, noisy, T, normalizer, seed, stochastic)
        rows.append((float(gamma), res.aleatoric, res.epistemic))
    return rows


def noise_sweep(checkpoint, gammas=(0.0, 0.1, 0.2, 0.3), T=25, dataset=None, data_dir=None, n=512, seed=0, out_dir=None):
    """Aleatoric/epistemic scalars on a fixed validation slice under pixel noise of each level."""
    model, config = restore(checkpoint)
    ds = _eval_data(config, dataset, data_dir, model, n)
    rows = sweep_dataset(model, ds, gammas, T, seed, stochastic=config.bayesian)
    if out_dir is not None:
        write_csv(Path(out_dir) / "sweep.csv", ["gamma", "aleatoric", "epistemic"], rows)
    return rows
