"""Optimizers, training loops, split protocols and evaluation."""

from __future__ import annotations

import json
import time
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .bank import bank_digest
from .errors import InvariantError
from .layers import check_finite, softmax_cross_entropy
from .network import VIEWS, FusedNet, build_subnet
from .tensor import Rng
from .video import Dataset


@dataclass
class OptimConfig:
    kind: str = "adam"
    learning_rate: float = 1e-3
    momentum: float = 0.9  # beta1 for adam
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 16
    epochs: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("adam", "sgd-momentum"):
            raise ValueError(f"unknown optimizer {self.kind!r}")
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")

    def to_dict(self):
        return asdict(self)


def subnet_config(**kw):
    return OptimConfig(**{"kind": "adam", "learning_rate": 1e-3, "epochs": 50, **kw})


def finetune_config(**kw):
    return OptimConfig(**{"kind": "sgd-momentum", "learning_rate": 1e-4, "epochs": 100, **kw})


# -- optimizer steps ---------------------------------------------------------

def _check_pair(params, grads):
    for k, p in params.items():
        if k not in grads:
            raise KeyError(f"no gradient for parameter {k!r}")
        if np.shape(grads[k]) != p.shape:
            raise ValueError(f"gradient for {k} has shape {np.shape(grads[k])}, expected {p.shape}")


def sgd_momentum_step(params, grads, state, lr, mu=0.9):
    """``v = mu*v + g; p -= lr*v`` in place. ``state`` holds the velocities."""
    _check_pair(params, grads)
    for k, p in params.items():
        v = state.get(k)
        if v is None:
            v = state[k] = np.zeros(p.shape, dtype=np.float64)
        v *= mu
        v += grads[k]
        p -= (lr * v).astype(p.dtype, copy=False)
    return params, state


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8, t=1):
    """Bias-corrected Adam update in place; ``t`` counts steps from 1."""
    if t < 1:
        raise ValueError("adam step counter t must be >= 1")
    _check_pair(params, grads)
    c1 = 1 - beta1 ** t
    c2 = 1 - beta2 ** t
    for k, p in params.items():
        g = np.asarray(grads[k], dtype=np.float64)
        if k not in state:
            state[k] = (np.zeros(p.shape), np.zeros(p.shape))
        m, v = state[k]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype, copy=False)
    return params, state


class SGDMomentum:
    def __init__(self, lr, momentum=0.9):
        self.lr, self.momentum = lr, momentum
        self.state = {}

    def step(self, params, grads):
        sgd_momentum_step(params, grads, self.state, self.lr, self.momentum)


class Adam:
    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.state = {}

    def step(self, params, grads):
        self.t += 1
        adam_step(params, grads, self.state, self.lr, self.beta1, self.beta2, self.eps, self.t)


def make_optimizer(cfg: OptimConfig):
    if cfg.kind == "adam":
        return Adam(cfg.learning_rate, cfg.momentum, cfg.beta2, cfg.eps)
    return SGDMomentum(cfg.learning_rate, cfg.momentum)


# -- metrics -----------------------------------------------------------------

@dataclass
class EvalResult:
    accuracy: float
    confusion: np.ndarray
    predictions: np.ndarray

    def confusion_percent(self):
        rows = self.confusion.sum(axis=1, keepdims=True)
        return 100.0 * self.confusion / np.maximum(rows, 1)


@dataclass
class TrainRun:
    epochs: list = field(default_factory=list)
    confusion: np.ndarray | None = None
    wall_time: float = 0.0
    config: dict = field(default_factory=dict)

    def to_dict(self):
        return {"epochs": self.epochs, "wall_time": self.wall_time, "config": self.config,
                "confusion": None if self.confusion is None else self.confusion.tolist()}


def confusion_matrix(labels, predictions, n_classes):
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(labels), np.asarray(predictions)), 1)
    return cm


def _inputs(model, ds: Dataset, dtype):
    if isinstance(model, FusedNet):
        return tuple(ds.stack(v, dtype) for v in VIEWS)
    return ds.stack(model.spec.view, dtype)


def _take(x, idx):
    if isinstance(x, tuple):
        return tuple(a[idx] for a in x)
    return x[idx]


def _dtype(model):
    return model.head.params["weight"].dtype


def predict(model, x, batch_size=32):
    n = len(x[0]) if isinstance(x, tuple) else len(x)
    preds = []
    for a in range(0, n, batch_size):
        preds.append(model.forward(_take(x, slice(a, a + batch_size))).argmax(axis=1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def evaluate(model, ds: Dataset, batch_size=32) -> EvalResult:
    if len(ds) == 0:
        raise ValueError("cannot evaluate on an empty set")
    pred = predict(model, _inputs(model, ds, _dtype(model)), batch_size)
    labels = ds.labels
    cm = confusion_matrix(labels, pred, model.spec.classes)
    return EvalResult(float((pred == labels).mean()), cm, pred)


# -- loops -------------------------------------------------------------------

def check_bank(bank):
    if bank_digest(bank) != bank.id:
        raise InvariantError("ternary bank changed during training")


def _fit(model, train: Dataset, cfg: OptimConfig, eval_set, log, tag):
    if len(train) == 0:
        raise ValueError("training split is empty")
    start = time.perf_counter()
    dtype = _dtype(model)
    x = _inputs(model, train, dtype)
    y = train.labels
    x_eval = _inputs(model, eval_set, dtype) if eval_set is not None and len(eval_set) else None
    opt = make_optimizer(cfg)
    rng = Rng(cfg.seed)
    run = TrainRun(config={"stage": tag, **cfg.to_dict()})
    n = len(y)
    for epoch in range(cfg.epochs):
        check_bank(model.bank)
        order = rng.child(epoch).permutation(n)
        loss_sum, correct = 0.0, 0
        for a in range(0, n, cfg.batch_size):
            idx = order[a:a + cfg.batch_size]
            logits = model.forward(_take(x, idx), training=True)
            loss, g = softmax_cross_entropy(logits, y[idx])
            check_finite(f"{tag} loss", loss)
            model.backward(g)
            opt.step(model.parameters(), model.gradients())
            loss_sum += loss * len(idx)
            correct += int((logits.argmax(axis=1) == y[idx]).sum())
        row = {"epoch": epoch + 1, "train_loss": loss_sum / n, "train_acc": correct / n}
        if x_eval is not None:
            pred = predict(model, x_eval)
            row["eval_acc"] = float((pred == eval_set.labels).mean())
        run.epochs.append(row)
        if log is not None:
            log(json.dumps({"stage": tag, "epoch": epoch + 1, "split": "train",
                            "loss": row["train_loss"], "acc": row["train_acc"]}))
            if "eval_acc" in row:
                log(json.dumps({"stage": tag, "epoch": epoch + 1, "split": "eval",
                                "acc": row["eval_acc"]}))
    check_bank(model.bank)
    if eval_set is not None and len(eval_set):
        run.confusion = evaluate(model, eval_set).confusion
    run.wall_time = time.perf_counter() - start
    return run


def train_subnet(train: Dataset, view, bank, cfg: OptimConfig | None = None, eval_set=None,
                 channel_plan=(64, 64, 64, 64, 64), augment=True, net=None, log=None,
                 dtype=np.float32, method="gemm"):
    """Train one view's subnet. ``train`` holds originals; it is expanded to its
    14 augmented variants when ``augment`` is set. Returns ``(net, run)``."""
    cfg = cfg or subnet_config()
    if len(train) == 0:
        raise ValueError("training split is empty")
    if augment:
        train = train.augmented()
    if net is None:
        cuboid = train.samples[0].data.shape
        net = build_subnet(view, train.n_classes, bank, channel_plan, Rng(cfg.seed).child(7919),
                           cuboid=tuple(cuboid), dtype=dtype, method=method)
    run = _fit(net, train, cfg, eval_set, log, f"subnet-{view}")
    net.trained_epochs = getattr(net, "trained_epochs", 0) + cfg.epochs
    return net, run


def finetune_fused(fused: FusedNet, train: Dataset, cfg: OptimConfig | None = None,
                   eval_set=None, augment=True, log=None):
    """Fine-tune every parameter of the fused network (SGD with momentum by default)."""
    cfg = cfg or finetune_config()
    if any(getattr(n, "trained_epochs", 0) == 0 for n in fused.subnets.values()):
        warnings.warn("fine-tuning a fusion of untrained subnets", stacklevel=2)
    if augment:
        train = train.augmented()
    return _fit(fused, train, cfg, eval_set, log, "fused")


# -- splits ------------------------------------------------------------------

def _split(ds: Dataset, test_subjects):
    test_subjects = set(test_subjects)
    train_idx = [i for i, s in enumerate(ds.samples) if s.subject_id not in test_subjects]
    test_idx = [i for i, s in enumerate(ds.samples)
                if s.subject_id in test_subjects and s.is_original]
    train, test = ds.subset(train_idx), ds.subset(test_idx)
    if set(train.subjects) & set(test.subjects):
        raise InvariantError("split is not subject-disjoint")
    if any(not s.is_original for s in test.samples):
        raise InvariantError("augmented sample leaked into a test set")
    return train, test


def kfold_split(ds: Dataset, k=10):
    """Subjects sorted ascending; subject of rank ``r`` goes to fold ``r mod k``."""
    subjects = sorted(set(ds.subjects))
    if k < 2:
        raise ValueError("k must be >= 2")
    if len(subjects) < k:
        raise ValueError(f"{len(subjects)} subjects cannot fill {k} folds")
    return [_split(ds, subjects[f::k]) for f in range(k)]


def loso_split(ds: Dataset):
    subjects = sorted(set(ds.subjects))
    if len(subjects) < 2:
        raise ValueError("leave-one-subject-out needs at least 2 subjects")
    return [_split(ds, [s]) for s in subjects]


def cross_validated(results):
    """Pool per-fold :class:`EvalResult` objects: total correct over total samples."""
    cm = sum(r.confusion for r in results)
    return float(np.trace(cm) / cm.sum()), cm
