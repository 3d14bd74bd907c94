"""SGD training loop with early stopping and the multi-seed protocol."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.special import log_softmax
from sklearn.metrics import f1_score

from .model import MlpModel, QuantMode
from .numerics import seeded_rng

logger = logging.getLogger(__name__)


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-3
    epochs: int = 100
    patience: int = 20
    batch_size: int = 128
    seeds: Sequence[int] = (0, 1, 2)
    val_fraction: float = 0.15

    def __post_init__(self):
        self.seeds = tuple(int(s) for s in self.seeds)
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.epochs < 1 or self.patience < 1 or self.patience > self.epochs:
            raise ValueError("need 1 <= patience <= epochs")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.seeds:
            raise ValueError("at least one seed is required")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in (0, 1)")


@dataclass
class ArchSpec:
    hidden_sizes: Sequence[int] = (512, 512, 512, 512)
    mode: QuantMode = field(default_factory=QuantMode.full_precision)

    def build(self, n_inputs, task, n_classes=None, rng=None) -> MlpModel:
        n_out = n_classes if task == "classification" else 1
        return MlpModel.build(n_inputs, tuple(self.hidden_sizes), n_out, task=task,
                              mode=self.mode, rng=rng, n_classes=n_classes)


@dataclass
class History:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    grad_sq: list = field(default_factory=list)
    best_epoch: int = -1
    best_val_loss: float = float("inf")
    initial_weight_bits: list = field(default_factory=list)
    initial_act_bits: list = field(default_factory=list)

    @property
    def epochs_run(self) -> int:
        return len(self.val_loss)


@dataclass
class SeedRun:
    seed: int
    status: str
    metrics: dict = field(default_factory=dict)
    history: Optional[History] = None
    final_weight_bits: list = field(default_factory=list)
    final_act_bits: list = field(default_factory=list)
    seconds: float = 0.0
    error: Optional[str] = None


@dataclass
class TrainResult:
    mode: str
    hidden_sizes: tuple
    task: str
    runs: list
    frozen: dict = field(default_factory=dict)

    @property
    def ok_runs(self) -> list:
        return [r for r in self.runs if r.status == "ok"]

    def summary(self) -> dict:
        """Mean and std (ddof=0) of every test metric over successful seeds."""
        out = {}
        ok = self.ok_runs
        if not ok:
            return out
        for key in ok[0].metrics:
            vals = np.array([r.metrics[key] for r in ok])
            out[key] = {"mean": float(vals.mean()), "std": float(vals.std())}
        return out

    def to_dict(self) -> dict:
        runs = []
        for r in self.runs:
            d = asdict(r)
            d["final_weight_bits"] = [np.asarray(b).tolist() for b in r.final_weight_bits]
            d["final_act_bits"] = [None if b is None else np.asarray(b).tolist()
                                   for b in r.final_act_bits]
            if r.history is not None:
                h = d["history"]
                h["initial_weight_bits"] = [np.asarray(b).tolist() for b in r.history.initial_weight_bits]
                h["initial_act_bits"] = [None if b is None else np.asarray(b).tolist()
                                         for b in r.history.initial_act_bits]
            runs.append(d)
        return {"mode": self.mode, "hidden_sizes": list(self.hidden_sizes), "task": self.task,
                "depth": len(self.hidden_sizes), "summary": self.summary(), "runs": runs}


def loss(outputs, targets, task):
    """Task loss averaged over the batch and its gradient w.r.t. ``outputs``."""
    outputs = np.asarray(outputs, dtype=np.float64)
    n = outputs.shape[0]
    if task == "regression":
        t = np.asarray(targets, dtype=np.float64).reshape(outputs.shape)
        diff = outputs - t
        value = float(np.mean(diff**2))
        grad = 2.0 * diff / diff.size
    elif task == "classification":
        idx = np.asarray(targets).astype(np.int64).reshape(-1)
        if idx.shape[0] != n:
            raise ValueError("targets and outputs disagree on batch size")
        logp = log_softmax(outputs, axis=1)
        value = float(-logp[np.arange(n), idx].mean())
        grad = np.exp(logp)
        grad[np.arange(n), idx] -= 1.0
        grad /= n
    else:
        raise ValueError(f"unknown task {task!r}")
    if not np.isfinite(value):
        raise NonFiniteLossError(f"non-finite {task} loss")
    return value, grad


def sgd_step(model: MlpModel, grads, lr: float) -> None:
    """``p <- p - lr * g`` for every parameter, then clamp strengths and alpha."""
    model.sgd_step(grads, lr)


def predict(model, x, task):
    out = model.predict_raw(x)
    if task == "classification":
        return np.argmax(out, axis=1)
    return out[:, 0]


def evaluate(model, x, y, task, n_classes=None) -> dict:
    """MSE for regression; accuracy and macro-F1 for classification."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] == 0:
        raise ValueError("cannot evaluate on an empty split")
    pred = predict(model, x, task)
    if task == "regression":
        return {"mse": float(np.mean((pred - np.asarray(y, dtype=np.float64)) ** 2))}
    y = np.asarray(y).astype(np.int64)
    labels = np.arange(n_classes) if n_classes else None
    return {"accuracy": float(np.mean(pred == y)),
            "macro_f1": float(f1_score(y, pred, labels=labels, average="macro", zero_division=0))}


def _grad_sq(grads) -> float:
    return float(sum(np.sum(g * g) for layer in grads for g in layer.values()))


def fit_model(model: MlpModel, x, y, x_val, y_val, config: TrainConfig,
              rng: np.random.Generator) -> History:
    """Train ``model`` in place; restores the best-validation parameters."""
    task = model.task
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    bs = config.batch_size
    hist = History()
    best_state = model.get_state()
    for epoch in range(config.epochs):
        perm = rng.permutation(n)
        if epoch == 0:
            model.init_alpha(x[perm[:bs]])
            hist.initial_weight_bits = [b.copy() for b in model.weight_bits()]
            hist.initial_act_bits = [None if b is None else b.copy() for b in model.act_bits()]
        losses, gsq = [], []
        for start in range(0, n, bs):
            idx = perm[start:start + bs]
            out, trace = model.forward(x[idx])
            value, g = loss(out, y[idx], task)
            grads = model.backward(trace, g)
            losses.append(value)
            gsq.append(_grad_sq(grads))
            model.sgd_step(grads, config.lr)
        val_loss, _ = loss(model.predict_raw(x_val), y_val, task)
        hist.train_loss.append(float(np.mean(losses)))
        hist.val_loss.append(val_loss)
        hist.grad_sq.append(float(np.mean(gsq)))
        if val_loss < hist.best_val_loss:
            hist.best_val_loss = val_loss
            hist.best_epoch = epoch
            best_state = model.get_state()
        elif epoch - hist.best_epoch >= config.patience:
            logger.debug("early stop at epoch %d (best %d)", epoch, hist.best_epoch)
            break
    model.set_state(best_state)
    return hist


def validation_split(n: int, fraction: float, rng: np.random.Generator):
    perm = rng.permutation(n)
    n_val = max(1, int(round(fraction * n)))
    if n_val >= n:
        raise ValueError("training split too small for a validation hold-out")
    return perm[n_val:], perm[:n_val]


def train_seed(arch: ArchSpec, train_set, test_set, config: TrainConfig, seed: int,
               val_set=None):
    """One seed of the protocol: split, init, fit, freeze, test.

    Without ``val_set`` a ``config.val_fraction`` hold-out is drawn from
    ``train_set`` with the seed's generator.  Returns
    ``(SeedRun, FrozenModel or None)``.
    """
    t0 = time.perf_counter()
    rng = seeded_rng(seed)
    task, k = train_set.task, train_set.n_classes
    if val_set is None:
        tr_idx, val_idx = validation_split(train_set.n_rows, config.val_fraction, rng)
        x, y = train_set.features[tr_idx], train_set.targets[tr_idx]
        xv, yv = train_set.features[val_idx], train_set.targets[val_idx]
    else:
        x, y, xv, yv = train_set.features, train_set.targets, val_set.features, val_set.targets
    model = arch.build(train_set.n_features, task, k, rng=rng)
    try:
        hist = fit_model(model, x, y, xv, yv, config, rng)
    except NonFiniteLossError as exc:
        logger.warning("seed %d aborted: %s", seed, exc)
        return SeedRun(seed, "aborted", seconds=time.perf_counter() - t0, error=str(exc)), None
    frozen = model.freeze(provenance={"seed": int(seed)})
    frozen.label_map = train_set.label_map
    metrics = evaluate(frozen, test_set.features, test_set.targets, task, k)
    run = SeedRun(seed, "ok", metrics, hist,
                  final_weight_bits=[layer.weight_bits for layer in frozen.layers],
                  final_act_bits=[layer.act_bits for layer in frozen.layers],
                  seconds=time.perf_counter() - t0)
    return run, frozen


def train(arch: ArchSpec, train_set, test_set, config: TrainConfig, val_set=None) -> TrainResult:
    """Run every seed in ``config.seeds``; aborted seeds are recorded, not raised."""
    result = TrainResult(arch.mode.name, tuple(arch.hidden_sizes), train_set.task, [])
    for seed in config.seeds:
        run, frozen = train_seed(arch, train_set, test_set, config, seed, val_set)
        result.runs.append(run)
        if frozen is not None:
            result.frozen[seed] = frozen
    return result
