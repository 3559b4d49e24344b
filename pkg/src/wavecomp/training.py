"""Optimizers, the combined task + wavelet objective, training loops, and
finite-difference gradient checking.

All randomness inside a run derives from the config seed through fixed
stream tags, so a (config, seed) pair replays bit-identically on a single
thread.  Gradients accumulate across backward calls and are zeroed here,
by the loop, before every step.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, asdict

import numpy as np

from .autodiff import Tensor, add, mse, scale, softmax_cross_entropy
from .errors import ValidationError
from .fwt import init_filterbank, pr_loss, ac_loss, wavelet_loss
from .gru import GRU
from . import tasks


class NonFiniteGradientError(RuntimeError):
    """A parameter received a NaN or infinite gradient."""


# -- optimizers ------------------------------------------------------------------


class Optimizer:
    """Shared bookkeeping: named parameters, zeroing, finite checks."""

    def __init__(self, params, lr: float):
        self.params = list(params)
        if lr <= 0:
            raise ValidationError(f"learning rate must be positive, got {lr}")
        self.lr = lr
        self.state = {}

    def zero_grad(self):
        for _, p in self.params:
            p.grad = None

    def step(self):
        for name, p in self.params:
            if p.grad is None:
                continue
            if not np.all(np.isfinite(p.grad)):
                raise NonFiniteGradientError(f"non-finite gradient in {name!r}")
            self._update(name, p, p.grad)

    def _update(self, name, p, g):
        raise NotImplementedError


class RMSProp(Optimizer):
    def __init__(self, params, lr: float = 0.001, rho: float = 0.9, eps: float = 1e-8):
        super().__init__(params, lr)
        self.rho, self.eps = rho, eps

    def _update(self, name, p, g):
        acc = self.state.setdefault(name, np.zeros_like(p.data))
        acc *= self.rho
        acc += (1.0 - self.rho) * g * g
        p.data = p.data - self.lr * g / np.sqrt(acc + self.eps)


class Adam(Optimizer):
    def __init__(self, params, lr: float = 0.001, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        super().__init__(params, lr)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps

    def _update(self, name, p, g):
        m, v, t = self.state.setdefault(name, (np.zeros_like(p.data),
                                               np.zeros_like(p.data), 0))
        t += 1
        m = self.beta1 * m + (1.0 - self.beta1) * g
        v = self.beta2 * v + (1.0 - self.beta2) * g * g
        self.state[name] = (m, v, t)
        mhat = m / (1.0 - self.beta1 ** t)
        vhat = v / (1.0 - self.beta2 ** t)
        p.data = p.data - self.lr * mhat / (np.sqrt(vhat) + self.eps)


class Adadelta(Optimizer):
    def __init__(self, params, lr: float = 1.0, rho: float = 0.9, eps: float = 1e-6):
        super().__init__(params, lr)
        self.rho, self.eps = rho, eps

    def _update(self, name, p, g):
        eg, ed = self.state.setdefault(name, (np.zeros_like(p.data),
                                              np.zeros_like(p.data)))
        eg = self.rho * eg + (1.0 - self.rho) * g * g
        dx = -np.sqrt(ed + self.eps) / np.sqrt(eg + self.eps) * g
        ed = self.rho * ed + (1.0 - self.rho) * dx * dx
        self.state[name] = (eg, ed)
        p.data = p.data + self.lr * dx


OPTIMIZERS = {"rmsprop": RMSProp, "adam": Adam, "adadelta": Adadelta}
DEFAULT_LR = {"rmsprop": 0.001, "adam": 0.001, "adadelta": 1.0}


def make_optimizer(kind: str, params, lr: float | None = None) -> Optimizer:
    if kind not in OPTIMIZERS:
        raise ValidationError(f"unknown optimizer {kind!r}; choose from {sorted(OPTIMIZERS)}")
    return OPTIMIZERS[kind](params, lr=lr if lr is not None else DEFAULT_LR[kind])


def clip_global_norm(params, threshold: float) -> float:
    """Rescale all gradients so their joint L2 norm is at most threshold."""
    total = 0.0
    for _, p in params:
        if p.grad is not None:
            total += float(np.sum(p.grad * p.grad))
    norm = float(np.sqrt(total))
    if threshold and norm > threshold:
        factor = threshold / norm
        for _, p in params:
            if p.grad is not None:
                p.grad *= factor
    return norm


# -- objective -------------------------------------------------------------------


def task_forward(model: GRU, batch: tasks.TaskBatch, task: str):
    """Forward pass plus task loss and accuracy for one batch."""
    if task == "adding":
        pred = model.unroll(batch.inputs, per_step=False)
        loss = mse(pred, Tensor(batch.targets.astype(model.dtype)))
        acc = tasks.adding_accuracy(pred.data, batch.targets)
    elif task == "copy":
        logits = model.unroll(batch.inputs, per_step=True)
        labels = batch.targets.T.reshape(-1)
        loss = softmax_cross_entropy(logits, labels)
        b, length = batch.targets.shape
        pred = tasks.copy_predictions(logits.data, b, length)
        acc = tasks.copy_accuracy(pred, batch.targets, batch.mask)
    else:
        raise ValidationError(f"unknown task {task!r}")
    return loss, acc


def total_loss(model: GRU, batch: tasks.TaskBatch, task: str,
               wavelet_weight: float = 1.0):
    """Task loss plus the wavelet loss of every bank in the model."""
    loss, acc = task_forward(model, batch, task)
    banks = model.filter_banks()
    wl = wavelet_loss(banks)
    if banks and wavelet_weight:
        term = wl if wavelet_weight == 1.0 else scale(wl, wavelet_weight)
        total = add(loss, term)
    else:
        total = loss
    return total, float(loss.item()), float(wl.item()), acc


# -- configuration ----------------------------------------------------------------


@dataclass
class TrainConfig:
    task: str = "adding"
    T: int = 30
    copy_n: int = 8
    hidden: int = 64
    compress: tuple = ()
    filter_init: str = "random_uniform"
    filter_length: int = 6
    optimizer: str = "rmsprop"
    lr: float | None = None
    batch: int = 50
    steps: int = 2000
    seed: int = 0
    clip: float = 1.0
    wavelet_weight: float = 1.0
    log_interval: int = 50
    early_stop_acc: float | None = None
    precision: str = "f64"
    mnist_dir: str | None = None
    out: str | None = None

    def dtype(self):
        if self.precision not in ("f64", "f32"):
            raise ValidationError(f"precision must be f64 or f32, got {self.precision}")
        return np.float64 if self.precision == "f64" else np.float32

    def echo(self) -> str:
        pairs = []
        for key, value in asdict(self).items():
            if isinstance(value, tuple):
                value = ",".join(value) if value else "-"
            pairs.append(f"{key}={value}")
        return "\n".join(pairs) + "\n"


@dataclass
class TrainResult:
    history: list = field(default_factory=list)
    status: str = "ok"
    model: object = None
    final_accuracy: float = 0.0


def _gen_batch(config: TrainConfig, step: int) -> tasks.TaskBatch:
    seed = [config.seed, 1000 + step]
    if config.task == "adding":
        return tasks.gen_adding(config.T, config.batch, seed=seed)
    if config.task == "copy":
        return tasks.gen_copy(config.T, config.copy_n, config.batch, seed=seed)
    raise ValidationError(f"unknown task {config.task!r}")


def build_model(config: TrainConfig) -> GRU:
    if config.task == "adding":
        n_in, n_out = 2, 1
    elif config.task == "copy":
        # readout spans the full symbol alphabet (blank, data, marker)
        n_in, n_out = config.copy_n + 2, config.copy_n + 2
    else:
        raise ValidationError(f"unknown task {config.task!r}")
    return GRU(config.hidden, n_in, n_out, compressed=config.compress,
               filter_init=config.filter_init, L=config.filter_length,
               seed=[config.seed, 1], dtype=config.dtype())


def train(config: TrainConfig, model: GRU | None = None,
          metrics_writer=None) -> TrainResult:
    """Seeded loop: stream batches, combined loss, clip, optimize, log."""
    if config.steps < 1:
        raise ValidationError(f"step budget must be >= 1, got {config.steps}")
    if model is None:
        model = build_model(config)
    params = model.named_parameters()
    opt = make_optimizer(config.optimizer, params, lr=config.lr)
    result = TrainResult(model=model)
    start = time.perf_counter()
    streak = 0
    for step in range(1, config.steps + 1):
        batch = _gen_batch(config, step)
        total, task_val, wl_val, acc = total_loss(
            model, batch, config.task, config.wavelet_weight)
        if not np.isfinite(task_val):
            result.status = "diverged"
            break
        opt.zero_grad()
        total.backward()
        clip_global_norm(params, config.clip)
        try:
            opt.step()
        except NonFiniteGradientError:
            result.status = "diverged"
            break
        result.final_accuracy = acc
        if step % config.log_interval == 0 or step == config.steps:
            row = {"step": step, "task_loss": task_val, "wavelet_loss": wl_val,
                   "accuracy": acc, "seconds": time.perf_counter() - start}
            result.history.append(row)
            if metrics_writer is not None:
                metrics_writer(row)
            if config.early_stop_acc is not None:
                streak = streak + 1 if acc >= config.early_stop_acc else 0
                if streak >= 3:
                    break
    return result


def evaluate(model: GRU, config: TrainConfig, batches: int = 4,
             seed_tag: int = 999_983) -> dict:
    """Accuracy / loss on fresh batches drawn outside the training stream."""
    losses, accs = [], []
    for k in range(batches):
        if config.task == "adding":
            batch = tasks.gen_adding(config.T, config.batch, seed=[config.seed, seed_tag + k])
        else:
            batch = tasks.gen_copy(config.T, config.copy_n, config.batch,
                                   seed=[config.seed, seed_tag + k])
        loss, acc = task_forward(model, batch, config.task)
        losses.append(loss.item())
        accs.append(acc)
    return {"task_loss": float(np.mean(losses)), "accuracy": float(np.mean(accs))}


# -- filter-only optimization (wavelet loss alone) ----------------------------------


def train_filterbank(fb=None, steps: int = 10_000, optimizer: str = "adam",
                     lr: float = 0.01, L: int = 6, seed: int = 0,
                     log_interval: int = 100, tol: float | None = None):
    """Drive pr_loss + ac_loss of one bank toward zero; returns (fb, history)."""
    if fb is None:
        fb = init_filterbank("random_uniform", L=L, seed=seed)
    params = list(fb.named_tensors())
    opt = make_optimizer(optimizer, params, lr=lr)
    history = []
    for step in range(1, steps + 1):
        loss = add(pr_loss(fb), ac_loss(fb))
        value = loss.item()
        if step == 1 or step % log_interval == 0 or step == steps:
            history.append({"step": step, "wavelet_loss": value})
        if tol is not None and value < tol:
            break
        opt.zero_grad()
        loss.backward()
        opt.step()
    return fb, history


# -- finite-difference gradient checking --------------------------------------------


def central_difference(f, tensor: Tensor, index, eps: float = 1e-5) -> float:
    """Two-sided difference of scalar f() w.r.t. one coordinate of tensor."""
    original = tensor.data[index]
    tensor.data[index] = original + eps
    hi = f()
    tensor.data[index] = original - eps
    lo = f()
    tensor.data[index] = original
    return (hi - lo) / (2.0 * eps)


def relative_error(a: float, b: float, floor: float = 1e-6) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


@dataclass
class GradCheckReport:
    per_param: dict
    tolerance: float

    @property
    def failures(self):
        return sorted(n for n, e in self.per_param.items() if e >= self.tolerance)

    @property
    def max_error(self) -> float:
        return max(self.per_param.values())

    def __str__(self):
        lines = [f"{name}: max rel err {err:.3e}" for name, err in
                 sorted(self.per_param.items())]
        verdict = "all parameter groups pass" if not self.failures else \
            f"FAILURES: {', '.join(self.failures)}"
        return "\n".join(lines + [f"tolerance {self.tolerance:g}: {verdict}"])


def grad_check_model(model: GRU, batch: tasks.TaskBatch, task: str,
                     eps: float = 1e-5, max_coords: int = 20, seed: int = 0,
                     tolerance: float = 1e-4) -> GradCheckReport:
    """Compare backward gradients of the combined loss against central
    differences on a random subsample of coordinates per parameter."""
    if model.dtype != np.float64:
        raise ValidationError("gradient checks require a float64 model")
    params = model.named_parameters()

    def loss_value():
        return total_loss(model, batch, task)[0].item()

    for _, p in params:
        p.grad = None
    total, *_ = total_loss(model, batch, task)
    total.backward()
    rng = np.random.default_rng(seed)
    report = {}
    for name, p in params:
        grads = p.grad if p.grad is not None else np.zeros_like(p.data)
        size = p.data.size
        count = min(max_coords, size)
        flat_ids = rng.choice(size, size=count, replace=False)
        worst = 0.0
        for flat in flat_ids:
            index = np.unravel_index(flat, p.data.shape)
            fd = central_difference(loss_value, p, index, eps=eps)
            worst = max(worst, relative_error(fd, float(grads[index])))
        report[name] = worst
    return GradCheckReport(per_param=report, tolerance=tolerance)
