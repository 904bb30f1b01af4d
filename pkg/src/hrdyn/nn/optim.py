"""Adam with L2 weight decay, reduce-on-plateau scheduling and early stopping."""

from dataclasses import dataclass, field

import numpy as np

from ..exceptions import ConfigurationError, PoisonedUpdateError


@dataclass
class OptimizerState:
    lr: float = 5e-4
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigurationError(f"learning rate must be positive, got {self.lr}")

    def to_dict(self):
        return {
            "lr": self.lr, "betas": list(self.betas), "eps": self.eps,
            "weight_decay": self.weight_decay, "step": self.step,
            "m": {k: _tensor(v) for k, v in self.m.items()},
            "v": {k: _tensor(v) for k, v in self.v.items()},
        }

    @classmethod
    def from_dict(cls, d):
        return cls(lr=d["lr"], betas=tuple(d["betas"]), eps=d["eps"],
                   weight_decay=d["weight_decay"], step=d["step"],
                   m={k: _array(v) for k, v in d["m"].items()},
                   v={k: _array(v) for k, v in d["v"].items()})


def _tensor(a):
    return {"shape": list(a.shape), "data": a.ravel().tolist()}


def _array(t):
    return np.asarray(t["data"], dtype=np.float64).reshape(t["shape"])


def adam_step(params, grads, state):
    """One Adam update with bias correction, applied to ``params`` in place.

    Weight decay is added to the gradient before the moment updates.  If any
    gradient is non-finite nothing is modified and ``PoisonedUpdateError`` is
    raised.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise PoisonedUpdateError(f"non-finite gradient for {name!r}")
        if g.shape != params[name].shape:
            raise ConfigurationError(f"gradient shape {g.shape} != parameter shape for {name!r}")
    beta1, beta2 = state.betas
    state.step += 1
    bc1 = 1.0 - beta1 ** state.step
    bc2 = 1.0 - beta2 ** state.step
    for name, g in grads.items():
        p = params[name]
        if state.weight_decay:
            g = g + state.weight_decay * p
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params, state


class ReduceLROnPlateau:
    """Multiply the learning rate by ``factor`` after ``patience`` stagnant epochs.

    An epoch is stagnant unless its loss beats the best so far by more than
    ``threshold``.  The stagnation counter restarts after every reduction.
    """

    def __init__(self, lr, factor=0.1, patience=10, threshold=1e-12):
        if not lr > 0:
            raise ConfigurationError(f"learning rate must be positive, got {lr}")
        self.lr = lr
        self.factor = factor
        self.patience = patience
        self.threshold = threshold
        self.best = np.inf
        self.num_bad_epochs = 0

    def step(self, loss):
        if loss < self.best - self.threshold:
            self.best = loss
            self.num_bad_epochs = 0
        else:
            self.num_bad_epochs += 1
            if self.num_bad_epochs >= self.patience:
                self.lr *= self.factor
                self.num_bad_epochs = 0
        return self.lr


def plateau_scheduler(history, lr, factor=0.1, patience=10, threshold=1e-12):
    """Learning rate after replaying a whole validation-loss ``history``."""
    sched = ReduceLROnPlateau(lr, factor, patience, threshold)
    for loss in history:
        sched.step(loss)
    return sched.lr


class EarlyStopping:
    """Signal a stop once ``patience`` consecutive epochs fail to improve."""

    def __init__(self, patience=30, threshold=1e-12):
        self.patience = patience
        self.threshold = threshold
        self.best = np.inf
        self.best_epoch = None
        self.counter = 0
        self.stop = False

    def step(self, loss, epoch):
        """Record ``loss``; return True when it is a new best."""
        if loss < self.best - self.threshold:
            self.best = loss
            self.best_epoch = epoch
            self.counter = 0
            return True
        self.counter += 1
        if self.counter >= self.patience:
            self.stop = True
        return False
