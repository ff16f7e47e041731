"""
Optimizers and learning rate schedules.

Parameters are ordered mappings of name to numpy array and are updated in place,
so layers holding references to the same arrays see every step.
"""
import dataclasses
import logging
import math

import numpy as np

from platenet import PlatenetError
from platenet.layers import ShapeError


logger = logging.getLogger("platenet")

OPTIMIZERS = ("sgdm", "adam")


class ScheduleError(PlatenetError): pass


@dataclasses.dataclass
class OptimizerState:
    kind: str = "sgdm"
    lr: float = 0.01
    momentum: float = 0.9
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    moments: dict = dataclasses.field(default_factory=dict)
    second_moments: dict = dataclasses.field(default_factory=dict)
    step_count: int = 0

    def __post_init__(self):
        if self.kind not in OPTIMIZERS:
            raise ScheduleError("Unknown optimizer {!r}, expected one of {}".format(self.kind, OPTIMIZERS))
        if not self.lr > 0:
            raise ScheduleError("Learning rate must be positive, got {}".format(self.lr))
        if not 0 <= self.momentum < 1:
            raise ScheduleError("Momentum must be in [0, 1), got {}".format(self.momentum))


def make_optimizer(kind, params, lr, **constants):
    """
    Return an OptimizerState with zero-initialized moment buffers for every array in params.
    """
    state = OptimizerState(kind=kind, lr=lr, **constants)
    for name, param in params.items():
        state.moments[name] = np.zeros_like(param)
        if kind == "adam":
            state.second_moments[name] = np.zeros_like(param)
    return state


def _buffer(buffers, name, param):
    if name not in buffers:
        buffers[name] = np.zeros_like(param)
    return buffers[name]


def optimizer_step(state, params, grads):
    """
    Apply one update to params in place and advance state.
    SGDM: v = momentum * v + grad, param -= lr * v.
    ADAM: bias corrected first and second moment estimates.
    Return (params, state).
    """
    for name, param in params.items():
        if name not in grads:
            raise ShapeError("No gradient for parameter {!r}".format(name))
        if grads[name].shape != param.shape:
            raise ShapeError("Gradient shape {} does not match parameter {!r} of shape {}".format(
                grads[name].shape, name, param.shape))
    state.step_count += 1
    for name, param in params.items():
        grad = grads[name]
        velocity = _buffer(state.moments, name, param)
        if state.kind == "sgdm":
            velocity *= state.momentum
            velocity += grad
            param -= state.lr * velocity
        else:
            second = _buffer(state.second_moments, name, param)
            velocity *= state.adam_beta1
            velocity += (1.0 - state.adam_beta1) * grad
            second *= state.adam_beta2
            second += (1.0 - state.adam_beta2) * grad * grad
            first_hat = velocity / (1.0 - state.adam_beta1 ** state.step_count)
            second_hat = second / (1.0 - state.adam_beta2 ** state.step_count)
            param -= state.lr * first_hat / (np.sqrt(second_hat) + state.adam_eps)
    return params, state


@dataclasses.dataclass(frozen=True)
class FineTuneSchedule:
    start_lr: float = 1e-5
    epochs: int = 0
    batch_doubling_period_epochs: int = 10
    lr_halving_period_epochs: int = 10
    stop_when_no_improvement: bool = True


@dataclasses.dataclass(frozen=True)
class TrainSchedule:
    epochs: int = 10
    initial_lr: float = 2.5e-2
    lr_drop_factor: float = 0.5
    lr_drop_period_epochs: int = 2
    minibatch_size: int = 120
    shuffle_each_epoch: bool = True
    finetune: FineTuneSchedule = None

    def __post_init__(self):
        if self.epochs < 1:
            raise ScheduleError("Number of epochs must be at least 1, got {}".format(self.epochs))
        if self.minibatch_size < 1:
            raise ScheduleError("Minibatch size must be at least 1, got {}".format(self.minibatch_size))
        if not 0 < self.lr_drop_factor <= 1:
            raise ScheduleError("Learning rate drop factor must be in (0, 1], got {}".format(self.lr_drop_factor))
        if self.lr_drop_period_epochs < 1:
            raise ScheduleError("Learning rate drop period must be at least 1, got {}".format(self.lr_drop_period_epochs))


def schedule_lr(schedule, epoch, phase="main"):
    """
    Learning rate for a zero-based epoch of the main or finetune phase.
    """
    if epoch < 0:
        raise ScheduleError("Epoch must be non-negative, got {}".format(epoch))
    if phase == "main":
        drops = epoch // schedule.lr_drop_period_epochs
        return schedule.initial_lr * schedule.lr_drop_factor ** drops
    if phase == "finetune":
        finetune = schedule.finetune or FineTuneSchedule()
        return finetune.start_lr * 0.5 ** (epoch // finetune.lr_halving_period_epochs)
    raise ScheduleError("Unknown training phase {!r}".format(phase))


def schedule_batch_size(base, epoch, period=10):
    """Finetune companion of schedule_lr: the batch size doubles every period epochs."""
    return base * 2 ** (epoch // period)


def steps_per_epoch(sample_count, batch_size):
    return math.ceil(sample_count / batch_size)
