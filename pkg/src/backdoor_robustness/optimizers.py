"""Step rules shared by every training and tuning loop.

Each optimizer owns its momentum buffer and advances a flat parameter vector
given a closure ``closure(params) -> (loss, grad)`` evaluated on the current
minibatch. The closure may be called more than once per step (SAM evaluates an
ascent point before descending).
"""
from abc import ABC, abstractmethod
from typing import Callable, Optional, Tuple

import numpy as np

from .nn_core import Gradient, ParamVector, SgdConfig, param_axpy_unit, param_norm, sgd_step

Closure = Callable[[ParamVector], Tuple[float, Gradient]]


class Optimizer(ABC):
    """Base class holding the SGD-with-momentum state."""

    def __init__(self, cfg: SgdConfig):
        self.cfg = cfg
        self.velocity: Optional[ParamVector] = None

    def _descend(self, params: ParamVector, grad: Gradient) -> ParamVector:
        if self.velocity is None:
            self.velocity = np.zeros_like(params)
        params, self.velocity = sgd_step(params, grad, self.velocity, self.cfg)
        return params

    @abstractmethod
    def step(self, params: ParamVector, closure: Closure) -> Tuple[ParamVector, float]:
        """Advance ``params`` by one update; returns the new params and the loss at the evaluated point."""


class SGD(Optimizer):
    """Plain gradient step at the current point."""

    def step(self, params: ParamVector, closure: Closure) -> Tuple[ParamVector, float]:
        loss, grad = closure(params)
        return self._descend(params, grad), loss


class SAM(Optimizer):
    """Sharpness-aware step: descend with the gradient taken at W + rho * g / ||g||."""

    def __init__(self, cfg: SgdConfig, rho: float):
        super().__init__(cfg)
        self.rho = rho

    def step(self, params: ParamVector, closure: Closure) -> Tuple[ParamVector, float]:
        loss, grad = closure(params)
        ascent = param_axpy_unit(params, grad, self.rho)
        _, ascent_grad = closure(ascent)
        return self._descend(params, ascent_grad), loss


class PathAware(Optimizer):
    """Descend with the gradient taken ``rho`` along the unit direction to an anchor.

    The anchor is the backdoored starting point W0; while the current point
    still equals the anchor the direction is degenerate and the step point is the
    current point itself.
    """

    def __init__(self, cfg: SgdConfig, anchor: ParamVector, rho: float):
        super().__init__(cfg)
        self.anchor = anchor.copy()
        self.rho = rho
        self.last_offset_norm = 0.0

    def step(self, params: ParamVector, closure: Closure) -> Tuple[ParamVector, float]:
        direction = self.anchor - params
        shifted = param_axpy_unit(params, direction, self.rho)
        self.last_offset_norm = param_norm(shifted.astype(np.float64) - params.astype(np.float64))
        loss, grad = closure(shifted)
        return self._descend(params, grad), loss
