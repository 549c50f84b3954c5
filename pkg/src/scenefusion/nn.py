"""Parameters, modules, the Adam optimizer and the finite-difference checker."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Dict, Iterator, List, Tuple

import numpy as np

from .tensor import Tensor, conv2d, linear


class Parameter(Tensor):
    """A trainable tensor. ``frozen`` parameters are skipped by optimizers."""

    __slots__ = ("name", "frozen")

    def __init__(self, data, name: str = "", frozen: bool = False):
        super().__init__(data, requires_grad=True)
        self.name = name
        self.frozen = frozen


class Module:
    """Container that discovers parameters and submodules from its attributes."""

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for key, value in vars(self).items():
            path = f"{prefix}{key}"
            if isinstance(value, Parameter):
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(path + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{path}.{i}", item
            elif isinstance(value, dict):
                for k in sorted(value):
                    item = value[k]
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{k}.")

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def assign_names(self, prefix: str = "") -> None:
        for name, p in self.named_parameters(prefix):
            p.name = name

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        if missing:
            raise KeyError(f"missing parameters: {missing}")
        for name, p in own.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} != expected {p.shape}")
            p.data = arr.copy()

    def freeze(self, frozen: bool = True) -> "Module":
        for p in self.parameters():
            p.frozen = frozen
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def uniform_init(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def he_init(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, k: int, rng: np.random.Generator, stride: int = 1,
                 bias: bool = True, init: str = "he"):
        fan_in = cin * k * k
        make = he_init if init == "he" else uniform_init
        self.weight = Parameter(make(rng, (cout, cin, k, k), fan_in))
        self.bias = Parameter(np.zeros(cout)) if bias else None
        self.stride = stride
        self.padding = k // 2

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class Linear(Module):
    def __init__(self, din: int, dout: int, rng: np.random.Generator, bias: bool = True):
        self.weight = Parameter(uniform_init(rng, (dout, din), din))
        self.bias = Parameter(np.zeros(dout)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)


class Adam:
    """Adam with decoupled weight decay and a per-epoch exponential lr schedule.

    Frozen parameters are never touched, even if they carry gradients.
    """

    def __init__(self, params: List[Parameter], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 1e-3, gamma: float = 0.97):
        self.params = [p for p in params if not p.frozen]
        self.base_lr = lr
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.gamma = gamma
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        if self.lr == 0.0:
            return
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.frozen or p.grad is None:
                continue
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps) - self.lr * self.weight_decay * p.data

    def end_epoch(self) -> None:
        self.lr *= self.gamma


@dataclass
class GradCheckReport:
    max_rel_err: float
    n_checked: int
    worst: str

    def passed(self, tol: float) -> bool:
        return self.max_rel_err < tol


def grad_check(fn: Callable[[], Tensor], params: List[Tuple[str, Tensor]], step: float = 1e-5,
               max_per_tensor: int = 64, seed: int = 0) -> GradCheckReport:
    """Compare analytic gradients of scalar ``fn()`` with central differences.

    Tensors with more than ``max_per_tensor`` elements are checked on a seeded
    sample of that many positions. Relative error uses the denominator
    ``max(|analytic|, |numeric|, 1e-8)``.
    """
    rng = np.random.default_rng(seed)
    params = list(params)
    for _, p in params:
        p.grad = None
    loss = fn()
    if not np.all(np.isfinite(loss.data)):
        raise FloatingPointError("grad_check: non-finite loss")
    loss.backward()
    analytic = {name: (p.grad.copy() if p.grad is not None else np.zeros(p.shape)) for name, p in params}

    worst_err, worst_at, n = 0.0, "", 0
    for name, p in params:
        size = p.data.size
        idx = np.arange(size) if size <= max_per_tensor else rng.choice(size, max_per_tensor, replace=False)
        p.data = np.ascontiguousarray(p.data)
        flat = p.data.reshape(-1)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            fp = fn().item()
            flat[i] = orig - step
            fm = fn().item()
            flat[i] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise FloatingPointError(f"grad_check: non-finite loss perturbing {name}[{i}]")
            num = (fp - fm) / (2 * step)
            ana = analytic[name].reshape(-1)[i]
            err = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
            n += 1
            if err > worst_err:
                worst_err, worst_at = err, f"{name}[{i}]"
    return GradCheckReport(worst_err, n, worst_at)
