"""Parameter containers, a few layers, and the Adam optimizer."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class Module:
    """Attribute-walking parameter container.

    Parameters are ``Tensor`` attributes with ``requires_grad`` set; child
    modules and lists of modules are walked recursively. Names follow
    attribute insertion order, which makes checkpoints stable.
    """

    training: bool = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    def modules(self) -> Iterator["Module"]:
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        ad.zero_grad(self.parameters().values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for k, p in params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"{k}: expected shape {p.shape}, got {arr.shape}")
            p.data = arr.copy()


def param(arr) -> Tensor:
    return Tensor(arr, requires_grad=True)


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> Tensor:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return param(rng.uniform(-limit, limit, size=shape or (fan_in, fan_out)))


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, bias: bool = True):
        self.n_in, self.n_out = n_in, n_out
        self.weight = glorot(rng, n_in, n_out)
        self.bias = param(np.zeros(n_out)) if bias else None

    def __call__(self, x) -> Tensor:
        x = ad.as_tensor(x)
        if x.shape[-1] != self.n_in:
            raise ValueError(f"Linear expects last dim {self.n_in}, got input shape {x.shape}")
        out = ad.matmul(x, self.weight) if x.ndim >= 2 else ad.matmul(x.reshape(1, -1), self.weight).reshape(-1)
        return out + self.bias if self.bias is not None else out


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.eps = eps
        self.gain = param(np.ones(d))
        self.shift = param(np.zeros(d))

    def __call__(self, x: Tensor) -> Tensor:
        mu = x.mean(axis=-1, keepdims=True)
        centered = x - mu
        var = (centered * centered).mean(axis=-1, keepdims=True)
        return centered * ad.power(var + self.eps, -0.5) * self.gain + self.shift


# ---------------------------------------------------------------------------
# Adam with decoupled weight decay


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, name: str):
        super().__init__(f"non-finite gradient in parameter '{name}'; step aborted")
        self.name = name


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray | None],
    state: dict,
    lr: float,
    weight_decay: float = 0.0,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> None:
    """One in-place AdamW update.

    ``state`` holds ``t`` plus per-name first/second moments ``m``/``v``;
    it is created on first use. All gradients are validated before any
    parameter is touched, so a bad gradient leaves everything unchanged.
    """
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    for name, g in grads.items():
        if g is None:
            continue
        if g.shape != params[name].shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(name)
    b1, b2 = betas
    m = state.setdefault("m", {})
    v = state.setdefault("v", {})
    state["t"] = t = state.get("t", 0) + 1
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        mn = m.get(name)
        if mn is None:
            mn = m[name] = np.zeros_like(p)
            v[name] = np.zeros_like(p)
        vn = v[name]
        mn *= b1
        mn += (1.0 - b1) * g
        vn *= b2
        vn += (1.0 - b2) * g * g
        if weight_decay:
            p -= lr * weight_decay * p
        p -= lr * (mn / c1) / (np.sqrt(vn / c2) + eps)


class Adam:
    def __init__(self, params: dict[str, Tensor], lr: float = 1e-4, weight_decay: float = 0.0,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.weight_decay = weight_decay
        self.betas = betas
        self.eps = eps
        self.state: dict = {"t": 0, "m": {}, "v": {}}

    def step(self) -> None:
        adam_step(
            {k: p.data for k, p in self.params.items()},
            {k: p.grad for k, p in self.params.items()},
            self.state,
            self.lr,
            self.weight_decay,
            self.betas,
            self.eps,
        )

    def zero_grad(self) -> None:
        ad.zero_grad(self.params.values())
