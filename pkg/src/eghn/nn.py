"""Parameters, MLPs, Adam and weight checkpoints."""

from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

CHECKPOINT_VERSION = 1

ACTIVATIONS = {
    "silu": ad.silu,
    "relu": ad.relu,
    "tanh": ad.tanh,
    "sigmoid": ad.sigmoid,
}


class Module:
    """Base class: parameters are discovered by walking attributes in definition order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in vars(self).items():
            yield from _walk(val, f"{prefix}{key}")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        unexpected = set(state) - set(params)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for k, p in params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"{k}: checkpoint shape {arr.shape} != parameter shape {p.shape}")
            p.data = arr.copy()

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def _walk(val, name: str):
    if isinstance(val, Tensor):
        if val.requires_grad:
            yield name, val
    elif isinstance(val, Module):
        yield from val.named_parameters(prefix=name + ".")
    elif isinstance(val, (list, tuple)):
        for i, v in enumerate(val):
            yield from _walk(v, f"{name}.{i}")


class Linear(Module):
    """Affine map ``x @ W + b`` over the last axis.

    Weights are drawn uniformly from ``[-s, s]`` with ``s = scale / sqrt(fan_in)``.
    """

    def __init__(self, fan_in: int, fan_out: int, rng: np.random.Generator, scale: float = 1.0, bias: bool = True):
        bound = scale / math.sqrt(fan_in)
        self.weight = Tensor(rng.uniform(-bound, bound, size=(fan_in, fan_out)), requires_grad=True)
        self.bias = Tensor(rng.uniform(-bound, bound, size=(fan_out,)), requires_grad=True) if bias else None
        self.fan_in = fan_in
        self.fan_out = fan_out

    def __call__(self, x: Tensor) -> Tensor:
        x = ad.as_tensor(x)
        if x.shape[-1] != self.fan_in:
            raise ValueError(f"Linear expects last dim {self.fan_in}, got shape {x.shape}")
        lead = x.shape[:-1]
        # flatten leading axes so numpy hands one GEMM to BLAS
        y = x.reshape(-1, self.fan_in) @ self.weight
        if self.bias is not None:
            y = y + self.bias
        return y.reshape(lead + (self.fan_out,))


class MLP(Module):
    """Feed-forward stack ``widths[0] -> ... -> widths[-1]``.

    The activation is applied between layers; ``output_activation`` may be
    ``None`` (identity), ``"softmax"`` (over the last axis) or an activation name.
    """

    def __init__(
        self,
        widths: list[int],
        rng: np.random.Generator,
        activation: str = "silu",
        output_activation: str | None = None,
        last_scale: float = 1.0,
    ):
        if len(widths) < 2 or any(w <= 0 for w in widths):
            raise ValueError(f"MLP needs >= 2 positive widths, got {widths}")
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        if output_activation not in (None, "identity", "softmax", *ACTIVATIONS):
            raise ValueError(f"unknown output activation {output_activation!r}")
        self.widths = list(widths)
        n = len(widths) - 1
        self.layers = [
            Linear(widths[k], widths[k + 1], rng, scale=last_scale if k == n - 1 else 1.0) for k in range(n)
        ]
        self.activation = activation
        self.output_activation = output_activation

    def __call__(self, x: Tensor) -> Tensor:
        return self.tail(self.layers[0](x))

    def tail(self, pre: Tensor) -> Tensor:
        """Finish the forward pass from the first layer's pre-activation."""
        act = ACTIVATIONS[self.activation]
        x = pre
        for layer in self.layers[1:]:
            x = layer(act(x))
        if self.output_activation == "softmax":
            x = ad.softmax(x, axis=-1)
        elif self.output_activation in ACTIVATIONS:
            x = ACTIVATIONS[self.output_activation](x)
        return x


class Adam:
    """Adam with decoupled weight decay (the AdamW form).

    Decay is applied as ``p -= lr * weight_decay * p`` before the moment update.
    """

    def __init__(
        self,
        params: list[Tensor],
        lr: float = 1e-3,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
    ):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        self.t = adam_step(
            [p.data for p in self.params], grads, self.m, self.v, self.t,
            self.lr, self.betas, self.eps, self.weight_decay,
        )

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def state_dict(self) -> dict:
        return {"t": self.t, "m": [m.copy() for m in self.m], "v": [v.copy() for v in self.v]}


def adam_step(params, grads, m, v, t, lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0) -> int:
    """Update ``params`` and moment buffers in place; return the new step count."""
    b1, b2 = betas
    t += 1
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for p, g, mk, vk in zip(params, grads, m, v):
        if g.shape != p.shape:
            raise ValueError(f"adam_step: grad shape {g.shape} != param shape {p.shape}")
        if weight_decay:
            p -= lr * weight_decay * p
        mk *= b1
        mk += (1.0 - b1) * g
        vk *= b2
        vk += (1.0 - b2) * g * g
        p -= lr * (mk / c1) / (np.sqrt(vk / c2) + eps)
    return t


def clip_grad_norm(params, max_norm: float) -> float:
    """Scale every ``p.grad`` so their joint L2 norm is at most ``max_norm``; return the norm before scaling."""
    grads = [p.grad for p in params if p.grad is not None]
    norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads)))
    if max_norm > 0 and norm > max_norm:
        for g in grads:
            g *= max_norm / norm
    return norm


# ----------------------------------------------------------------------
# checkpoints
# ----------------------------------------------------------------------


def save_checkpoint(path, module: Module, extra: dict | None = None) -> None:
    """Write parameters as JSON: ``{format_version, params: {name: {shape, data}}, extra}``."""
    doc = {
        "format_version": CHECKPOINT_VERSION,
        "params": {
            k: {"shape": list(p.shape), "data": p.data.reshape(-1).tolist()} for k, p in module.named_parameters()
        },
        "extra": extra or {},
    }
    Path(path).write_text(json.dumps(doc))


def read_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    doc = json.loads(Path(path).read_text())
    version = doc.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint format_version {version!r} (expected {CHECKPOINT_VERSION})")
    state = {}
    for k, entry in doc["params"].items():
        arr = np.asarray(entry["data"], dtype=np.float64)
        shape = tuple(entry["shape"])
        if arr.size != int(np.prod(shape)):
            raise ValueError(f"{k}: {arr.size} values do not fill shape {shape}")
        state[k] = arr.reshape(shape)
    return state, doc.get("extra", {})


def load_checkpoint(path, module: Module) -> dict:
    state, extra = read_checkpoint(path)
    module.load_state_dict(state)
    return extra
