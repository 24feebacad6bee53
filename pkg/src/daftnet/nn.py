"""Layers, residual block, initialization, AdamW and the step learning-rate schedule."""
from __future__ import annotations

import math
from pathlib import Path
from typing import Callable, Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor

HOOK_POINTS = ("before_block", "before_conv1", "before_relu1", "before_conv2", "before_shortcut_conv")


class Parameter(Tensor):
    """A leaf tensor that an optimizer updates."""

    def __init__(self, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype or np.float32)


class Module:
    """Container that discovers parameters, buffers and sub-modules by attribute."""

    training = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def _children(self) -> Iterator[tuple[str, object]]:
        for name, value in vars(self).items():
            if isinstance(value, (Parameter, Module)):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, (Parameter, Module)):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in self._children():
            if isinstance(value, Parameter):
                yield prefix + name, value
            else:
                yield from value.named_parameters(prefix + name + ".")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name in getattr(self, "_buffers", ()):
            yield prefix + name, getattr(self, name)
        for name, value in self._children():
            if isinstance(value, Module):
                yield from value.named_buffers(prefix + name + ".")

    def modules(self) -> Iterator[Module]:
        yield self
        for _, value in self._children():
            if isinstance(value, Module):
                yield from value.modules()

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def train(self, mode: bool = True) -> Module:
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> Module:
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        state.update({name: b.copy() for name, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        expected = set(params) | set(buffers)
        if set(state) != expected:
            missing = sorted(expected - set(state))
            extra = sorted(set(state) - expected)
            raise KeyError(f"state dict mismatch: missing {missing}, unexpected {extra}")
        for name, p in params.items():
            if state[name].shape != p.data.shape:
                raise ValueError(f"{name}: shape {state[name].shape} != {p.data.shape}")
            p.data = np.array(state[name], dtype=p.data.dtype)
        for name, b in buffers.items():
            b[...] = state[name]

    def astype(self, dtype) -> Module:
        dtype = T.DTYPES.get(dtype, dtype)
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, bias: bool = True):
        self.in_features, self.out_features = in_features, out_features
        self.has_bias = bias
        self.weight = Parameter(np.zeros((out_features, in_features)))
        if bias:
            self.bias = Parameter(np.zeros(out_features))

    def forward(self, x: Tensor) -> Tensor:
        out = T.matmul(x, T.transpose(self.weight))
        if self.has_bias:
            out = out + self.bias
        return out


class Conv3d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 3,
                 stride: int = 1, padding: int | None = None, bias: bool = False):
        self.in_channels, self.out_channels = in_channels, out_channels
        self.kernel_size, self.stride = kernel_size, stride
        self.padding = kernel_size // 2 if padding is None else padding
        self.weight = Parameter(np.zeros((out_channels, in_channels) + (kernel_size,) * 3))
        self.has_bias = bias
        if bias:
            self.bias = Parameter(np.zeros(out_channels))

    def forward(self, x: Tensor) -> Tensor:
        return T.conv3d(x, self.weight, self.bias if self.has_bias else None, self.stride, self.padding)


class BatchNorm3d(Module):
    """Batch normalization over (N, D, H, W) per channel.

    With ``affine=False`` the layer owns no gamma/beta parameters at all.
    """

    _buffers = ("running_mean", "running_var")

    def __init__(self, num_features: int, affine: bool = True, momentum: float = 0.1, eps: float = 1e-5):
        self.num_features = num_features
        self.affine_enabled = affine
        self.momentum, self.eps = momentum, eps
        if affine:
            self.gamma = Parameter(np.ones(num_features))
            self.beta = Parameter(np.zeros(num_features))
        self.running_mean = np.zeros(num_features)
        self.running_var = np.ones(num_features)

    @property
    def mode(self) -> str:
        return "train" if self.training else "eval"

    def forward(self, x: Tensor) -> Tensor:
        gamma = self.gamma if self.affine_enabled else None
        beta = self.beta if self.affine_enabled else None
        return T.batch_norm(x, gamma, beta, self.running_mean, self.running_var,
                            self.training, self.momentum, self.eps)


Hook = Callable[[str, Tensor], Tensor]


class ResBlock(Module):
    """Pre-activation-free residual block with named hook points.

    ``out = relu(bn2(conv2(relu(bn1(conv1(x))))) + shortcut(x))``; the shortcut
    is a 1x1x1 convolution plus BatchNorm whenever channels or stride change
    (or ``projection=True``), the identity otherwise.
    """

    def __init__(self, in_channels: int, out_channels: int, stride: int = 1,
                 projection: bool = False, bn1_affine: bool = True):
        self.in_channels, self.out_channels, self.stride = in_channels, out_channels, stride
        self.conv1 = Conv3d(in_channels, out_channels, 3, stride)
        self.bn1 = BatchNorm3d(out_channels, affine=bn1_affine)
        self.conv2 = Conv3d(out_channels, out_channels, 3, 1)
        self.bn2 = BatchNorm3d(out_channels)
        self.has_projection = projection or stride != 1 or in_channels != out_channels
        if self.has_projection:
            self.shortcut_conv = Conv3d(in_channels, out_channels, 1, stride, padding=0)
            self.shortcut_bn = BatchNorm3d(out_channels)

    def hook_channels(self, point: str) -> int:
        """Channel count of the feature map seen at a hook point."""
        if point not in HOOK_POINTS:
            raise ValueError(f"unknown hook point {point!r}; expected one of {HOOK_POINTS}")
        return self.in_channels if point in ("before_block", "before_conv1", "before_shortcut_conv") else self.out_channels

    def forward(self, x: Tensor, hook: Hook | None = None) -> Tensor:
        at = hook or (lambda name, t: t)
        x = at("before_block", x)
        h = self.conv1(at("before_conv1", x))
        h = at("before_relu1", self.bn1(h))
        h = self.bn2(self.conv2(at("before_conv2", T.relu(h))))
        if self.has_projection:
            sc = self.shortcut_bn(self.shortcut_conv(at("before_shortcut_conv", x)))
        else:
            sc = x
        return T.relu(h + sc)


def kaiming_init(module: Module, seed: int) -> Module:
    """He-normal weights (std sqrt(2 / fan_in)), zero biases, BatchNorm gamma=1, beta=0.

    Parameters are visited in ``named_parameters`` order, so the same seed and
    architecture always give the same values.
    """
    rng = np.random.default_rng(seed)
    for m in module.modules():
        if isinstance(m, (Linear, Conv3d)):
            fan_in = int(np.prod(m.weight.shape[1:]))
            m.weight.data = rng.normal(0.0, math.sqrt(2.0 / fan_in), m.weight.shape).astype(m.weight.dtype)
            if m.has_bias:
                m.bias.data = np.zeros_like(m.bias.data)
        elif isinstance(m, BatchNorm3d) and m.affine_enabled:
            m.gamma.data = np.ones_like(m.gamma.data)
            m.beta.data = np.zeros_like(m.beta.data)
    return module


class AdamW:
    """Adam with decoupled weight decay.

    ``theta <- theta - lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * theta)``;
    the decay term never enters the moment estimates.
    """

    def __init__(self, params, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = [np.zeros_like(p.data, dtype=np.float64) for p in self.params]
        self.v = [np.zeros_like(p.data, dtype=np.float64) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        for i, p in enumerate(self.params):
            if p.grad is not None and not np.isfinite(p.grad).all():
                raise T.NonFiniteError(f"non-finite gradient for parameter {i} with shape {p.shape}")
        self.step_count += 1
        t = self.step_count
        c1 = 1 - self.beta1 ** t
        c2 = 1 - self.beta2 ** t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad.astype(np.float64)
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps) + self.weight_decay * p.data
            p.data = (p.data - self.lr * update).astype(p.dtype)


def lr_schedule(epoch: int, total_epochs: int, lr0: float) -> float:
    """Step schedule: lr0, then lr0/10 from ceil(0.6*total), lr0/20 from ceil(0.9*total)."""
    if not 0 <= epoch < total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {total_epochs})")
    if epoch >= math.ceil(0.9 * total_epochs):
        return lr0 / 20
    if epoch >= math.ceil(0.6 * total_epochs):
        return lr0 / 10
    return lr0


# -- checkpoints ------------------------------------------------------------

def save_state(state: dict[str, np.ndarray], directory) -> Path:
    """Write ``manifest.txt`` plus one raw tensor file (and ``.meta`` sidecar) per entry."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    for i, (name, arr) in enumerate(state.items()):
        fname = f"t{i:04d}.bin"
        T.save_tensor(directory / fname, np.asarray(arr))
        shape = ",".join(str(s) for s in np.shape(arr))
        lines.append(f"{name}\t{shape}\t{np.asarray(arr).dtype.name}\t{fname}")
    (directory / "manifest.txt").write_text("\n".join(lines) + "\n")
    return directory


def load_state(directory) -> dict[str, np.ndarray]:
    directory = Path(directory)
    manifest = directory / "manifest.txt"
    if not manifest.exists():
        raise FileNotFoundError(f"no checkpoint manifest at {manifest}")
    state = {}
    for line in manifest.read_text().splitlines():
        if not line.strip():
            continue
        name, shape, dtype, fname = line.split("\t")
        arr = T.load_tensor(directory / fname).data
        want = tuple(int(s) for s in shape.split(",") if s)
        if arr.shape != want or arr.dtype.name != dtype:
            raise ValueError(f"{fname}: manifest says {dtype}{list(want)}, file holds {arr.dtype.name}{list(arr.shape)}")
        state[name] = arr
    return state
