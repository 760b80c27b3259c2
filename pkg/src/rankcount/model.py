"""The density regressor: a small conv stack plus a single-filter head."""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .tensor import CheckpointError, ShapeError, Tensor, conv2d, load_tensors, relu, save_tensors, softplus


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class NetConfig:
    """Each width adds {3x3 conv, relu, 2x2 stride-2 conv, relu}; output stride is 2**len(widths)."""

    in_channels: int = 3
    widths: tuple[int, ...] = (16, 32, 64, 64)
    input_shift: float = 0.5  # subtracted from [0, 1] pixels before the first conv
    input_scale: float = 1.0  # multiplies the shifted pixels

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if self.in_channels < 1 or not self.widths or any(w < 1 for w in self.widths):
            raise ConfigError(f"invalid layer spec: in_channels={self.in_channels}, widths={self.widths}")

    @property
    def output_stride(self) -> int:
        return 2 ** len(self.widths)

    def param_count(self) -> int:
        total, c = 0, self.in_channels
        for w in self.widths:
            total += 9 * c * w + w  # 3x3 conv
            total += 4 * w * w + w  # 2x2 stride-2 conv
            c = w
        return total + 9 * c + 1  # head

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d


class CountingNet:
    def __init__(self, config: NetConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params

    @property
    def output_stride(self) -> int:
        return self.config.output_stride

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def __call__(self, batch) -> Tensor:
        return forward(self, batch)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) ^ set(state)
        if missing:
            raise CheckpointError(f"parameter names differ: {sorted(missing)}")
        for k, p in self.params.items():
            if state[k].shape != p.shape:
                raise CheckpointError(f"{k}: checkpoint shape {state[k].shape} != model shape {p.shape}")
            p.data = np.array(state[k], dtype=p.dtype)
            p.grad = None

    def clone(self) -> "CountingNet":
        return CountingNet(self.config, {k: Tensor(v.data.copy(), requires_grad=True, name=k) for k, v in self.params.items()})

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for k, v in self.params.items():
            h.update(k.encode())
            h.update(np.ascontiguousarray(v.data, dtype="<f4").tobytes())
        return h.hexdigest()


def init(
    config: NetConfig,
    rng: np.random.Generator,
    zero_head: bool = False,
    head_scale: float = 1.0,
    head_bias: float = 0.0,
) -> CountingNet:
    """He-normal weights (std sqrt(2/fan_in)), zero biases.

    ``head_scale`` shrinks the head's initial weights and ``head_bias`` sets
    its initial bias, which controls the starting density level.
    """

    def weight(name, shape):
        fan_in = shape[1] * shape[2] * shape[3]
        data = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
        return name, Tensor(data.astype(np.float32), requires_grad=True, name=name)

    def zeros(name, n):
        return name, Tensor(np.zeros(n, dtype=np.float32), requires_grad=True, name=name)

    params = []
    c = config.in_channels
    for i, w in enumerate(config.widths):
        params += [weight(f"block{i}.conv.weight", (w, c, 3, 3)), zeros(f"block{i}.conv.bias", w)]
        params += [weight(f"block{i}.down.weight", (w, w, 2, 2)), zeros(f"block{i}.down.bias", w)]
        c = w
    if zero_head:
        params.append(("head.weight", Tensor(np.zeros((1, c, 3, 3), np.float32), requires_grad=True, name="head.weight")))
    else:
        name, head = weight("head.weight", (1, c, 3, 3))
        head.data *= np.float32(head_scale)
        params.append((name, head))
    params.append(("head.bias", Tensor(np.full(1, head_bias, np.float32), requires_grad=True, name="head.bias")))
    return CountingNet(config, dict(params))


def forward(net: CountingNet, batch) -> Tensor:
    """[N, C, in, in] -> non-negative density map [N, 1, in/stride, in/stride]."""
    x = batch if isinstance(batch, Tensor) else Tensor(np.asarray(batch, dtype=np.float32))
    if x.ndim != 4:
        raise ShapeError(f"expected a [N,C,H,W] batch, got {x.shape}")
    stride = net.output_stride
    _, c, h, w = x.shape
    if c != net.config.in_channels:
        raise ShapeError(f"network expects {net.config.in_channels} channels, got {c}")
    if h % stride or w % stride:
        raise ShapeError(f"input {h}x{w} is not a multiple of the output stride {stride}")
    if net.config.input_shift:
        x = x - net.config.input_shift
    if net.config.input_scale != 1.0:
        x = x * net.config.input_scale
    p = net.params
    for i in range(len(net.config.widths)):
        x = relu(conv2d(x, p[f"block{i}.conv.weight"], p[f"block{i}.conv.bias"], stride=1, pad=1))
        x = relu(conv2d(x, p[f"block{i}.down.weight"], p[f"block{i}.down.bias"], stride=2, pad=0))
    return softplus(conv2d(x, p["head.weight"], p["head.bias"], stride=1, pad=1))


def save_checkpoint(net: CountingNet, path: str | Path, extra: dict | None = None) -> None:
    meta = {"architecture": net.config.to_dict()}
    if extra:
        meta.update(extra)
    save_tensors(path, net.state_dict(), meta)


def load_checkpoint(path: str | Path, expect: NetConfig | None = None) -> tuple[CountingNet, dict]:
    state, meta = load_tensors(path)
    arch = meta.get("architecture")
    if arch is None:
        raise CheckpointError(f"{path}: no architecture recorded")
    config = NetConfig(arch["in_channels"], tuple(arch["widths"]), arch.get("input_shift", 0.0), arch.get("input_scale", 1.0))
    if expect is not None and config != expect:
        raise CheckpointError(f"{path}: architecture {config} does not match expected {expect}")
    net = init(config, np.random.default_rng(0))
    net.load_state_dict(state)
    return net, meta
