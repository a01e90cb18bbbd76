"""U-Net builders for the depth network and the synthesis network.

Level 0 runs at full resolution; each of the ``levels`` encoder stages below
it halves the resolution with a stride-2 convolution, so the bottleneck sits
at ``(H / 2**levels, W / 2**levels)``. Every stage has two 3x3 convolutions;
decoder stages upsample (nearest, 2x), convolve, concatenate the matching
encoder output in front, and convolve again.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from .errors import ConfigurationError, ContractError
from .tensor import (
    Tensor,
    concat_channels,
    conv2d,
    leaky_relu,
    relu,
    scale_shift,
    sigmoid,
    upsample_nearest2x,
)

KERNEL = 3
ENCODER_SLOPE = 0.2


@dataclass(frozen=True)
class UNetConfig:
    levels: int = 3
    base_channels: int = 8
    in_channels: int = 3
    out_channels: int = 1
    output_head: str = "depth"  # "depth" or "rgb"
    max_depth: float = 10.0
    max_channels: int = 1024

    def __post_init__(self):
        if self.levels < 1:
            raise ConfigurationError(f"levels must be >= 1, got {self.levels}")
        if self.base_channels < 1 or self.in_channels < 1 or self.out_channels < 1:
            raise ConfigurationError("channel counts must be positive")
        if self.output_head not in ("depth", "rgb"):
            raise ConfigurationError(f"output_head must be 'depth' or 'rgb', got {self.output_head!r}")
        if self.output_head == "depth" and not self.max_depth > 0:
            raise ConfigurationError("depth head needs max_depth > 0")

    @property
    def channels(self) -> list[int]:
        """Channels per level: ``base`` at levels 0 and 1, doubling after, capped."""
        return [self.base_channels] + [
            min(self.base_channels * 2 ** (i - 1), self.max_channels) for i in range(1, self.levels + 1)
        ]

    def check_input(self, height: int, width: int) -> None:
        f = 2**self.levels
        if height % f or width % f:
            raise ConfigurationError(
                f"input {height}x{width} not divisible by 2**levels = {f}"
            )

    def to_header(self, prefix: str) -> dict[str, str]:
        return {f"{prefix}.{k}": str(v) for k, v in asdict(self).items()}

    @classmethod
    def from_header(cls, header: dict[str, str], prefix: str) -> "UNetConfig":
        kw = {}
        for f in fields(cls):
            key = f"{prefix}.{f.name}"
            if key in header:
                raw = header[key]
                kw[f.name] = raw if f.type == "str" else (float(raw) if f.type == "float" else int(raw))
        return cls(**kw)


def depnet_config(levels: int = 3, base_channels: int = 8, max_depth: float = 10.0, **kw) -> UNetConfig:
    return UNetConfig(levels=levels, base_channels=base_channels, in_channels=3, out_channels=1,
                      output_head="depth", max_depth=max_depth, **kw)


def synnet_config(levels: int = 3, base_channels: int = 8, in_channels: int = 3, **kw) -> UNetConfig:
    return UNetConfig(levels=levels, base_channels=base_channels, in_channels=in_channels,
                      out_channels=3, output_head="rgb", **kw)


# 256x256 (NYU/Replica) and 256x768 (KITTI) layouts: eight halvings reach the
# 1x1 and 1x3 bottlenecks.
REFERENCE_SQUARE = UNetConfig(levels=8, base_channels=16, max_channels=1024, max_depth=10.0)
REFERENCE_KITTI = UNetConfig(levels=8, base_channels=16, max_channels=512, max_depth=80.0)


def shape_schedule(cfg: UNetConfig, height: int, width: int) -> dict:
    """Activation shapes ``(C, H, W)`` of every stage, computed without tensors."""
    cfg.check_input(height, width)
    ch = cfg.channels
    enc = [(ch[i], height >> i, width >> i) for i in range(cfg.levels + 1)]
    dec = [(ch[i], height >> i, width >> i) for i in range(cfg.levels - 1, -1, -1)]
    return {
        "input": (cfg.in_channels, height, width),
        "encoder": enc,
        "bottleneck": enc[-1],
        "decoder": dec,
        "output": (cfg.out_channels, height, width),
    }


def layer_specs(cfg: UNetConfig) -> list[tuple[str, int, int, int]]:
    """``(name, in_channels, out_channels, stride)`` for every convolution, in build order."""
    ch = cfg.channels
    specs = [("enc0.conv0", cfg.in_channels, ch[0], 1), ("enc0.conv1", ch[0], ch[0], 1)]
    for i in range(1, cfg.levels + 1):
        specs.append((f"enc{i}.conv0", ch[i - 1], ch[i], 2))
        specs.append((f"enc{i}.conv1", ch[i], ch[i], 1))
    for i in range(cfg.levels - 1, -1, -1):
        specs.append((f"dec{i}.up", ch[i + 1], ch[i], 1))
        specs.append((f"dec{i}.fuse", 2 * ch[i], ch[i], 1))
    specs.append(("head", ch[0], cfg.out_channels, 1))
    return specs


def parameter_count(cfg: UNetConfig) -> int:
    return sum(cout * cin * KERNEL * KERNEL + cout for _, cin, cout, _ in layer_specs(cfg))


class Network:
    """Named parameter tensors plus the config that shaped them."""

    def __init__(self, config: UNetConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params
        self.forward_count = 0

    def named_parameters(self):
        return self.params.items()

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def astype(self, dtype) -> "Network":
        return Network(
            self.config,
            {k: Tensor(p.data.astype(dtype), requires_grad=p.requires_grad, name=k) for k, p in self.params.items()},
        )

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state(self) -> dict[str, np.ndarray]:
        return {k: p.data for k, p in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, p in self.params.items():
            if k not in state:
                raise ConfigurationError(f"missing parameter {k!r}")
            if state[k].shape != p.shape:
                raise ConfigurationError(f"parameter {k!r} has shape {state[k].shape}, expected {p.shape}")
            p.data = np.array(state[k], dtype=p.dtype)

    def __call__(self, x):
        if self.config.output_head == "depth":
            return depnet_forward(self, x)
        return synnet_forward(self, x)


def build_unet(config: UNetConfig, seed: int = 0, dtype=np.float32) -> Network:
    """He-uniform (fan-in) weights and zero biases, deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    for name, cin, cout, _ in layer_specs(config):
        fan_in = cin * KERNEL * KERNEL
        bound = np.sqrt(6.0 / fan_in)
        w = rng.uniform(-bound, bound, size=(cout, cin, KERNEL, KERNEL)).astype(dtype)
        params[f"{name}.weight"] = Tensor(w, requires_grad=True, name=f"{name}.weight")
        params[f"{name}.bias"] = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True, name=f"{name}.bias")
    return Network(config, params)


def _conv(net, name, x, stride=1):
    return conv2d(x, net.params[f"{name}.weight"], net.params[f"{name}.bias"], stride=stride, padding=1)


def unet_features(net: Network, x: Tensor, trace: dict | None = None) -> Tensor:
    """Run encoder and decoder; returns the pre-head feature map.

    When ``trace`` is given it receives ``encoder`` and ``decoder_inputs``
    lists (the fused concatenations) for structural checks.
    """
    cfg = net.config
    if x.shape[1] != cfg.in_channels:
        raise ConfigurationError(f"expected {cfg.in_channels} input channels, got {x.shape[1]}")
    cfg.check_input(x.shape[2], x.shape[3])
    skips = []
    for i in range(cfg.levels + 1):
        x = leaky_relu(_conv(net, f"enc{i}.conv0", x, stride=1 if i == 0 else 2), ENCODER_SLOPE)
        x = leaky_relu(_conv(net, f"enc{i}.conv1", x), ENCODER_SLOPE)
        skips.append(x)
    fused = []
    for i in range(cfg.levels - 1, -1, -1):
        x = relu(_conv(net, f"dec{i}.up", upsample_nearest2x(x)))
        cat = concat_channels(skips[i], x)
        fused.append(cat)
        x = relu(_conv(net, f"dec{i}.fuse", cat))
    if trace is not None:
        trace["encoder"] = skips
        trace["decoder_inputs"] = fused
    return x


def _as_input(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def depnet_forward(net: Network, rgb, trace: dict | None = None) -> Tensor:
    """``(N, 3, H, W)`` image -> ``(N, 1, H, W)`` depth in ``(0, max_depth)`` meters."""
    if net.config.output_head != "depth":
        raise ContractError("depnet_forward called on a network without a depth head")
    net.forward_count += 1
    feat = unet_features(net, _as_input(rgb), trace)
    return scale_shift(sigmoid(_conv(net, "head", feat)), net.config.max_depth, 0.0)


def synnet_forward(net: Network, warped, trace: dict | None = None) -> Tensor:
    """``(N, C, H, W)`` warped input -> ``(N, 3, H, W)`` RGB in ``(0, 1)``."""
    if net.config.output_head != "rgb":
        raise ContractError("synnet_forward called on a network without an rgb head")
    net.forward_count += 1
    feat = unet_features(net, _as_input(warped), trace)
    return sigmoid(_conv(net, "head", feat))
