"""
A miniature U-Net: conv/instance-norm/relu blocks on the way down, a
bottleneck block, nearest-neighbour upsampling with concatenated skips on
the way up, and a 1x1 head feeding a two-channel softmax.

Channel 0 of the output is the foreground probability.

Usage:
    from segnet import NetConfig, init_params, forward
    params = init_params(NetConfig(depth=2, base_channels=8))
    probs = forward(params, image)        # GraphNode [2, H, W]
"""
import logging
import math
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass
from typing import Dict, Iterator, List, Mapping, Tuple, Union

import numpy as np

from autodiff import (
    GraphNode,
    ShapeError,
    Tensor,
    as_node,
    concat_channels,
    conv2d,
    downsample2,
    instance_norm,
    parameter,
    relu,
    softmax_channels,
    tensor,
    upsample2,
)
from errors import ConfigError

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"SGNT"
CHECKPOINT_VERSION = 1
OUTPUT_CLASSES = 2


@dataclass(frozen=True)
class NetConfig:
    depth: int = 2
    base_channels: int = 8
    kernel: int = 3
    input_channels: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.depth < 1:
            raise ConfigError(f"net.depth must be >= 1, got {self.depth}")
        if self.base_channels < 1 or self.input_channels < 1:
            raise ConfigError("net.base_channels and net.input_channels must be >= 1")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ConfigError(f"net.kernel must be odd, got {self.kernel}")
        if self.seed < 0:
            raise ConfigError(f"net.seed must be unsigned, got {self.seed}")

    def channels(self, level: int) -> int:
        """Width of encoder level `level`; level == depth is the bottleneck."""
        return self.base_channels * 2 ** level

    def check_image(self, height: int, width: int) -> None:
        """Images fed to this net need both sides divisible by 2^depth."""
        step = 2 ** self.depth
        if height % step or width % step:
            raise ConfigError(f"image size {height}x{width} is not divisible by 2^net.depth = {step}")

    def as_dict(self) -> Dict[str, int]:
        return asdict(self)


class ParameterSet:
    """Ordered, uniquely named network tensors."""

    def __init__(self, tensors: Mapping[str, Tensor] = ()):
        self._tensors: "OrderedDict[str, Tensor]" = OrderedDict()
        for name, value in dict(tensors).items():
            self[name] = value

    def __setitem__(self, name: str, value) -> None:
        self._tensors[name] = tensor(value)

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def __eq__(self, other) -> bool:
        if not isinstance(other, ParameterSet) or list(self) != list(other):
            return False
        return all(
            self[n].shape == other[n].shape and np.array_equal(self[n], other[n]) for n in self
        )

    def items(self):
        return self._tensors.items()

    def names(self) -> List[str]:
        return list(self._tensors)

    def count(self) -> int:
        """Total number of scalar parameters."""
        return int(sum(v.size for v in self._tensors.values()))

    def leaves(self) -> Dict[str, GraphNode]:
        """Fresh gradient-tracking leaf per tensor, for one forward/backward pass."""
        return {name: parameter(value, name=name) for name, value in self._tensors.items()}

    def copy(self) -> "ParameterSet":
        return ParameterSet(self._tensors)


ParamsLike = Union[ParameterSet, Mapping[str, object]]


#=========================================== INITIALISATION ===========================================

def _block_shapes(prefix: str, cin: int, cout: int, k: int) -> List[Tuple[str, Tuple[int, ...]]]:
    return [
        (f"{prefix}.conv1.w", (cout, cin, k, k)),
        (f"{prefix}.conv1.b", (cout,)),
        (f"{prefix}.norm1.g", (cout,)),
        (f"{prefix}.norm1.b", (cout,)),
        (f"{prefix}.conv2.w", (cout, cout, k, k)),
        (f"{prefix}.conv2.b", (cout,)),
        (f"{prefix}.norm2.g", (cout,)),
        (f"{prefix}.norm2.b", (cout,)),
    ]


def parameter_shapes(cfg: NetConfig) -> List[Tuple[str, Tuple[int, ...]]]:
    """Every parameter name and shape, in creation order."""
    shapes = []
    cin = cfg.input_channels
    for level in range(cfg.depth):
        shapes += _block_shapes(f"enc{level}", cin, cfg.channels(level), cfg.kernel)
        cin = cfg.channels(level)
    shapes += _block_shapes("bottleneck", cin, cfg.channels(cfg.depth), cfg.kernel)
    cin = cfg.channels(cfg.depth)
    for level in reversed(range(cfg.depth)):
        skip = cfg.channels(level)
        shapes += _block_shapes(f"dec{level}", cin + skip, skip, cfg.kernel)
        cin = skip
    shapes += [("head.w", (OUTPUT_CLASSES, cin, 1, 1)), ("head.b", (OUTPUT_CLASSES,))]
    return shapes


def parameter_count(cfg: NetConfig) -> int:
    return int(sum(np.prod(shape) for _, shape in parameter_shapes(cfg)))


def xavier_bound(shape: Tuple[int, ...]) -> float:
    cout, cin, k, _ = shape
    return math.sqrt(6.0 / (k * k * cin + k * k * cout))


def init_params(cfg: NetConfig) -> ParameterSet:
    """
    Xavier-uniform kernels, zero biases, unit norm gains, zero norm biases.

    Parameters:
        cfg (NetConfig): Architecture and seed.

    Returns:
        ParameterSet: Deterministic for a given cfg.
    """
    rng = np.random.default_rng(cfg.seed)
    params = ParameterSet()
    for name, shape in parameter_shapes(cfg):
        if name.endswith(".w"):
            bound = xavier_bound(shape)
            params[name] = rng.uniform(-bound, bound, size=shape)
        elif ".norm" in name and name.endswith(".g"):
            params[name] = np.ones(shape)
        else:
            params[name] = np.zeros(shape)
    logger.debug(f"initialised {len(params)} tensors, {params.count()} parameters (seed {cfg.seed})")
    return params


#=========================================== FORWARD ===========================================

def _block(p: Mapping[str, GraphNode], prefix: str, x: GraphNode) -> GraphNode:
    x = conv2d(x, p[f"{prefix}.conv1.w"], p[f"{prefix}.conv1.b"])
    x = relu(instance_norm(x, p[f"{prefix}.norm1.g"], p[f"{prefix}.norm1.b"]))
    x = conv2d(x, p[f"{prefix}.conv2.w"], p[f"{prefix}.conv2.b"])
    return relu(instance_norm(x, p[f"{prefix}.norm2.g"], p[f"{prefix}.norm2.b"]))


def _depth_of(p: Mapping[str, object]) -> int:
    return sum(1 for name in p if name.startswith("enc") and name.endswith(".conv1.w"))


def forward(params: ParamsLike, image) -> GraphNode:
    """
    Runs the network on one image.

    Parameters:
        params: A ParameterSet, or a name -> GraphNode/array mapping (e.g. from ParameterSet.leaves()).
        image: [Cin, H, W] tensor with H and W divisible by 2^depth.

    Returns:
        GraphNode: [2, H, W] per-pixel class probabilities.
    """
    p = {name: as_node(value) for name, value in params.items()}
    x = as_node(image)
    if x.value.ndim != 3:
        raise ShapeError(f"forward expects a [Cin,H,W] image, got {x.shape}")
    depth = _depth_of(p)
    step = 2 ** depth
    if x.shape[1] % step or x.shape[2] % step:
        raise ShapeError(f"image {x.shape[1]}x{x.shape[2]} is not divisible by 2^depth = {step}")

    skips = []
    for level in range(depth):
        x = _block(p, f"enc{level}", x)
        skips.append(x)
        x = downsample2(x)
    x = _block(p, "bottleneck", x)
    for level in reversed(range(depth)):
        x = concat_channels(upsample2(x), skips[level])
        x = _block(p, f"dec{level}", x)
    return softmax_channels(conv2d(x, p["head.w"], p["head.b"]))


def predict(params: ParamsLike, image) -> Tensor:
    """Foreground probability map [H, W] without keeping the graph around."""
    return tensor(forward(params, image).value[0])


#=========================================== CHECKPOINTS ===========================================

def save_checkpoint(path: str, params: ParameterSet) -> None:
    """
    Binary checkpoint: "SGNT", u32 version, u32 count, then per entry
    u16 name length, name, u8 rank, u32 dims, little-endian f64 values.
    """
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(params)))
        for name, value in params.items():
            encoded = name.encode("utf-8")
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<B", value.ndim))
            f.write(struct.pack(f"<{value.ndim}I", *value.shape))
            f.write(np.ascontiguousarray(value, dtype="<f8").tobytes())
    logger.debug(f"saved {len(params)} tensors to {path}")


class CheckpointError(ValueError):
    """A checkpoint that is not in SGNT format or ends early."""


def _unpack(fmt: str, data: bytes, offset: int) -> Tuple[tuple, int]:
    size = struct.calcsize(fmt)
    if offset + size > len(data):
        raise CheckpointError(f"checkpoint truncated at byte offset {offset}")
    return struct.unpack_from(fmt, data, offset), offset + size


def load_checkpoint(path: str) -> ParameterSet:
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path} is not an SGNT checkpoint")
    (version, count), offset = _unpack("<II", data, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    params = ParameterSet()
    for _ in range(count):
        (length,), offset = _unpack("<H", data, offset)
        if offset + length > len(data):
            raise CheckpointError(f"checkpoint truncated at byte offset {offset}")
        name = data[offset:offset + length].decode("utf-8")
        offset += length
        (rank,), offset = _unpack("<B", data, offset)
        dims, offset = _unpack(f"<{rank}I", data, offset)
        size = int(np.prod(dims)) * 8
        if offset + size > len(data):
            raise CheckpointError(f"checkpoint truncated at byte offset {offset}")
        params[name] = np.frombuffer(data[offset:offset + size], dtype="<f8").reshape(dims)
        offset += size
    return params
