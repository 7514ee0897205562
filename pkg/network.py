import copy
import struct
import logging
from dataclasses import dataclass
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

import tensor as T
from core import FormatError, ShapeError
from tensor import Parameter, Tensor

logger = logging.getLogger("lsskd.network")


class BackboneConfig(BaseModel):
    model_config = ConfigDict(frozen=True)
    stages: int = Field(3, ge=2)
    channels: Tuple[int, ...] = (16, 32, 64)
    blocks: int = Field(2, ge=1)
    input_shape: Tuple[int, int, int] = (3, 32, 32)
    num_classes: int = Field(10, ge=2)
    num_transforms: int = Field(4, ge=1, le=4)

    @model_validator(mode="after")
    def _check(self):
        if len(self.channels) != self.stages: raise ValueError("channels must list one width per stage")
        return self

    @property
    def joint_size(self) -> int:
        return self.num_classes * self.num_transforms

    @classmethod
    def from_settings(cls, settings, input_shape=None, num_classes=None) -> "BackboneConfig":
        return cls(stages=settings.model.stages, channels=tuple(settings.model.channels), blocks=settings.model.blocks,
                   input_shape=tuple(input_shape or settings.dataset.image_shape), num_classes=num_classes or settings.dataset.num_classes,
                   num_transforms=settings.model.transforms)


# --- MODULES ---
class Module:
    def __init__(self):
        self.training = True
        self._buffers: Dict[str, np.ndarray] = {}

    def _children(self) -> Iterator[Tuple[str, object]]:
        for name, value in vars(self).items():
            if name.startswith("_"): continue
            if isinstance(value, (Parameter, Module)): yield name, value
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module): yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for name, child in self._children():
            if isinstance(child, Parameter): yield prefix + name, child
            else: yield from child.named_parameters(f"{prefix}{name}.")

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        for name, buf in self._buffers.items(): yield prefix + name, buf
        for name, child in self._children():
            if isinstance(child, Module): yield from child.named_buffers(f"{prefix}{name}.")

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, child in self._children():
            if isinstance(child, Module): yield from child.modules()

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def train(self, mode: bool = True):
        for m in self.modules(): m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters(): p.grad = None

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]):
        own = dict(self.named_parameters()); bufs = dict(self.named_buffers())
        expected = set(own) | set(bufs)
        missing, unexpected = expected - set(state), set(state) - expected
        if missing or unexpected:
            raise FormatError(f"checkpoint does not match the network (missing {sorted(missing)[:3]}, unexpected {sorted(unexpected)[:3]})")
        for name, p in own.items():
            if state[name].shape != p.shape: raise FormatError(f"{name}: checkpoint shape {state[name].shape} != {p.shape}")
            p.data = np.array(state[name], dtype=T.get_dtype())
        for name, buf in bufs.items(): buf[...] = state[name]


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, kernel: int, stride: int = 1, padding: int = 0):
        super().__init__()
        self.weight = Parameter(np.zeros((cout, cin, kernel, kernel)), "conv")
        self.stride, self.padding = stride, padding

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, None, self.stride, self.padding)


class BatchNorm2d(Module):
    def __init__(self, channels: int):
        super().__init__()
        self.scale = Parameter(np.ones(channels), "norm_scale")
        self.shift = Parameter(np.zeros(channels), "norm_shift")
        self._buffers = {"running_mean": np.zeros(channels, dtype=T.get_dtype()), "running_var": np.ones(channels, dtype=T.get_dtype())}

    def __call__(self, x: Tensor) -> Tensor:
        return T.batchnorm2d(x, self.scale, self.shift, self._buffers["running_mean"], self._buffers["running_var"], self.training)


class Linear(Module):
    def __init__(self, din: int, dout: int):
        super().__init__()
        self.weight = Parameter(np.zeros((din, dout)), "linear")
        self.bias = Parameter(np.zeros(dout), "bias")

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class BasicBlock(Module):
    """conv-norm-relu-conv-norm plus shortcut; a 1x1 projection when shape changes."""

    def __init__(self, cin: int, cout: int, stride: int):
        super().__init__()
        self.conv1 = Conv2d(cin, cout, 3, stride, 1); self.bn1 = BatchNorm2d(cout)
        self.conv2 = Conv2d(cout, cout, 3, 1, 1); self.bn2 = BatchNorm2d(cout)
        self.shortcut = [Conv2d(cin, cout, 1, stride, 0), BatchNorm2d(cout)] if stride != 1 or cin != cout else []

    def __call__(self, x: Tensor) -> Tensor:
        out = T.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        skip = self.shortcut[1](self.shortcut[0](x)) if self.shortcut else x
        return T.relu(out + skip)


class Stage(Module):
    def __init__(self, cin: int, cout: int, blocks: int, stride: int):
        super().__init__()
        self.blocks = [BasicBlock(cin if i == 0 else cout, cout, stride if i == 0 else 1) for i in range(blocks)]

    def __call__(self, x: Tensor) -> Tensor:
        for block in self.blocks: x = block(x)
        return x


class Backbone(Module):
    """Feature extractor (stem + L stages), global pooling and the N-way classifier."""

    def __init__(self, config: BackboneConfig):
        super().__init__()
        ch = config.channels
        self.stem = [Conv2d(config.input_shape[0], ch[0], 3, 1, 1), BatchNorm2d(ch[0])]
        self.stages = [Stage(ch[l - 1] if l else ch[0], ch[l], config.blocks, 1 if l == 0 else 2) for l in range(config.stages)]
        self.classifier = Linear(ch[-1], config.num_classes)
        self._input_shape = tuple(config.input_shape)

    def features(self, x: Tensor) -> List[Tensor]:
        if x.ndim != 4 or x.shape[1:] != self._input_shape:
            raise ShapeError(f"expected input [B, {', '.join(map(str, self._input_shape))}], got {list(x.shape)}")
        h = T.relu(self.stem[1](self.stem[0](x)))
        feats = []
        for stage in self.stages:
            h = stage(h); feats.append(h)
        return feats


class AuxiliaryBranch(Module):
    """Stage-l side network: copies of stages l+1..L, global pooling, K-way classifier."""

    def __init__(self, config: BackboneConfig, stage: int):
        super().__init__()
        ch = config.channels
        self.extract = [Stage(ch[s - 1], ch[s], config.blocks, 2) for s in range(stage + 1, config.stages)]
        self.classifier = Linear(ch[-1], config.joint_size)

    def pooled(self, feature: Tensor) -> Tensor:
        for stage in self.extract: feature = stage(feature)
        return T.global_avg_pool(feature)


@dataclass
class MainOutput:
    final_logits: Tensor
    stage_features: List[Tensor]


@dataclass
class AuxOutput:
    sad_logits: List[Tensor]
    pooled_features: List[Tensor]
    final_pooled: Tensor
    final_logits: Tensor


class StudentNetwork(Module):
    def __init__(self, config: BackboneConfig):
        super().__init__()
        self.config = config
        self.backbone = Backbone(config)
        self.branches = [AuxiliaryBranch(config, l) for l in range(config.stages)]

    def forward_main(self, x) -> MainOutput:
        feats = self.backbone.features(T.as_tensor(x))
        return MainOutput(self.backbone.classifier(T.global_avg_pool(feats[-1])), feats)

    def forward_aux(self, x_expanded) -> AuxOutput:
        """One backbone pass over the expanded batch feeding every auxiliary head."""
        x_expanded = T.as_tensor(x_expanded)
        feats = self.backbone.features(x_expanded)
        final_pooled = T.global_avg_pool(feats[-1])
        pooled = [branch.pooled(f) for branch, f in zip(self.branches[:-1], feats[:-1])] + [final_pooled]
        sad = [branch.classifier(p) for branch, p in zip(self.branches, pooled)]
        return AuxOutput(sad, pooled, final_pooled, self.backbone.classifier(final_pooled))

    def predict(self, x) -> Tensor:
        return self.forward_main(x).final_logits


class InferenceNetwork(Module):
    """The stripped export: backbone and final head only."""

    def __init__(self, config: BackboneConfig):
        super().__init__()
        self.config = config
        self.backbone = Backbone(config)

    def forward_main(self, x) -> MainOutput:
        feats = self.backbone.features(T.as_tensor(x))
        return MainOutput(self.backbone.classifier(T.global_avg_pool(feats[-1])), feats)

    def forward_aux(self, x_expanded):
        raise ShapeError("stripped network has no auxiliary K-way heads")

    def predict(self, x) -> Tensor:
        return self.forward_main(x).final_logits


def strip_export(network: StudentNetwork) -> InferenceNetwork:
    stripped = InferenceNetwork(network.config)
    stripped.backbone = copy.deepcopy(network.backbone)
    stripped.train(network.training)
    logger.info("stripped auxiliary branches: %d -> %d parameters", network.parameter_count(), stripped.parameter_count())
    return stripped


def init_parameters(network: Module, seed: int):
    """He-normal convs, fan-in-scaled classifiers, unit norm scales, zero shifts and biases."""
    rng = np.random.default_rng(seed)
    for _, p in network.named_parameters():
        if p.role == "conv":
            fan_in = int(np.prod(p.shape[1:]))
            p.data = rng.normal(0.0, np.sqrt(2.0 / fan_in), p.shape).astype(T.get_dtype())
        elif p.role == "linear":
            p.data = rng.normal(0.0, np.sqrt(1.0 / p.shape[0]), p.shape).astype(T.get_dtype())
        elif p.role == "norm_scale":
            p.data = np.ones(p.shape, dtype=T.get_dtype())
        else:
            p.data = np.zeros(p.shape, dtype=T.get_dtype())
        p.grad = None
    for name, buf in network.named_buffers():
        buf[...] = 1.0 if name.endswith("running_var") else 0.0


# --- CHECKPOINT CONTAINER ---
CHECKPOINT_MAGIC = b"LSSK"
CHECKPOINT_VERSION = 1
FLAG_STRIPPED = 1
STRIPPED_PREFIXES = ("branches.", "optim.")
_HEADER = struct.Struct("<4sHH32sII")
_DTYPE_TAGS = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


@dataclass
class Checkpoint:
    state: Dict[str, np.ndarray]
    digest: bytes
    epoch: int
    stripped: bool

    @property
    def model_state(self) -> Dict[str, np.ndarray]:
        return {k: v for k, v in self.state.items() if not k.startswith(("optim.", "meta."))}

    def section(self, prefix: str) -> Dict[str, np.ndarray]:
        return {k[len(prefix):]: v for k, v in self.state.items() if k.startswith(prefix)}


def state_parameter_count(state: Dict[str, np.ndarray]) -> int:
    """Trainable values in a container: everything but norm statistics, optimizer and meta records."""
    return sum(int(v.size) for k, v in state.items()
               if not k.startswith(("optim.", "meta.")) and not k.endswith(("running_mean", "running_var")))


def save_checkpoint(path: str, state: Dict[str, np.ndarray], digest: bytes, epoch: int = 0, stripped: bool = False):
    if stripped: state = {k: v for k, v in state.items() if not k.startswith(STRIPPED_PREFIXES)}
    out = bytearray(_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, FLAG_STRIPPED if stripped else 0, digest, epoch, len(state)))
    for name, value in state.items():
        arr = np.asarray(value)
        tag = 1 if arr.dtype == np.float64 else 0
        encoded = name.encode("utf-8")
        out += struct.pack("<H", len(encoded)) + encoded + struct.pack("<BB", tag, arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape) + arr.astype(_DTYPE_TAGS[tag]).tobytes()
    with open(path, "wb") as f: f.write(out)


def load_checkpoint(path: str) -> Checkpoint:
    try:
        with open(path, "rb") as f: buf = f.read()
    except OSError as e:
        raise FormatError(f"cannot read checkpoint {path}: {e}")
    if len(buf) < _HEADER.size: raise FormatError(f"{path}: truncated checkpoint header")
    magic, version, flags, digest, epoch, count = _HEADER.unpack_from(buf, 0)
    if magic != CHECKPOINT_MAGIC: raise FormatError(f"{path}: bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
    if version != CHECKPOINT_VERSION: raise FormatError(f"{path}: unsupported checkpoint version {version}")
    pos = _HEADER.size; state = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", buf, pos); pos += 2
            name = buf[pos:pos + nlen].decode("utf-8"); pos += nlen
            tag, ndim = struct.unpack_from("<BB", buf, pos); pos += 2
            shape = struct.unpack_from(f"<{ndim}I", buf, pos); pos += 4 * ndim
            dtype = _DTYPE_TAGS[tag]; nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
            if pos + nbytes > len(buf): raise FormatError(f"{path}: record {name!r} truncated")
            state[name] = np.frombuffer(buf, dtype=dtype, count=nbytes // dtype.itemsize, offset=pos).reshape(shape).copy()
            pos += nbytes
    except (struct.error, KeyError, UnicodeDecodeError) as e:
        raise FormatError(f"{path}: corrupt checkpoint record ({e})")
    return Checkpoint(state, digest, epoch, bool(flags & FLAG_STRIPPED))


def build_from_checkpoint(checkpoint: Checkpoint, config: BackboneConfig, expected_digest: Optional[bytes] = None):
    if expected_digest is not None and checkpoint.digest != expected_digest:
        raise FormatError("checkpoint config digest does not match the configuration")
    network = InferenceNetwork(config) if checkpoint.stripped else StudentNetwork(config)
    network.load_state_dict(checkpoint.model_state)
    return network.eval()
