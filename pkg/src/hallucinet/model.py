"""Branch networks, the multi-branch model bundle, availability routing,
score fusion, and checkpoint serialization.

Each branch is a fully convolutional stack: per block, (3x3 conv -> BN ->
ReLU) repeated, then 2x2 max pooling; stride 2 on the very first conv; a
1x1 score head; and one bilinear-initialized transposed convolution
restoring input resolution. The activation after the pooling layer at
`tap_depth` is exposed for the mimicry loss.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import tensor_from_bytes, tensor_to_bytes
from .engine import (
    BatchNormState,
    Parameter,
    Tensor,
    batchnorm,
    bilinear_kernel,
    channel_softmax,
    conv2d,
    maxpool2,
    mul,
    relu,
    transposed_conv2d,
)

CHECKPOINT_MAGIC = b"HCKP"


class MissingModalityError(RuntimeError):
    """A selected branch has no input raster to consume."""


@dataclass(frozen=True)
class BranchConfig:
    class_count: int
    blocks: tuple[tuple[int, int], ...] = ((32, 2), (64, 2), (128, 2), (256, 2))
    first_conv_stride: int = 2
    tap_depth: int = 3

    def __post_init__(self):
        if self.class_count < 2:
            raise ValueError("need at least 2 classes")
        if not self.blocks or any(w < 1 or n < 1 for w, n in self.blocks):
            raise ValueError("blocks must be nonempty with positive widths and conv counts")
        if not 1 <= self.tap_depth <= len(self.blocks):
            raise ValueError(f"tap depth {self.tap_depth} outside 1..{len(self.blocks)}")
        if self.first_conv_stride < 1:
            raise ValueError("first conv stride must be positive")
        object.__setattr__(self, "blocks", tuple((int(w), int(n)) for w, n in self.blocks))

    @property
    def downsample_factor(self) -> int:
        return self.first_conv_stride * 2 ** len(self.blocks)

    def to_json(self) -> dict:
        return {"class_count": self.class_count,
                "blocks": [list(b) for b in self.blocks],
                "first_conv_stride": self.first_conv_stride,
                "tap_depth": self.tap_depth}

    @classmethod
    def from_json(cls, doc: dict) -> "BranchConfig":
        return cls(class_count=int(doc["class_count"]),
                   blocks=tuple(tuple(b) for b in doc["blocks"]),
                   first_conv_stride=int(doc["first_conv_stride"]),
                   tap_depth=int(doc["tap_depth"]))


@dataclass
class BranchOutput:
    tap: Tensor
    logits: Tensor


def _conv_init(rng: np.random.Generator, out_ch: int, in_ch: int, k: int,
               dtype) -> np.ndarray:
    bound = 1.0 / np.sqrt(in_ch * k * k)
    return rng.uniform(-bound, bound, size=(out_ch, in_ch, k, k)).astype(dtype)


class _ConvBnRelu:
    def __init__(self, prefix: str, in_ch: int, out_ch: int, stride: int,
                 rng: np.random.Generator, dtype, conv_idx: int):
        self.stride = stride
        cname = f"{prefix}/conv{conv_idx}"
        bname = f"{prefix}/bn{conv_idx}"
        self.weight = Parameter(_conv_init(rng, out_ch, in_ch, 3, dtype), f"{cname}/weight")
        self.bias = Parameter(np.zeros(out_ch, dtype=dtype), f"{cname}/bias")
        self.scale = Parameter(np.ones(out_ch, dtype=dtype), f"{bname}/scale")
        self.shift = Parameter(np.zeros(out_ch, dtype=dtype), f"{bname}/shift")
        self.state = BatchNormState(out_ch, dtype=dtype)
        self.bn_name = bname

    def forward(self, x: Tensor, mode: str) -> Tensor:
        y = conv2d(x, self.weight, self.bias, stride=self.stride, padding=1)
        return relu(batchnorm(y, self.scale, self.shift, self.state, mode))

    def parameters(self) -> list[Parameter]:
        return [self.weight, self.bias, self.scale, self.shift]

    def buffers(self) -> dict[str, np.ndarray]:
        return {f"{self.bn_name}/running_mean": self.state.running_mean,
                f"{self.bn_name}/running_var": self.state.running_var}


class BranchNet:
    """One fully convolutional branch with tap and full-resolution logits."""

    def __init__(self, config: BranchConfig, input_channels: int, role: str,
                 rng: np.random.Generator, dtype=np.float32):
        self.config = config
        self.input_channels = input_channels
        self.role = role
        self.dtype = dtype
        self.blocks: list[list[_ConvBnRelu]] = []
        ch = input_channels
        for b, (width, n_convs) in enumerate(config.blocks):
            units = []
            for i in range(n_convs):
                stride = config.first_conv_stride if (b == 0 and i == 0) else 1
                units.append(_ConvBnRelu(f"{role}/block{b}", ch, width, stride,
                                         rng, dtype, i))
                ch = width
            self.blocks.append(units)
        self.score_weight = Parameter(_conv_init(rng, config.class_count, ch, 1, dtype),
                                      f"{role}/score/weight")
        self.score_bias = Parameter(np.zeros(config.class_count, dtype=dtype),
                                    f"{role}/score/bias")
        factor = config.downsample_factor
        self.upsample_weight = Parameter(
            bilinear_kernel(config.class_count, 2 * factor, dtype=dtype),
            f"{role}/upsample/weight")

    def forward(self, x, mode: str = "infer") -> BranchOutput:
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.dtype))
        n, c, h, w = x.shape
        if c != self.input_channels:
            raise ValueError(f"branch {self.role} expects {self.input_channels} channels, got {c}")
        factor = self.config.downsample_factor
        if h % factor or w % factor:
            raise ValueError(f"input extents must be divisible by {factor}, got {h}x{w}")
        t = x
        tap = None
        for b, units in enumerate(self.blocks):
            for unit in units:
                t = unit.forward(t, mode)
            t = maxpool2(t)
            if b == self.config.tap_depth - 1:
                tap = t
        scores = conv2d(t, self.score_weight, self.score_bias)
        logits = transposed_conv2d(scores, self.upsample_weight, stride=factor)
        return BranchOutput(tap=tap, logits=logits)

    def parameters(self) -> list[Parameter]:
        params = []
        for units in self.blocks:
            for unit in units:
                params.extend(unit.parameters())
        params.extend([self.score_weight, self.score_bias, self.upsample_weight])
        return params

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for units in self.blocks:
            for unit in units:
                out.update(unit.buffers())
        return out

    def set_buffers(self, values: dict[str, np.ndarray]):
        for units in self.blocks:
            for unit in units:
                unit.state.running_mean = values[f"{unit.bn_name}/running_mean"].copy()
                unit.state.running_var = values[f"{unit.bn_name}/running_var"].copy()


def build_branch(config: BranchConfig, input_channels: int, role: str,
                 rng, dtype=np.float32) -> BranchNet:
    """Construct a branch; `rng` is a seed int or a numpy Generator."""
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    return BranchNet(config, input_channels, role, rng, dtype)


def init_hallucination_from(target: BranchNet, input_channels: int,
                            rng) -> BranchNet:
    """Deep-copy the target branch into a hallucination branch.

    When the consumed modality's channel count differs from the target's,
    the first conv layer is re-initialized fresh; everything else
    (including batchnorm running statistics) is copied.
    """
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    hal = BranchNet(target.config, input_channels, f"hal_{target.role}", rng,
                    target.dtype)
    src_params = target.parameters()
    dst_params = hal.parameters()
    for src, dst in zip(src_params, dst_params):
        if src.data.shape != dst.data.shape:
            continue  # fresh first conv when channel counts differ
        dst.data = src.data.copy()
    prefix = target.role + "/"
    hal.set_buffers({f"{hal.role}/{name[len(prefix):]}": arr
                     for name, arr in target.buffers().items()})
    return hal


def fuse_logits(logit_list: list[Tensor]) -> Tensor:
    """Elementwise arithmetic mean of raw branch scores."""
    if not logit_list:
        raise ValueError("cannot fuse an empty logit list")
    first = logit_list[0]
    for other in logit_list[1:]:
        if other.shape != first.shape:
            raise ValueError(f"logit shape mismatch: {other.shape} vs {first.shape}")
    acc = first
    for t in logit_list[1:]:
        acc = acc + t
    return mul(acc, 1.0 / len(logit_list))


@dataclass
class ModelBundle:
    """Per-modality branches plus hallucination branches, keyed by role."""
    config: BranchConfig
    branches: dict[str, BranchNet]
    role_modalities: dict[str, str]
    stage: str = "init"

    def optional_roles(self) -> list[str]:
        order = [r for r in ("depth", "ir") if r in self.branches]
        return order

    def hallucinated_roles(self) -> list[str]:
        return [r for r in self.optional_roles() if f"hal_{r}" in self.branches]

    def availability_from_modalities(self, flags: dict[str, bool]) -> dict[str, bool]:
        return {role: bool(flags.get(self.role_modalities[role], True))
                for role in self.optional_roles()}

    def input_modality(self, role: str) -> str:
        if role.startswith("hal_"):
            return self.role_modalities["rgb"]
        return self.role_modalities[role]

    def parameters(self) -> list[Parameter]:
        params = []
        for role in sorted(self.branches):
            params.extend(self.branches[role].parameters())
        return params


def select_branches(bundle: ModelBundle, availability: dict[str, bool]) -> list[str]:
    """Branch roles to fuse: rgb always, real branch if available, else its
    hallucination branch fed by the always-available modality."""
    selected = ["rgb"]
    for role in bundle.optional_roles():
        if availability.get(role, True):
            selected.append(role)
        elif f"hal_{role}" in bundle.branches:
            selected.append(f"hal_{role}")
        else:
            raise MissingModalityError(
                f"modality for branch {role} unavailable and no hallucination branch exists")
    return selected


def predict_probs(bundle: ModelBundle, inputs: dict[str, np.ndarray],
                  availability: dict[str, bool]) -> np.ndarray:
    """Fused per-pixel class probabilities (softmax of mean raw scores)."""
    selected = select_branches(bundle, availability)
    logits = []
    for role in selected:
        mod = bundle.input_modality(role)
        if mod not in inputs:
            raise MissingModalityError(f"branch {role} needs modality {mod!r}")
        logits.append(bundle.branches[role].forward(inputs[mod], "infer").logits)
    return channel_softmax(fuse_logits(logits)).data


def predict(bundle: ModelBundle, inputs: dict[str, np.ndarray],
            availability: dict[str, bool]) -> np.ndarray:
    """Per-pixel class map; argmax ties go to the lowest class index."""
    return predict_probs(bundle, inputs, availability).argmax(axis=1)


def ensemble_predict(bundle_a: ModelBundle, bundle_b: ModelBundle,
                     inputs: dict[str, np.ndarray],
                     availability: dict[str, bool]) -> np.ndarray:
    """Average the two models' softmax probability maps, then argmax."""
    pa = predict_probs(bundle_a, inputs, availability)
    pb = predict_probs(bundle_b, inputs, availability)
    if pa.shape != pb.shape:
        raise ValueError(f"ensemble shape mismatch: {pa.shape} vs {pb.shape}")
    return ((pa + pb) * 0.5).argmax(axis=1)


# -- checkpoint io -----------------------------------------------------------

def save_checkpoint(bundle: ModelBundle, path, stage: str | None = None):
    """One file: JSON header (config, roles, stage) + named tensor records."""
    tensors: dict[str, np.ndarray] = {}
    branch_meta = []
    for role in sorted(bundle.branches):
        branch = bundle.branches[role]
        branch_meta.append({"role": role, "input_channels": branch.input_channels})
        for p in branch.parameters():
            tensors[p.name] = p.data.astype(np.float32)
        for name, arr in branch.buffers().items():
            tensors[name] = arr.astype(np.float32)
    header = {
        "format": "hallucinet-checkpoint",
        "format_version": 1,
        "stage": stage if stage is not None else bundle.stage,
        "config": bundle.config.to_json(),
        "role_modalities": bundle.role_modalities,
        "branches": branch_meta,
        "tensors": list(tensors),
    }
    blob = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for name in header["tensors"]:
            fh.write(tensor_to_bytes(tensors[name]))


def load_checkpoint(path) -> ModelBundle:
    blob = Path(path).read_bytes()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ValueError("not a checkpoint file (bad magic)")
    (hlen,) = struct.unpack_from("<I", blob, 4)
    header = json.loads(blob[8:8 + hlen].decode("utf-8"))
    if header.get("format") != "hallucinet-checkpoint":
        raise ValueError("not a checkpoint file (bad header)")
    offset = 8 + hlen
    tensors: dict[str, np.ndarray] = {}
    for name in header["tensors"]:
        arr, offset = tensor_from_bytes(blob, offset)
        tensors[name] = arr
    config = BranchConfig.from_json(header["config"])
    branches: dict[str, BranchNet] = {}
    rng = np.random.default_rng(0)  # values are overwritten below
    for meta in header["branches"]:
        role = meta["role"]
        branch = BranchNet(config, int(meta["input_channels"]), role, rng)
        for p in branch.parameters():
            if p.name not in tensors:
                raise ValueError(f"checkpoint missing tensor {p.name}")
            if tensors[p.name].shape != p.data.shape:
                raise ValueError(f"checkpoint tensor {p.name} has wrong shape")
            p.data = tensors[p.name].astype(branch.dtype)
        branch.set_buffers({name: tensors[name] for name in branch.buffers()})
        branches[role] = branch
    bundle = ModelBundle(config=config, branches=branches,
                         role_modalities=dict(header["role_modalities"]),
                         stage=header.get("stage", "init"))
    return bundle
