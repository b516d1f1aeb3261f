"""Classifier construction, inference, and checkpoint I/O.

The network is a convolutional backbone (50-layer residual net, or a small
3-block CNN for desk-scale runs) followed by a fixed head:

    global average pooling -> dense(1024, relu) -> dropout(0.5)
    -> dense(512, relu) -> dense(K) -> softmax

Dropout is inverted and driven by a caller-supplied stream, so inference
is deterministic and training draws never touch global RNG state.
"""

import hashlib
import io
import json
import math
import os
import struct
from dataclasses import dataclass, asdict, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn
from torchvision.models import resnet50

from .data import LabelTaxonomy
from .errors import (
    CompatibilityError,
    ConfigError,
    CorruptCheckpointError,
    IoError,
    NumericError,
    ShapeError,
    WeightArtifactError,
)
from .seeding import derive_seed, LABEL_INIT

CHECKPOINT_MAGIC = b"NSCK"
CHECKPOINT_VERSION = 1

BACKBONE_FEATURE_WIDTH = {"resnet50": 2048, "small_cnn": 64}


@dataclass(frozen=True)
class ModelConfig:
    backbone: str = "resnet50"
    pretrained_init: bool = False
    backbone_frozen: bool = True
    dense1_units: int = 1024
    dropout_rate: float = 0.5
    dense2_units: int = 512
    input_shape: tuple = (224, 224, 3)
    pretrained_weights_path: str = ""
    pretrained_checksum: str = ""

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        if self.backbone not in BACKBONE_FEATURE_WIDTH:
            raise ConfigError(f"backbone must be one of {sorted(BACKBONE_FEATURE_WIDTH)}, got {self.backbone!r}")
        if self.dense1_units < 1 or self.dense2_units < 1:
            raise ConfigError("dense layer widths must be >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout_rate must be in [0, 1)")
        h, w, c = self.input_shape
        if h < 32 or w < 32 or c not in (1, 3):
            raise ConfigError(f"input_shape must be (H>=32, W>=32, C in {{1,3}}), got {self.input_shape}")

    @property
    def feature_width(self) -> int:
        return BACKBONE_FEATURE_WIDTH[self.backbone]


@dataclass(frozen=True)
class Prediction:
    probabilities: np.ndarray
    predicted_index: int
    scores_raw: np.ndarray


class SmallCnnBackbone(nn.Module):
    """Three conv blocks with stride-2 pooling; feature width 64."""

    def __init__(self, in_channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, 16, 3, padding=1)
        self.pool1 = nn.MaxPool2d(2)
        self.conv2 = nn.Conv2d(16, 32, 3, padding=1)
        self.pool2 = nn.MaxPool2d(2)
        self.conv3 = nn.Conv2d(32, 64, 3, padding=1)
        self.pool3 = nn.MaxPool2d(2)

    def forward(self, x):
        x = self.pool1(F.relu(self.conv1(x)))
        x = self.pool2(F.relu(self.conv2(x)))
        x = self.pool3(F.relu(self.conv3(x)))
        return x

    def layer_registry(self):
        return {
            "conv1": self.conv1,
            "pool1": self.pool1,
            "conv2": self.conv2,
            "pool2": self.pool2,
            "conv3": self.conv3,
            "pool3": self.pool3,
        }


class ResNet50Backbone(nn.Module):
    """Torchvision resnet50 trunk without its pooling/fc head."""

    def __init__(self, in_channels: int):
        super().__init__()
        net = resnet50(weights=None)
        if in_channels != 3:
            net.conv1 = nn.Conv2d(in_channels, 64, 7, stride=2, padding=3, bias=False)
        self.stem = nn.Sequential(net.conv1, net.bn1, net.relu, net.maxpool)
        self.layer1 = net.layer1
        self.layer2 = net.layer2
        self.layer3 = net.layer3
        self.layer4 = net.layer4

    def forward(self, x):
        x = self.stem(x)
        x = self.layer1(x)
        x = self.layer2(x)
        x = self.layer3(x)
        return self.layer4(x)

    def layer_registry(self):
        return {
            "stem": self.stem,
            "layer1": self.layer1,
            "layer2": self.layer2,
            "layer3": self.layer3,
            "layer4": self.layer4,
        }


class ClassifierNet(nn.Module):
    """Backbone -> GAP -> dense1(relu) -> dropout -> dense2(relu) -> output."""

    def __init__(self, config: ModelConfig, class_count: int):
        super().__init__()
        in_channels = config.input_shape[2]
        if config.backbone == "small_cnn":
            self.backbone = SmallCnnBackbone(in_channels)
        else:
            self.backbone = ResNet50Backbone(in_channels)
        f = config.feature_width
        self.dense1 = nn.Linear(f, config.dense1_units)
        self.dense2 = nn.Linear(config.dense1_units, config.dense2_units)
        self.output = nn.Linear(config.dense2_units, class_count)
        self.dropout_rate = config.dropout_rate

    def feature_map(self, x):
        return self.backbone(x)

    def forward(self, x, training: bool = False, generator: torch.Generator | None = None):
        pooled = self.feature_map(x).mean(dim=(2, 3))
        h1 = F.relu(self.dense1(pooled))
        p = self.dropout_rate
        if training and p > 0.0:
            keep = (torch.rand(h1.shape, generator=generator, dtype=h1.dtype) >= p).to(h1.dtype)
            h1 = h1 * keep / (1.0 - p)
        h2 = F.relu(self.dense2(h1))
        return self.output(h2)

    def layer_registry(self):
        return self.backbone.layer_registry()


@dataclass
class NetworkState:
    config: ModelConfig
    taxonomy: LabelTaxonomy
    net: ClassifierNet
    training_mode: bool = False

    def head_parameters(self) -> dict:
        net = self.net
        return {
            "dense1": list(net.dense1.parameters()),
            "dense2": list(net.dense2.parameters()),
            "output": list(net.output.parameters()),
        }

    def weights_checksum(self) -> str:
        h = hashlib.sha256()
        for name, tensor in sorted(self.net.state_dict().items()):
            h.update(name.encode())
            h.update(tensor.detach().cpu().numpy().astype("<f4").tobytes())
        return h.hexdigest()[:16]


def _init_uniform_fan_in(net: nn.Module, seed: int):
    """Seeded U(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
    gen = torch.Generator().manual_seed(seed & 0x7FFFFFFFFFFFFFFF)
    for name, param in sorted(net.named_parameters(), key=lambda kv: kv[0]):
        with torch.no_grad():
            if param.ndim >= 2:
                fan_in = param.shape[1] * math.prod(param.shape[2:]) if param.ndim > 2 else param.shape[1]
                bound = 1.0 / math.sqrt(fan_in)
                param.uniform_(-bound, bound, generator=gen)
            else:
                param.zero_()
    # BatchNorm scale/shift must stay at identity after the sweep above.
    for module in net.modules():
        if isinstance(module, nn.BatchNorm2d):
            with torch.no_grad():
                module.weight.fill_(1.0)
                module.bias.zero_()
            module.reset_running_stats()


def _load_pretrained_backbone(net: ClassifierNet, config: ModelConfig):
    path = config.pretrained_weights_path or os.path.join(
        os.environ.get("PIPELINE_CACHE_DIR", os.path.expanduser("~/.cache/nscfate")),
        "resnet50_imagenet.pt",
    )
    if not os.path.isfile(path):
        raise WeightArtifactError(
            f"pretrained backbone weights not found at {path}"
            + (f" (expected sha256 {config.pretrained_checksum})" if config.pretrained_checksum else "")
        )
    if config.pretrained_checksum:
        digest = hashlib.sha256(open(path, "rb").read()).hexdigest()
        if digest != config.pretrained_checksum:
            raise WeightArtifactError(
                f"checksum mismatch for {path}: expected {config.pretrained_checksum}, got {digest}"
            )
    state = torch.load(path, map_location="cpu", weights_only=True)
    missing, unexpected = net.backbone.load_state_dict(state, strict=False)
    if missing:
        raise WeightArtifactError(f"weight artifact {path} is missing tensors: {missing[:5]}")


def build_model(config: ModelConfig, taxonomy: LabelTaxonomy, seed: int) -> NetworkState:
    """Construct a NetworkState with seeded head init.

    With pretrained_init the backbone is loaded from a local artifact (the
    pipeline never downloads); otherwise backbone weights are seeded-random
    with the same fan-in scheme as the head.
    """
    if config.backbone == "small_cnn" and (config.input_shape[0] < 32 or config.input_shape[1] < 32):
        raise ConfigError("small_cnn needs input of at least 32x32")
    net = ClassifierNet(config, taxonomy.class_count)
    _init_uniform_fan_in(net, derive_seed(seed, LABEL_INIT))
    if config.pretrained_init:
        if config.backbone != "resnet50":
            raise ConfigError("pretrained_init is only available for the resnet50 backbone")
        _load_pretrained_backbone(net, config)
    if config.backbone_frozen and config.pretrained_init:
        for p in net.backbone.parameters():
            p.requires_grad_(False)
    net.eval()
    return NetworkState(config=config, taxonomy=taxonomy, net=net)


def _as_input_tensor(state: NetworkState, batch) -> torch.Tensor:
    arr = np.asarray(batch, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    expected = state.config.input_shape
    if arr.ndim != 4 or arr.shape[1:] != expected:
        raise ShapeError(f"batch shape {arr.shape} does not match input_shape {expected}")
    if not np.isfinite(arr).all():
        raise NumericError("batch contains non-finite values")
    return torch.from_numpy(arr).permute(0, 3, 1, 2).contiguous()


def _resolve_generator(rng_stream) -> torch.Generator | None:
    if rng_stream is None:
        return None
    if isinstance(rng_stream, torch.Generator):
        return rng_stream
    if isinstance(rng_stream, (int, np.integer)):
        return torch.Generator().manual_seed(int(rng_stream) & 0x7FFFFFFFFFFFFFFF)
    if isinstance(rng_stream, np.random.Generator):
        return torch.Generator().manual_seed(int(rng_stream.integers(2**63)))
    raise ConfigError(f"unsupported rng_stream type {type(rng_stream)!r}")


def forward(state: NetworkState, batch, training_mode: bool = False, rng_stream=None):
    """Run the network; returns (probabilities, logits) as float64 arrays."""
    x = _as_input_tensor(state, batch)
    gen = _resolve_generator(rng_stream) if training_mode else None
    with torch.no_grad():
        logits = state.net(x, training=training_mode, generator=gen)
        probs = torch.softmax(logits, dim=1)
    return probs.numpy().astype(np.float64), logits.numpy().astype(np.float64)


def predict(state: NetworkState, batch) -> list:
    """Deterministic inference; logits kept for ROC analysis."""
    probs, logits = forward(state, batch, training_mode=False)
    return [
        Prediction(probabilities=p, predicted_index=int(np.argmax(p)), scores_raw=l)
        for p, l in zip(probs, logits)
    ]


def _config_to_dict(config: ModelConfig) -> dict:
    d = asdict(config)
    d["input_shape"] = list(config.input_shape)
    return d


def save_checkpoint(state: NetworkState, path):
    """Single binary container: header, f32 LE weight blobs, 64-bit checksum."""
    sd = state.net.state_dict()
    names = sorted(sd.keys())
    header = {
        "config": _config_to_dict(state.config),
        "taxonomy": {"mode": state.taxonomy.mode, "class_names": list(state.taxonomy.class_names)},
        "tensors": [
            {
                "name": n,
                "shape": list(sd[n].shape),
                "dtype": "<i8" if sd[n].dtype == torch.int64 else "<f4",
            }
            for n in names
        ],
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")

    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    buf.write(struct.pack("<Q", len(header_bytes)))
    buf.write(header_bytes)
    for n in names:
        dtype = "<i8" if sd[n].dtype == torch.int64 else "<f4"
        buf.write(sd[n].detach().cpu().numpy().astype(dtype).tobytes())
    payload = buf.getvalue()
    checksum = hashlib.sha256(payload).digest()[:8]
    with open(path, "wb") as fh:
        fh.write(payload)
        fh.write(checksum)


def load_checkpoint(path, expected_taxonomy: LabelTaxonomy | None = None) -> NetworkState:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise IoError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(blob) < 24 or blob[:4] != CHECKPOINT_MAGIC:
        raise CorruptCheckpointError(f"{path} is not a checkpoint file")
    payload, checksum = blob[:-8], blob[-8:]
    if hashlib.sha256(payload).digest()[:8] != checksum:
        raise CorruptCheckpointError(f"{path} failed its integrity check")
    (version,) = struct.unpack("<I", payload[4:8])
    if version != CHECKPOINT_VERSION:
        raise CorruptCheckpointError(f"unsupported checkpoint version {version}")
    (header_len,) = struct.unpack("<Q", payload[8:16])
    header = json.loads(payload[16 : 16 + header_len].decode("utf-8"))

    cfg_dict = dict(header["config"])
    cfg_dict["input_shape"] = tuple(cfg_dict["input_shape"])
    # Weights come from the checkpoint itself; never re-read the artifact.
    cfg_dict["pretrained_init"] = False
    config = ModelConfig(**cfg_dict)
    taxonomy = LabelTaxonomy(header["taxonomy"]["mode"], tuple(header["taxonomy"]["class_names"]))
    if expected_taxonomy is not None and (
        expected_taxonomy.mode != taxonomy.mode or expected_taxonomy.class_names != taxonomy.class_names
    ):
        raise CompatibilityError(
            f"checkpoint taxonomy {taxonomy.class_names} does not match expected {expected_taxonomy.class_names}"
        )

    net = ClassifierNet(config, taxonomy.class_count)
    offset = 16 + header_len
    new_sd = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        dtype = entry.get("dtype", "<f4")
        itemsize = np.dtype(dtype).itemsize
        count = int(np.prod(shape)) if shape else 1
        raw = payload[offset : offset + itemsize * count]
        if len(raw) != itemsize * count:
            raise CorruptCheckpointError(f"{path} is truncated")
        new_sd[entry["name"]] = torch.from_numpy(
            np.frombuffer(raw, dtype=dtype).copy().reshape(shape)
        )
        offset += itemsize * count
    try:
        net.load_state_dict(new_sd)
    except RuntimeError as exc:
        raise CorruptCheckpointError(f"{path}: weight shapes inconsistent with config: {exc}") from exc
    net.eval()
    return NetworkState(config=config, taxonomy=taxonomy, net=net)
