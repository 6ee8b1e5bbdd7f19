"""The oblong-kernel CNN with configurable deformable-convolution placement.

Layout (frequency x time kernels):

    block1  conv 4x1   -> BN -> maxpool 4x4 -> ReLU -> dropout   (32 ch)
    block2  conv 16x1  -> BN -> maxpool 4x4 -> ReLU -> dropout   (64 ch)
    block3  conv 1x4   -> BN -> maxpool 3x3 -> ReLU -> dropout   (128 ch)
    block4  conv 1x16  -> BN -> maxpool 2x2 -> ReLU -> dropout   (128 ch)
    global average pool -> fc1 (128->30) -> ReLU -> fc2 (30->10)

Max pooling commutes with ReLU, so pooling first gives the same output on less data.

Everything through the ReLU after ``fc1`` is the feature extractor; ``fc2`` alone
is the classifier.
"""
from __future__ import annotations

import enum
import json
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .deform import DeformConv2d
from .layers import BatchNorm2d, Conv2d, Linear
from .tensor import Param, ShapeError


class Placement(str, enum.Enum):
    NONE = "none"
    ALL = "all"
    EARLY = "early"
    LATE = "late"
    LAST = "last"

    @property
    def deformable_blocks(self) -> frozenset[int]:
        return _DEFORMABLE[self]


_DEFORMABLE = {
    Placement.NONE: frozenset(),
    Placement.ALL: frozenset({1, 2, 3, 4}),
    Placement.EARLY: frozenset({1, 2}),
    Placement.LATE: frozenset({3, 4}),
    Placement.LAST: frozenset({4}),
}
_PLACEMENT_TAGS = list(Placement)


@dataclass(frozen=True)
class ModelConfig:
    placement: Placement = Placement.NONE
    num_classes: int = 10
    feature_dim: int = 30
    in_channels: int = 3
    input_hw: tuple[int, int] = (1025, 259)
    channels: tuple[int, ...] = (32, 64, 128, 128)
    kernels: tuple[tuple[int, int], ...] = ((4, 1), (16, 1), (1, 4), (1, 16))
    pools: tuple[tuple[int, int], ...] = ((4, 4), (4, 4), (3, 3), (2, 2))
    dropout: float = 0.3

    def __post_init__(self):
        object.__setattr__(self, "placement", Placement(self.placement))
        if not len(self.channels) == len(self.kernels) == len(self.pools):
            raise ValueError("channels, kernels and pools must describe the same number of blocks")

    def reduced(self, divisor: int) -> "ModelConfig":
        """Same architecture with every conv channel count divided by ``divisor``."""
        return replace(self, channels=tuple(max(1, c // divisor) for c in self.channels))


def spatial_trace(config: ModelConfig) -> list[tuple[int, int]]:
    """(H, W) after each block: same-padded conv keeps extents, pooling floors."""
    h, w = config.input_hw
    trace = [(h, w)]
    for ph, pw in config.pools:
        h, w = h // ph, w // pw
        trace.append((h, w))
    return trace


class Block:
    def __init__(self, conv, channels, pool, rate, dtype):
        self.conv = conv
        self.bn = BatchNorm2d(channels, dtype)
        self.pool = pool
        self.rate = rate
        self._cache = None

    def forward(self, x, training, rng):
        x = self.conv.forward(x, training, rng)
        x = self.bn.forward(x, training)
        # max pooling commutes with ReLU, so pool first and rectify the smaller map
        x, pcache = T.maxpool2d(x, *self.pool)
        x, relu_mask = T.relu(x)
        x, keep = T.dropout(x, self.rate, training, rng)
        self._cache = (relu_mask, pcache, keep)
        return x

    def backward(self, dout):
        relu_mask, pcache, keep = self._cache
        self._cache = None
        d = T.dropout_backward(dout, keep)
        d = T.relu_backward(d, relu_mask)
        d = T.maxpool2d_backward(d, pcache)
        d = self.bn.backward(d)
        return self.conv.backward(d)


class Model:
    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        self.seed = seed
        self.dtype = np.dtype(dtype)
        self.frozen = False
        rng = np.random.default_rng(seed)
        self.blocks: list[Block] = []
        cin = config.in_channels
        for k, (cout, kernel, pool) in enumerate(zip(config.channels, config.kernels, config.pools), 1):
            if k in config.placement.deformable_blocks:
                conv = DeformConv2d(cin, cout, kernel, rng, dtype)
            else:
                conv = Conv2d(cin, cout, kernel, rng, dtype)
            self.blocks.append(Block(conv, cout, pool, config.dropout, dtype))
            cin = cout
        self.fc1 = Linear(cin, config.feature_dim, rng, dtype)
        self.fc2 = Linear(config.feature_dim, config.num_classes, rng, dtype)
        self._head_cache = None

    # -- parameter bookkeeping ------------------------------------------------

    def named_params(self) -> dict[str, Param]:
        out = {}
        for k, blk in enumerate(self.blocks, 1):
            for name, p in blk.conv.params().items():
                out[f"block{k}.conv.{name}"] = p
            for name, p in blk.bn.params().items():
                out[f"block{k}.bn.{name}"] = p
        for name, p in self.fc1.params().items():
            out[f"fc1.{name}"] = p
        for name, p in self.fc2.params().items():
            out[f"fc2.{name}"] = p
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        return {f"block{k}.bn.{name}": arr
                for k, blk in enumerate(self.blocks, 1)
                for name, arr in blk.bn.buffers().items()}

    def classifier_params(self) -> dict[str, Param]:
        return {f"fc2.{n}": p for n, p in self.fc2.params().items()}

    def extractor_params(self) -> dict[str, Param]:
        return {n: p for n, p in self.named_params().items() if not n.startswith("fc2.")}

    def freeze_feature_extractor(self):
        self.frozen = True

    def unfreeze(self):
        self.frozen = False

    def trainable_params(self) -> list[Param]:
        params = self.classifier_params() if self.frozen else self.named_params()
        return list(params.values())

    def zero_grad(self):
        for p in self.named_params().values():
            p.zero_grad()

    # -- forward / backward ---------------------------------------------------

    def features(self, x, training=False, rng=None):
        """Feature-extractor output (N, feature_dim). A frozen extractor always runs in eval mode."""
        expected = (self.config.in_channels, *self.config.input_hw)
        if x.ndim != 4 or x.shape[1:] != expected:
            raise ShapeError(f"model expects (N, {expected[0]}, {expected[1]}, {expected[2]}), got {x.shape}")
        training = training and not self.frozen
        x = x.astype(self.dtype, copy=False)
        for blk in self.blocks:
            x = blk.forward(x, training, rng)
        pooled, gshape = T.global_avg_pool(x)
        h = self.fc1.forward(pooled)
        f, mask = T.relu(h)
        self._head_cache = (gshape, mask)
        return f

    def classify(self, features):
        return self.fc2.forward(features)

    def forward(self, x, training=False, rng=None):
        return self.classify(self.features(x, training, rng))

    def backward(self, dlogits):
        """Backpropagate through the whole network; only the classifier when frozen."""
        dfeat = self.fc2.backward(dlogits)
        if self.frozen:
            return None
        gshape, mask = self._head_cache
        d = self.fc1.backward(T.relu_backward(dfeat, mask))
        d = T.global_avg_pool_backward(d, gshape)
        for blk in reversed(self.blocks):
            d = blk.backward(d)
        return d


def build_model(config: ModelConfig, seed: int = 0, dtype=np.float32) -> Model:
    return Model(config, seed, dtype)


@dataclass
class ParamCount:
    total: int
    per_layer: dict[str, int] = field(default_factory=dict)


def count_params(model: Model) -> ParamCount:
    """Trainable scalars (BN running statistics excluded), with a per-layer breakdown."""
    per_layer: dict[str, int] = {}
    for name, p in model.named_params().items():
        layer = name.rsplit(".", 1)[0]
        per_layer[layer] = per_layer.get(layer, 0) + p.size
    return ParamCount(sum(per_layer.values()), per_layer)


# ----------------------------------------------------------------------------
# checkpoint format
# ----------------------------------------------------------------------------
# little-endian throughout
#   magic      4 bytes  b"SDCK"
#   version    u32      (1)
#   placement  u32      index into none/all/early/late/last
#   seed       u64
#   cfg_len    u32;     then cfg_len bytes of UTF-8 JSON with the ModelConfig fields
#   n_records  u32
#   record*    name_len u16, name utf-8, ndim u8, extents u32*ndim, float32 data
#   has_stats  u8;      if 1: n_channels u32, mean float32*n, std float32*n

MAGIC = b"SDCK"
VERSION = 1


def _config_dict(config: ModelConfig) -> dict:
    d = asdict(config)
    d["placement"] = config.placement.value
    return d


def config_from_dict(d: dict) -> ModelConfig:
    d = dict(d)
    for key in ("input_hw", "channels"):
        if key in d:
            d[key] = tuple(d[key])
    for key in ("kernels", "pools"):
        if key in d:
            d[key] = tuple(tuple(v) for v in d[key])
    return ModelConfig(**d)


def save_checkpoint(path, model: Model, stats=None):
    records = {n: p.value for n, p in model.named_params().items()}
    records.update(model.buffers())
    cfg = json.dumps(_config_dict(model.config)).encode()
    parts = [MAGIC, struct.pack("<IIQ", VERSION, _PLACEMENT_TAGS.index(model.config.placement), model.seed),
             struct.pack("<I", len(cfg)), cfg, struct.pack("<I", len(records))]
    for name, arr in records.items():
        raw = name.encode()
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    if stats is None:
        parts.append(b"\x00")
    else:
        mean = np.asarray(stats.mean, dtype="<f4")
        std = np.asarray(stats.std, dtype="<f4")
        parts.append(struct.pack("<BI", 1, mean.size) + mean.tobytes() + std.tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path):
    """Returns ``(model, stats)``; stats is None when the file carries none."""
    from .audio import FeatureStats

    buf = memoryview(Path(path).read_bytes())
    if bytes(buf[:4]) != MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    version, tag, seed = struct.unpack_from("<IIQ", buf, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 4 + struct.calcsize("<IIQ")
    (cfg_len,) = struct.unpack_from("<I", buf, pos)
    cfg = json.loads(bytes(buf[pos + 4:pos + 4 + cfg_len]).decode())
    pos += 4 + cfg_len
    (n_records,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    records = {}
    for _ in range(n_records):
        (nlen,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = bytes(buf[pos:pos + nlen]).decode()
        pos += nlen
        (ndim,) = struct.unpack_from("<B", buf, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", buf, pos)
        pos += 4 * ndim
        count = int(np.prod(shape))
        records[name] = np.frombuffer(buf, dtype="<f4", count=count, offset=pos).reshape(shape).astype(np.float32)
        pos += 4 * count
    stats = None
    if buf[pos]:
        (nch,) = struct.unpack_from("<I", buf, pos + 1)
        start = pos + 5
        mean = np.frombuffer(buf, dtype="<f4", count=nch, offset=start).copy()
        std = np.frombuffer(buf, dtype="<f4", count=nch, offset=start + 4 * nch).copy()
        stats = FeatureStats(mean, std)

    cfg["placement"] = _PLACEMENT_TAGS[tag]
    config = config_from_dict(cfg)
    model = Model(config, seed)
    missing = (set(model.named_params()) | set(model.buffers())) - set(records)
    if missing:
        raise ValueError(f"{path}: checkpoint lacks {sorted(missing)}")
    for name, p in model.named_params().items():
        p.value[...] = records[name]
    for name, arr in model.buffers().items():
        arr[...] = records[name]
    return model, stats
