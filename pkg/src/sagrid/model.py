"""Two-branch shared-weight backbone with attention grids at selected depths.

The backbone is a small 4-stage residual network whose cumulative strides
(4/8/16/32) reproduce the stage geometry of a standard 50-layer residual
backbone: a 160x64 input yields stage maps of 40x16, 20x8, 10x4 and 5x2.

Both branches run the *same* layer objects (true weight sharing): the high
branch sees the input bilinearly upsampled by 2, so its stage maps are exactly
twice the low branch's, which is what the 2x2 max filter in the attention
module requires. After each stage listed in `depths`, the low-branch feature
is replaced by the attention merge; the high branch continues unmodified and
the classifier consumes the final low-branch feature.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .attention import AttentionGrid, SagModule, sag_forward
from .layers import BatchNorm2d, Conv2d, Linear, bilinear_upsample_x2, global_avg_pool
from .tensor import Parameter, ShapeMismatchError, Tensor, add, relu

__all__ = [
    "BackboneConfig",
    "TwoBranchModel",
    "build_model",
    "default_l2_depths",
    "save_checkpoint",
    "load_checkpoint",
    "CheckpointError",
]

CHECKPOINT_MAGIC = b"SAGCKPT1"


@dataclass
class BackboneConfig:
    stage_channels: tuple = (16, 32, 64, 128)
    input_hw: tuple = (160, 64)
    num_classes: int = 8
    # None = default placement rule (depths 1-3 normalized, depth 4 not)
    l2_depths: Optional[frozenset] = None

    def __post_init__(self):
        self.stage_channels = tuple(int(c) for c in self.stage_channels)
        self.input_hw = tuple(int(v) for v in self.input_hw)
        if len(self.stage_channels) != 4 or any(c < 1 for c in self.stage_channels):
            raise ValueError("stage_channels must be 4 positive counts")
        if self.num_classes < 1:
            raise ValueError("num_classes must be positive")
        if self.l2_depths is not None:
            self.l2_depths = frozenset(int(d) for d in self.l2_depths)

    def to_dict(self) -> dict:
        return {
            "stage_channels": list(self.stage_channels),
            "input_hw": list(self.input_hw),
            "num_classes": self.num_classes,
            "l2_depths": sorted(self.l2_depths) if self.l2_depths is not None else None,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneConfig":
        l2 = d.get("l2_depths")
        return cls(
            stage_channels=tuple(d["stage_channels"]),
            input_hw=tuple(d["input_hw"]),
            num_classes=int(d["num_classes"]),
            l2_depths=frozenset(l2) if l2 is not None else None,
        )


def default_l2_depths(depth: int) -> bool:
    """Output normalization helps at shallow merge points but hurts at the last one."""
    return depth in (1, 2, 3)


class _ConvBnRelu:
    def __init__(self, cin: int, cout: int, stride: int, seed: int):
        self.conv = Conv2d(cin, cout, kernel_size=3, stride=stride, padding=1, seed=seed)
        self.bn = BatchNorm2d(cout)

    def __call__(self, x: Tensor, train: bool) -> Tensor:
        return relu(self.bn(self.conv(x), train))

    def named_parameters(self):
        return ([("conv." + n, p) for n, p in self.conv.named_parameters()]
                + [("bn." + n, p) for n, p in self.bn.named_parameters()])

    def named_buffers(self):
        return [("bn." + n, b) for n, b in self.bn.named_buffers()]


class _ResidualStage:
    """Two 3x3 conv+bn blocks, first at stride 2, with a projected shortcut."""

    def __init__(self, cin: int, cout: int, seeds):
        self.conv1 = Conv2d(cin, cout, kernel_size=3, stride=2, padding=1, seed=seeds[0])
        self.bn1 = BatchNorm2d(cout)
        self.conv2 = Conv2d(cout, cout, kernel_size=3, stride=1, padding=1, seed=seeds[1])
        self.bn2 = BatchNorm2d(cout)
        # stride 2 (and usually a channel change) rules out a plain identity
        self.conv_sc = Conv2d(cin, cout, kernel_size=1, stride=2, padding=0, seed=seeds[2])
        self.bn_sc = BatchNorm2d(cout)

    def __call__(self, x: Tensor, train: bool) -> Tensor:
        y = relu(self.bn1(self.conv1(x), train))
        y = self.bn2(self.conv2(y), train)
        s = self.bn_sc(self.conv_sc(x), train)
        return relu(add(y, s))

    def named_parameters(self):
        out = []
        for name, sub in (("conv1", self.conv1), ("bn1", self.bn1), ("conv2", self.conv2),
                          ("bn2", self.bn2), ("conv_sc", self.conv_sc), ("bn_sc", self.bn_sc)):
            out += [(f"{name}.{n}", p) for n, p in sub.named_parameters()]
        return out

    def named_buffers(self):
        out = []
        for name, sub in (("bn1", self.bn1), ("bn2", self.bn2), ("bn_sc", self.bn_sc)):
            out += [(f"{name}.{n}", b) for n, b in sub.named_buffers()]
        return out


class TwoBranchModel:
    """Shared-weight backbone, attention modules per depth, and a linear classifier."""

    def __init__(self, config: BackboneConfig, depths: frozenset, seed: int):
        self.config = config
        self.depths = frozenset(int(d) for d in depths)
        self.seed = int(seed)
        if not self.depths <= {1, 2, 3, 4}:
            raise ValueError(f"attention depths must lie in {{1,2,3,4}}, got {sorted(self.depths)}")

        seeds = iter(np.random.default_rng(seed).integers(0, 2**31 - 1, size=64))
        c1, c2, c3, c4 = config.stage_channels
        self.stem = _ConvBnRelu(3, c1, stride=2, seed=int(next(seeds)))
        chans = [c1, c1, c2, c3, c4]
        self.stages = [
            _ResidualStage(chans[i], chans[i + 1], [int(next(seeds)) for _ in range(3)])
            for i in range(4)
        ]
        self.sags: dict[int, SagModule] = {}
        for d in sorted(self.depths):
            apply_l2 = (d in config.l2_depths) if config.l2_depths is not None else default_l2_depths(d)
            self.sags[d] = SagModule(chans[d], apply_l2=apply_l2, seed=int(next(seeds)))
        self.fc = Linear(c4, config.num_classes, seed=int(next(seeds)))
        # instrumentation: how often the high-res paths actually ran
        self.counters = {"upsample": 0, "sag": 0}

    # -- parameter plumbing ------------------------------------------------

    def named_parameters(self) -> list[tuple[str, Parameter]]:
        out = [("stem." + n, p) for n, p in self.stem.named_parameters()]
        for i, stage in enumerate(self.stages, start=1):
            out += [(f"stage{i}.{n}", p) for n, p in stage.named_parameters()]
        for d in sorted(self.sags):
            out += [(f"sag{d}.{n}", p) for n, p in self.sags[d].named_parameters()]
        out += [("fc." + n, p) for n, p in self.fc.named_parameters()]
        return out

    def named_buffers(self) -> list[tuple[str, np.ndarray]]:
        out = [("stem." + n, b) for n, b in self.stem.named_buffers()]
        for i, stage in enumerate(self.stages, start=1):
            out += [(f"stage{i}.{n}", b) for n, b in stage.named_buffers()]
        for d in sorted(self.sags):
            out += [(f"sag{d}.{n}", b) for n, b in self.sags[d].named_buffers()]
        return out

    def classifier_parameters(self) -> list[tuple[str, Parameter]]:
        return [("fc." + n, p) for n, p in self.fc.named_parameters()]

    def backbone_parameters(self) -> list[tuple[str, Parameter]]:
        classifier = {id(p) for _, p in self.classifier_parameters()}
        return [(n, p) for n, p in self.named_parameters() if id(p) not in classifier]

    def zero_grad(self) -> None:
        for _, p in self.named_parameters():
            p.zero_grad()

    # -- forward -----------------------------------------------------------

    def _check_input(self, batch: Tensor) -> None:
        if batch.data.ndim != 4 or batch.shape[1] != 3:
            raise ShapeMismatchError(f"expected N x 3 x H x W batch, got {batch.shape}")
        if tuple(batch.shape[2:]) != self.config.input_hw:
            raise ShapeMismatchError(
                f"input extents {tuple(batch.shape[2:])} do not match config {self.config.input_hw}")

    def forward(self, batch: Tensor, train: bool = False):
        """Run both branches; returns (logits [N x K], {depth: AttentionGrid})."""
        self._check_input(batch)
        grids: dict[int, AttentionGrid] = {}
        low = self.stem(batch, train)
        high = None
        last_depth = max(self.depths) if self.depths else 0
        if self.depths:
            self.counters["upsample"] += 1
            high = self.stem(bilinear_upsample_x2(batch), train)
        for i, stage in enumerate(self.stages, start=1):
            low = stage(low, train)
            if high is not None and i <= last_depth:
                high = stage(high, train)
            if i in self.sags:
                self.counters["sag"] += 1
                low, grids[i] = _sag_with_grid(self.sags[i], high, low, train)
        logits = self.fc(global_avg_pool(low))
        return logits, grids

    def extract_embedding(self, batch: Tensor) -> Tensor:
        """Pooled final low-branch feature (eval mode), before the classifier."""
        self._check_input(batch)
        low = self.stem(batch, train=False)
        high = None
        last_depth = max(self.depths) if self.depths else 0
        if self.depths:
            self.counters["upsample"] += 1
            high = self.stem(bilinear_upsample_x2(batch), train=False)
        for i, stage in enumerate(self.stages, start=1):
            low = stage(low, train=False)
            if high is not None and i <= last_depth:
                high = stage(high, train=False)
            if i in self.sags:
                self.counters["sag"] += 1
                low = sag_forward(self.sags[i], high, low, train=False)
        return global_avg_pool(low)


def _sag_with_grid(m: SagModule, f1: Tensor, f2: Tensor, train: bool):
    from .attention import apply_grid, compute_grid, downsample_high
    from .layers import l2_normalize

    if f1.shape[2] != 2 * f2.shape[2] or f1.shape[3] != 2 * f2.shape[3]:
        raise ShapeMismatchError(
            f"high branch {f1.shape} must be exactly twice the low branch {f2.shape}")
    grid = compute_grid(m, f2, train)
    v = apply_grid(downsample_high(f1), grid)
    if m.apply_l2:
        v = l2_normalize(v)
    return v, grid


def build_model(config: BackboneConfig, depths, seed: int = 0) -> TwoBranchModel:
    """Construct a model with deterministic per-seed initialization.

    `depths` is any iterable drawn from {1,2,3,4}; empty means the plain
    single-branch baseline.
    """
    depths = frozenset(int(d) for d in depths)
    if not depths <= {1, 2, 3, 4}:
        raise ValueError(f"attention depths must lie in {{1,2,3,4}}, got {sorted(depths)}")
    return TwoBranchModel(config, depths, seed)


# -- checkpoint format -----------------------------------------------------
#
# magic "SAGCKPT1"
# u64 n_params, then per parameter:
#   u64 name length, UTF-8 name, u64 rank, rank x u64 extents, f32-LE data
# u64 n_buffers, then the running batch-norm stats in the same record layout
# u64 metadata length, UTF-8 JSON: {config, depths, epoch, seed}


class CheckpointError(RuntimeError):
    pass


def _write_record(fh, name: str, arr: np.ndarray) -> None:
    encoded = name.encode("utf-8")
    fh.write(struct.pack("<Q", len(encoded)))
    fh.write(encoded)
    fh.write(struct.pack("<Q", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_record(fh) -> tuple[str, np.ndarray]:
    (name_len,) = struct.unpack("<Q", _read_exact(fh, 8))
    name = _read_exact(fh, name_len).decode("utf-8")
    (rank,) = struct.unpack("<Q", _read_exact(fh, 8))
    shape = struct.unpack(f"<{rank}Q", _read_exact(fh, 8 * rank)) if rank else ()
    count = int(np.prod(shape)) if shape else 1
    data = np.frombuffer(_read_exact(fh, 4 * count), dtype="<f4").reshape(shape)
    return name, data


def _read_exact(fh, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointError("truncated checkpoint file")
    return buf


def save_checkpoint(model: TwoBranchModel, path, epoch: int = 0, extra: Optional[dict] = None) -> None:
    meta = {
        "config": model.config.to_dict(),
        "depths": sorted(model.depths),
        "epoch": int(epoch),
        "seed": model.seed,
    }
    if extra:
        meta["extra"] = extra
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        params = model.named_parameters()
        fh.write(struct.pack("<Q", len(params)))
        for name, p in params:
            _write_record(fh, name, p.data)
        buffers = model.named_buffers()
        fh.write(struct.pack("<Q", len(buffers)))
        for name, b in buffers:
            _write_record(fh, name, b)
        blob = json.dumps(meta, sort_keys=True).encode("utf-8")
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)


def load_checkpoint(path) -> tuple[TwoBranchModel, dict]:
    """Rebuild the model recorded in a checkpoint and restore its state."""
    with open(path, "rb") as fh:
        if fh.read(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
        (n_params,) = struct.unpack("<Q", _read_exact(fh, 8))
        params = [_read_record(fh) for _ in range(n_params)]
        (n_buffers,) = struct.unpack("<Q", _read_exact(fh, 8))
        buffers = [_read_record(fh) for _ in range(n_buffers)]
        (meta_len,) = struct.unpack("<Q", _read_exact(fh, 8))
        meta = json.loads(_read_exact(fh, meta_len).decode("utf-8"))

    config = BackboneConfig.from_dict(meta["config"])
    model = build_model(config, meta["depths"], seed=meta["seed"])

    own_params = dict(model.named_parameters())
    if set(own_params) != {n for n, _ in params}:
        raise CheckpointError(f"{path}: parameter names do not match the recorded architecture")
    for name, data in params:
        p = own_params[name]
        if p.data.shape != data.shape:
            raise CheckpointError(
                f"{path}: shape mismatch for {name}: {data.shape} vs model {p.data.shape}")
        p.data = data.astype(p.data.dtype)
        p.grad = np.zeros_like(p.data)

    own_buffers = model.named_buffers()
    recorded = dict(buffers)
    if set(recorded) != {n for n, _ in own_buffers}:
        raise CheckpointError(f"{path}: running-stat names do not match the recorded architecture")
    _assign_buffers(model, recorded)
    return model, meta


def _assign_buffers(model: TwoBranchModel, recorded: dict) -> None:
    def restore(bn: BatchNorm2d, prefix: str) -> None:
        bn.running_mean = recorded[prefix + "running_mean"].astype(bn.running_mean.dtype)
        bn.running_var = recorded[prefix + "running_var"].astype(bn.running_var.dtype)

    restore(model.stem.bn, "stem.bn.")
    for i, stage in enumerate(model.stages, start=1):
        restore(stage.bn1, f"stage{i}.bn1.")
        restore(stage.bn2, f"stage{i}.bn2.")
        restore(stage.bn_sc, f"stage{i}.bn_sc.")
    for d, sag in model.sags.items():
        restore(sag.bn, f"sag{d}.bn.")
