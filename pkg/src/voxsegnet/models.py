"""VoxSegNet, its building blocks, and the ablation baselines."""

import json
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from . import ops
from .dilation import LayerDescriptor, receptive_field, validate_schedule
from .layers import BatchNorm3d, Conv3d, ConvTranspose3d, Linear, Module
from .tensor import Tensor, add, concat_channels, no_grad, scale_channels

VARIANTS = ("voxsegnet", "sde_afa2", "sde_concat", "atrous3dcnn", "unet3d")

DEFAULT_STAGES = {
    "voxsegnet": [[1, 1, 1], [1, 3, 5], [1, 3, 5]],
    "sde_afa2": [[1, 1, 1], [1, 3, 5]],
    "sde_concat": [[1, 1, 1], [1, 3, 5]],
    # one ARB per rate; deliberately not a hole-free schedule
    "atrous3dcnn": [[2, 3, 4]],
    "unet3d": [],
}


@dataclass
class ArchitectureSpec:
    variant: str = "voxsegnet"
    resolution: int = 48
    labels: int = 4
    channels: int = 64
    bottleneck: int = 32
    stages: list = field(default_factory=list)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if not self.stages:
            self.stages = [{"rates": list(r), "kernel": 3} for r in DEFAULT_STAGES[self.variant]]
        self.stages = [
            s if isinstance(s, dict) else {"rates": list(s), "kernel": 3} for s in self.stages
        ]
        for s in self.stages:
            s.setdefault("kernel", 3)
        if self.labels < 1 or self.channels < 1 or self.bottleneck < 1:
            raise ValueError("labels, channels and bottleneck must be positive")
        if self.resolution < 2:
            raise ValueError(f"resolution must be >= 2, got {self.resolution}")

    def schedules(self):
        return [validate_schedule(s["rates"], s["kernel"]) for s in self.stages]

    def validate(self):
        if self.variant in ("voxsegnet", "sde_afa2", "sde_concat"):
            if not self.stages:
                raise ValueError(f"{self.variant} needs at least one SDE stage")
            for i, sched in enumerate(self.schedules(), 1):
                if not sched.feasible:
                    raise ValueError(f"stage {i} schedule {list(sched.rates)} infeasible: {sched.reason}")
        if self.variant == "sde_afa2" and len(self.stages) != 2:
            raise ValueError("sde_afa2 uses exactly two SDE stages")
        if self.variant == "atrous3dcnn" and len(self.stages) != 1:
            raise ValueError("atrous3dcnn takes a single list of encoder rates")
        if self.variant == "unet3d" and self.resolution % 8:
            raise ValueError(f"unet3d needs a resolution divisible by 8, got {self.resolution}")
        return self

    def to_json(self):
        return json.dumps({
            "variant": self.variant, "resolution": self.resolution, "labels": self.labels,
            "channels": self.channels, "bottleneck": self.bottleneck, "stages": self.stages,
        }, sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        known = {"variant", "resolution", "labels", "channels", "bottleneck", "stages"}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown architecture fields: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))

    def rf_layers(self):
        """Layer descriptors along the longest path, stem excluded."""
        if self.variant == "unet3d":
            layers = []
            for _ in range(3):
                layers += [LayerDescriptor(3), LayerDescriptor(2, 1, 2)]
            # a stride-2 transpose conv with K=3 touches 2 coarse cells per output
            layers += [LayerDescriptor(2, 1, Fraction(1, 2))] * 3
            return layers
        layers = [LayerDescriptor(s["kernel"], r) for s in self.stages for r in s["rates"]]
        if self.variant == "atrous3dcnn":
            layers += [LayerDescriptor(3, 1)] * 3
        return layers

    def receptive_field(self):
        return receptive_field(self.rf_layers())


def spec_from_file(path):
    with open(path) as fh:
        return ArchitectureSpec.from_dict(json.load(fh))


# --------------------------------------------------------------------------
# building blocks

class ARB(Module):
    """Atrous residual bottleneck block.

    1x1x1 conv + BN + ReLU, 3x3x3 atrous conv + BN + ReLU, 1x1x1 conv back to
    the input width, residual add, ReLU.
    """

    def __init__(self, c_in, c_mid, dilation, rng, dtype=np.float64):
        self.reduce = Conv3d(c_in, c_mid, 1, rng=rng, dtype=dtype)
        self.bn1 = BatchNorm3d(c_mid, dtype=dtype)
        self.atrous = Conv3d(c_mid, c_mid, 3, dilation=dilation, rng=rng, dtype=dtype)
        self.bn2 = BatchNorm3d(c_mid, dtype=dtype)
        self.expand = Conv3d(c_mid, c_in, 1, rng=rng, dtype=dtype)
        self.dilation = dilation

    def forward(self, x):
        h = ops.relu(self.bn1(self.reduce(x)))
        h = ops.relu(self.bn2(self.atrous(h)))
        h = self.expand(h)
        if h.shape != x.shape:
            raise ValueError(f"ARB residual mismatch: {h.shape} vs {x.shape}")
        return ops.relu(add(x, h))


def build_arb(c_in, c_mid, dilation, rng=None, dtype=np.float64):
    return ARB(c_in, c_mid, dilation, rng if rng is not None else np.random.default_rng(0), dtype)


class SDE(Module):
    """Stack of ARBs following a hole-free dilation schedule."""

    def __init__(self, schedule, channels, bottleneck, rng, dtype=np.float64):
        if not schedule.feasible:
            raise ValueError(f"infeasible dilation schedule {list(schedule.rates)}: {schedule.reason}")
        self.schedule = schedule
        self.blocks = [ARB(channels, bottleneck, r, rng, dtype) for r in schedule.rates]

    def forward(self, x):
        for block in self.blocks:
            x = block(x)
        return x

    def receptive_field_increment(self):
        k = self.schedule.kernel_size
        return sum((k - 1) * r for r in self.schedule.rates)


def build_sde(schedule, channels, bottleneck=None, rng=None, dtype=np.float64):
    if not hasattr(schedule, "feasible"):
        schedule = validate_schedule(schedule)
    bottleneck = bottleneck if bottleneck is not None else max(1, channels // 2)
    return SDE(schedule, channels, bottleneck, rng if rng is not None else np.random.default_rng(0), dtype)


class AFA(Module):
    """Attention feature aggregation of a low-stage and a high-stage map."""

    def __init__(self, c_lo, c_hi, rng, dtype=np.float64):
        if c_lo != c_hi:
            raise ValueError(f"AFA adds re-weighted f_lo to f_hi, widths must match ({c_lo} vs {c_hi})")
        self.fc1 = Linear(c_lo + c_hi, c_lo, rng=rng, dtype=dtype)
        self.fc2 = Linear(c_lo, c_lo, rng=rng, dtype=dtype)
        self.attention = None

    def forward(self, f_lo, f_hi):
        return afa_forward(f_lo, f_hi, self)


def afa_forward(f_lo, f_hi, unit):
    if f_lo.shape[2:] != f_hi.shape[2:]:
        raise ValueError(f"AFA spatial mismatch: {f_lo.shape} vs {f_hi.shape}")
    if f_lo.shape[1] != f_hi.shape[1]:
        raise ValueError(f"AFA channel mismatch: {f_lo.shape[1]} vs {f_hi.shape[1]}")
    z = ops.global_avg_pool(concat_channels(f_lo, f_hi))
    u1 = unit.fc1(z)
    u2 = unit.fc2(ops.relu(u1))
    a = ops.sigmoid(u2)
    unit.attention = a.data
    return add(scale_channels(f_lo, a), f_hi)


class Head(Module):
    """Three 1x1x1 convolutions producing raw per-voxel logits."""

    def __init__(self, c_in, channels, labels, rng, dtype=np.float64):
        self.conv1 = Conv3d(c_in, channels, 1, rng=rng, dtype=dtype)
        self.bn1 = BatchNorm3d(channels, dtype=dtype)
        self.conv2 = Conv3d(channels, channels, 1, rng=rng, dtype=dtype)
        self.bn2 = BatchNorm3d(channels, dtype=dtype)
        self.conv3 = Conv3d(channels, labels, 1, rng=rng, dtype=dtype)

    def forward(self, x):
        h = ops.relu(self.bn1(self.conv1(x)))
        h = ops.relu(self.bn2(self.conv2(h)))
        return self.conv3(h)


class ConvBNReLU(Module):
    def __init__(self, c_in, c_out, kernel_size, rng, dtype=np.float64):
        self.conv = Conv3d(c_in, c_out, kernel_size, rng=rng, dtype=dtype)
        self.bn = BatchNorm3d(c_out, dtype=dtype)

    def forward(self, x):
        return ops.relu(self.bn(self.conv(x)))


# --------------------------------------------------------------------------
# networks

class SegmentationModel(Module):
    """Common plumbing: feature taps and the architecture spec."""

    def __init__(self, spec):
        self.spec = spec
        self.features = {}

    def _tap(self, name, t):
        self.features[name] = t
        return t

    def stage_names(self):
        raise NotImplementedError


class SDENet(SegmentationModel):
    """Stem plus SDE stages fused by progressive AFA (or concatenation)."""

    def __init__(self, spec, rng, dtype=np.float64, fusion="afa"):
        super().__init__(spec)
        C = spec.channels
        self.fusion = fusion
        self.stem = ConvBNReLU(1, C, 3, rng, dtype)
        self.sdes = [SDE(s, C, spec.bottleneck, rng, dtype) for s in spec.schedules()]
        n = len(self.sdes)
        if fusion == "afa":
            # afas[i] fuses stage i+1 (low) with the aggregate of the stages above it
            self.afas = [AFA(C, C, rng, dtype) for _ in range(n - 1)]
            head_in = C
        else:
            self.afas = []
            head_in = C * n
        self.head = Head(head_in, C, spec.labels, rng, dtype)

    def stage_names(self):
        names = ["stem"] + [f"sde{i + 1}" for i in range(len(self.sdes))]
        if self.fusion == "afa":
            names += [f"afa{i + 1}" for i in range(len(self.afas))]
        else:
            names.append("concat")
        return names + ["head_in"]

    def forward(self, x):
        self.features = {}
        h = self._tap("stem", self.stem(x))
        stages = []
        for i, sde in enumerate(self.sdes):
            h = self._tap(f"sde{i + 1}", sde(h))
            stages.append(h)
        if self.fusion == "afa":
            g = stages[-1]
            for i in range(len(stages) - 2, -1, -1):
                g = self._tap(f"afa{i + 1}", self.afas[i](stages[i], g))
        else:
            g = stages[0]
            for s in stages[1:]:
                g = concat_channels(g, s)
            self._tap("concat", g)
        self._tap("head_in", g)
        return self.head(g)


class FusionBlock(Module):
    """Skip fusion for the atrous baseline: 1x1x1 reduce + BN + ReLU, then a rate-1 ARB."""

    def __init__(self, c_in, channels, bottleneck, rng, dtype=np.float64):
        self.reduce = ConvBNReLU(c_in, channels, 1, rng, dtype)
        self.arb = ARB(channels, bottleneck, 1, rng, dtype)

    def forward(self, x):
        return self.arb(self.reduce(x))


class Atrous3DCNN(SegmentationModel):
    def __init__(self, spec, rng, dtype=np.float64):
        super().__init__(spec)
        C, Cb = spec.channels, spec.bottleneck
        self.stem = ConvBNReLU(1, C, 3, rng, dtype)
        self.encoders = [ARB(C, Cb, r, rng, dtype) for r in spec.stages[0]["rates"]]
        self.fusions = [FusionBlock(2 * C, C, Cb, rng, dtype) for _ in self.encoders]
        self.head = Head(C, C, spec.labels, rng, dtype)

    def stage_names(self):
        n = len(self.encoders)
        return (["stem"] + [f"arb{i + 1}" for i in range(n)]
                + [f"fuse{i + 1}" for i in range(n)] + ["head_in"])

    def forward(self, x):
        self.features = {}
        h = self._tap("stem", self.stem(x))
        skips = [h]
        for i, enc in enumerate(self.encoders):
            h = self._tap(f"arb{i + 1}", enc(h))
            skips.append(h)
        d = skips.pop()
        for i, fuse in enumerate(self.fusions):
            d = self._tap(f"fuse{i + 1}", fuse(concat_channels(d, skips.pop())))
        self._tap("head_in", d)
        return self.head(d)


class UNet3D(SegmentationModel):
    def __init__(self, spec, rng, dtype=np.float64):
        super().__init__(spec)
        C = spec.channels
        self.enc = [ConvBNReLU(1 if i == 0 else C, C, 3, rng, dtype) for i in range(3)]
        self.dec = [ConvTranspose3d(C if i == 0 else 2 * C, C, rng=rng, dtype=dtype) for i in range(3)]
        self.dec_bn = [BatchNorm3d(C, dtype=dtype) for _ in range(3)]
        self.head = Head(2 * C, C, spec.labels, rng, dtype)

    def stage_names(self):
        return ["enc1", "enc2", "enc3", "bottleneck", "dec1", "dec2", "dec3", "head_in"]

    def forward(self, x):
        self.features = {}
        skips = []
        h = x
        for i, block in enumerate(self.enc):
            h = self._tap(f"enc{i + 1}", block(h))
            skips.append(h)
            h = ops.max_pool3d(h)
        self._tap("bottleneck", h)
        for i, (deconv, bn) in enumerate(zip(self.dec, self.dec_bn)):
            h = ops.relu(bn(deconv(h)))
            h = self._tap(f"dec{i + 1}", concat_channels(h, skips.pop()))
        self._tap("head_in", h)
        return self.head(h)


def build_model(spec, seed=0, dtype=np.float64):
    """Construct the network described by ``spec`` with seeded initialization."""
    if isinstance(spec, dict):
        spec = ArchitectureSpec.from_dict(spec)
    spec.validate()
    rng = np.random.default_rng(seed)
    if spec.variant in ("voxsegnet", "sde_afa2"):
        return SDENet(spec, rng, dtype, fusion="afa")
    if spec.variant == "sde_concat":
        return SDENet(spec, rng, dtype, fusion="concat")
    if spec.variant == "atrous3dcnn":
        return Atrous3DCNN(spec, rng, dtype)
    return UNet3D(spec, rng, dtype)


# --------------------------------------------------------------------------
# inference helpers

def grid_batch(grids, dtype=np.float64):
    """Stack occupancy grids into a ``(B, 1, R, R, R)`` input tensor."""
    occ = np.stack([g.occupancy for g in grids]).astype(dtype)
    return Tensor(occ[:, None])


def forward_segment(model, grid):
    """Eval-mode forward on one grid.

    Returns ``(logits, labels)``: logits of shape ``(K, R, R, R)`` for every
    voxel and an int array of part ids ``1..K`` at occupied voxels, 0 elsewhere.
    """
    R = model.spec.resolution
    if grid.resolution != R:
        raise ValueError(f"grid resolution {grid.resolution} does not match model resolution {R}")
    was_training = model.training
    model.eval()
    try:
        with no_grad():
            logits = model(grid_batch([grid], model_dtype(model)))
    finally:
        model.train(was_training)
    out = logits.data[0]
    labels = np.where(grid.occupancy, out.argmax(axis=0) + 1, 0).astype(np.int64)
    return Tensor(out), labels


def model_dtype(model):
    return model.parameters()[0].dtype


def export_activations(model, grid, stage):
    """Per-channel volumes of a named stage output (eval mode), as float arrays."""
    if stage not in model.stage_names():
        raise ValueError(f"unknown stage {stage!r}; available: {model.stage_names()}")
    forward_segment(model, grid)
    feat = model.features[stage].data[0]
    return [np.ascontiguousarray(feat[c]) for c in range(feat.shape[0])]
