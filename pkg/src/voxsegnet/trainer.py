"""Adam, the training loop, and VSGC1 checkpoints."""

import csv
import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import ops
from .io import Reader, write_tensors
from .layers import set_buffer
from .models import ArchitectureSpec, build_model, grid_batch, model_dtype
from .voxel import normalize_cloud, rotate_cloud, voxelize

CKPT_MAGIC = b"VSGC1"
PRECISIONS = {"float32": np.float32, "float64": np.float64}


@dataclass
class TrainConfig:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 4
    epochs: int = 1
    augment: bool = False
    # literal 12x dataset expansion instead of one random rotation per draw
    expand_rotations: bool = False
    seed: int = 0
    precision: str = "float32"
    checkpoint_every: int = 0
    checkpoint_path: str = None
    log_path: str = None

    def __post_init__(self):
        if not 0 < self.beta1 < self.beta2 < 1:
            raise ValueError(f"need 0 < beta1 < beta2 < 1, got {self.beta1}, {self.beta2}")
        if not self.lr > 0 or not self.eps > 0:
            raise ValueError("learning rate and epsilon must be positive")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch size must be >= 1 and epochs >= 0")
        if self.precision not in PRECISIONS:
            raise ValueError(f"precision must be one of {sorted(PRECISIONS)}")
        if self.checkpoint_every and not self.checkpoint_path:
            raise ValueError("checkpoint cadence set without a checkpoint path")

    @property
    def dtype(self):
        return PRECISIONS[self.precision]

    def hash(self):
        keep = {k: v for k, v in asdict(self).items() if k not in ("checkpoint_path", "log_path")}
        blob = json.dumps(keep, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(named_params, state, config):
    """One bias-corrected Adam update, in place, for ``(name, Tensor)`` pairs."""
    named_params = list(named_params)
    for name, p in named_params:
        if p.grad is None:
            raise ValueError(f"missing gradient for parameter {name}")
        if not np.all(np.isfinite(p.grad)):
            bad = int(np.count_nonzero(~np.isfinite(p.grad)))
            raise FloatingPointError(f"non-finite gradient in {name}: {bad} of {p.grad.size} entries")
    state.t += 1
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in named_params:
        g = p.grad
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        else:
            v = state.v[name]
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        state.m[name] = m
        state.v[name] = v
        step = config.lr * (m / c1) / (np.sqrt(v / c2) + config.eps)
        p.data = (p.data - step).astype(p.data.dtype, copy=False)
    return state


# --------------------------------------------------------------------------
# training

@dataclass
class EpochLog:
    epoch: int
    loss: float
    voxel_acc: float


@dataclass
class TrainResult:
    model: object
    adam: AdamState
    log: list
    config: TrainConfig


class _GridCache:
    """Normalized clouds voxelized on demand, keyed by (shape, rotation)."""

    def __init__(self, clouds, R):
        self.clouds = [normalize_cloud(c) for c in clouds]
        self.R = R
        self.grids = {}

    def get(self, i, n):
        key = (i, n)
        if key not in self.grids:
            cloud = self.clouds[i] if n == 0 else rotate_cloud(self.clouds[i], n)
            self.grids[key] = voxelize(cloud, self.R)
        return self.grids[key]


def _epoch_draws(n_shapes, config, rng):
    if config.augment and config.expand_rotations:
        items = [(i, r) for i in range(n_shapes) for r in range(12)]
        return [items[j] for j in rng.permutation(len(items))]
    order = rng.permutation(n_shapes)
    if config.augment:
        rots = rng.integers(0, 12, size=n_shapes)
        return [(int(i), int(r)) for i, r in zip(order, rots)]
    return [(int(i), 0) for i in order]


def batch_loss(model, grids):
    """Masked cross-entropy over every occupied voxel of the batch."""
    x = grid_batch(grids, model_dtype(model))
    logits = model(x)
    labels = np.stack([g.labels for g in grids])
    mask = labels > 0
    return logits, ops.softmax_cross_entropy_masked(logits, labels, mask), labels, mask


def train(model, dataset, config, adam=None, on_epoch=None):
    """Fit ``model`` to a list of labeled point clouds of one category.

    ``on_epoch(entry)`` runs after every epoch; a truthy return ends training
    before ``config.epochs``.
    """
    dataset = list(dataset)
    if not dataset:
        raise ValueError("empty training set")
    cats = {c.category for c in dataset}
    if len(cats) > 1:
        raise ValueError(f"training set mixes categories {sorted(cats)}")
    K = model.spec.labels
    for c in dataset:
        if c.labels.max() > K:
            raise ValueError(f"shape {c.shape_id} has label {c.labels.max()} > {K} model labels")
    if model_dtype(model) != config.dtype:
        model.astype(config.dtype)

    cache = _GridCache(dataset, model.spec.resolution)
    rng = np.random.default_rng(config.seed)
    adam = adam if adam is not None else AdamState()
    params = list(model.named_parameters())
    model.train()
    log = []
    for epoch in range(1, config.epochs + 1):
        draws = _epoch_draws(len(dataset), config, rng)
        tot_loss = 0.0
        correct = 0
        seen = 0
        for b in range(0, len(draws), config.batch_size):
            chunk = draws[b:b + config.batch_size]
            grids = [cache.get(i, r) for i, r in chunk]
            logits, loss, labels, mask = batch_loss(model, grids)
            value = float(loss.data[0])
            if not np.isfinite(value):
                ids = [dataset[i].shape_id or f"#{i}" for i, _ in chunk]
                raise FloatingPointError(f"non-finite loss {value} in epoch {epoch} on shape(s) {ids}")
            m = int(mask.sum())
            pred = logits.data.argmax(axis=1) + 1
            correct += int(np.count_nonzero(pred[mask] == labels[mask]))
            seen += m
            tot_loss += value * m
            model.zero_grad()
            loss.backward()
            adam_step(params, adam, config)
        entry = EpochLog(epoch, tot_loss / seen, correct / seen)
        log.append(entry)
        if config.log_path:
            write_log(config.log_path, log)
        if config.checkpoint_every and epoch % config.checkpoint_every == 0:
            save_checkpoint(model, config.checkpoint_path, adam, config)
        if on_epoch is not None and on_epoch(entry):
            break
    model.zero_grad()
    return TrainResult(model, adam, log, config)


def write_log(path, log):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "loss", "voxel_acc"])
        for e in log:
            w.writerow([e.epoch, f"{e.loss:.9g}", f"{e.voxel_acc:.9g}"])


def voxel_accuracy(model, grids):
    """Eval-mode fraction of occupied voxels labeled correctly."""
    from .models import forward_segment

    correct = total = 0
    for g in grids:
        _, pred = forward_segment(model, g)
        correct += int(np.count_nonzero(pred[g.occupancy] == g.labels[g.occupancy]))
        total += g.occupied_count
    return correct / total


# --------------------------------------------------------------------------
# checkpoints

@dataclass
class Checkpoint:
    spec: ArchitectureSpec
    model: object
    adam: AdamState
    step: int
    config_hash: str = ""


def save_checkpoint(model, path, adam=None, config=None):
    """Write a VSGC1 file.

    The header JSON is the architecture spec plus a ``config_hash`` key that
    identifies the training configuration (empty for untrained models).
    """
    adam = adam if adam is not None else AdamState()
    header = json.loads(model.spec.to_json())
    header["config_hash"] = config.hash() if config is not None else ""
    blob = json.dumps(header, sort_keys=True).encode()
    tensors = [(n, p.data) for n, p in model.named_parameters()]
    tensors += list(model.named_buffers())
    opt = [(f"m.{n}", a) for n, a in adam.m.items()] + [(f"v.{n}", a) for n, a in adam.v.items()]
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC + struct.pack("<I", len(blob)) + blob)
        write_tensors(fh, tensors)
        write_tensors(fh, opt)
        fh.write(struct.pack("<Q", adam.t))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:5] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (magic {raw[:5]!r}, expected {CKPT_MAGIC!r})")
    rd = Reader(raw, path)
    rd.take(5)
    (n,) = rd.unpack("<I")
    try:
        header = json.loads(rd.take(n).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ValueError(f"{path}: corrupt spec JSON ({exc})") from None
    config_hash = header.pop("config_hash", "")
    spec = ArchitectureSpec.from_dict(header)
    tensors = dict(rd.tensors())
    opt = rd.tensors()
    (step,) = rd.unpack("<Q")
    if rd.off != len(raw):
        raise ValueError(f"{path}: {len(raw) - rd.off} trailing bytes after checkpoint")

    dtypes = {a.dtype for a in tensors.values()}
    dtype = dtypes.pop() if len(dtypes) == 1 else np.float64
    model = build_model(spec, seed=0, dtype=dtype)
    expected = dict(model.named_parameters())
    missing = sorted(set(expected) - set(tensors))
    if missing:
        raise ValueError(f"{path}: checkpoint lacks parameters {missing[:5]} for spec {spec.variant}")
    for name, p in expected.items():
        arr = tensors.pop(name)
        if arr.shape != p.shape:
            raise ValueError(f"{path}: parameter {name} has shape {arr.shape}, spec needs {p.shape}")
        p.data = arr.copy()
    for name, arr in tensors.items():
        try:
            set_buffer(model, name, arr.copy())
        except (KeyError, AttributeError, IndexError, ValueError):
            raise ValueError(f"{path}: unexpected tensor {name} for spec {spec.variant}") from None

    adam = AdamState(t=int(step))
    for name, arr in opt:
        kind, _, pname = name.partition(".")
        if kind not in ("m", "v") or pname not in expected:
            raise ValueError(f"{path}: bad optimizer entry {name}")
        getattr(adam, kind)[pname] = arr.copy()
    return Checkpoint(spec, model, adam, int(step), config_hash)
