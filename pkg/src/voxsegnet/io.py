"""On-disk formats.

Point clouds: text, one ``x y z label`` line per point.

VSGV1 voxel grids::

    b"VSGV1" | u32 R | u8 flags (bit0 labels, bit1 float payload)
    | R^3 occupancy bytes | [R^3 u8 labels] | [R^3 f32 values]

all little-endian, x-fastest raster order.

VSGC1 checkpoints are assembled in :mod:`voxsegnet.trainer` from the tensor
framing helpers here.
"""

import struct

import numpy as np

from .voxel import LabeledPointCloud, VoxelGrid

VSGV_MAGIC = b"VSGV1"
FLAG_LABELS = 1
FLAG_FLOAT = 2


def read_cloud(path, category="unknown", shape_id=None):
    data = np.loadtxt(path, ndmin=2)
    if data.shape[1] != 4:
        raise ValueError(f"{path}: expected 4 columns 'x y z label', got {data.shape[1]}")
    labels = data[:, 3]
    if np.any(labels != np.round(labels)) or labels.min() < 1:
        raise ValueError(f"{path}: labels must be positive integers")
    sid = shape_id if shape_id is not None else _stem(path)
    return LabeledPointCloud(data[:, :3], labels.astype(np.int64), category, sid)


def write_cloud(path, cloud):
    with open(path, "w") as fh:
        for (x, y, z), lab in zip(cloud.points, cloud.labels):
            fh.write(f"{x:.9f} {y:.9f} {z:.9f} {int(lab)}\n")


def _stem(path):
    name = str(path).replace("\\", "/").rsplit("/", 1)[-1]
    return name.rsplit(".", 1)[0]


def write_vsgv(path, occupancy, labels=None, values=None):
    occupancy = np.asarray(occupancy, dtype=bool)
    R = occupancy.shape[0]
    flags = 0
    payload = [occupancy.astype(np.uint8).tobytes()]
    if labels is not None:
        labels = np.asarray(labels)
        if labels.max(initial=0) > 255 or labels.min(initial=0) < 0:
            raise ValueError("VSGV labels must fit in a byte")
        flags |= FLAG_LABELS
        payload.append(labels.astype(np.uint8).tobytes())
    if values is not None:
        values = np.asarray(values)
        if values.shape != occupancy.shape:
            raise ValueError(f"value volume {values.shape} vs grid {occupancy.shape}")
        flags |= FLAG_FLOAT
        payload.append(values.astype("<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(VSGV_MAGIC + struct.pack("<IB", R, flags))
        for chunk in payload:
            fh.write(chunk)


def read_vsgv(path):
    """Return ``(occupancy, labels or None, values or None)``."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:5] != VSGV_MAGIC:
        raise ValueError(f"{path}: bad magic {raw[:5]!r}, expected {VSGV_MAGIC!r}")
    R, flags = struct.unpack_from("<IB", raw, 5)
    n = R ** 3
    off = 10
    need = n + (n if flags & FLAG_LABELS else 0) + (4 * n if flags & FLAG_FLOAT else 0)
    if len(raw) - off < need:
        raise ValueError(f"{path}: truncated VSGV file")
    occ = np.frombuffer(raw, np.uint8, n, off).astype(bool).reshape(R, R, R)
    off += n
    labels = values = None
    if flags & FLAG_LABELS:
        labels = np.frombuffer(raw, np.uint8, n, off).astype(np.int64).reshape(R, R, R)
        off += n
    if flags & FLAG_FLOAT:
        values = np.frombuffer(raw, "<f4", n, off).reshape(R, R, R).copy()
    return occ, labels, values


def save_grid(path, grid):
    write_vsgv(path, grid.occupancy, grid.labels)


def load_grid(path):
    occ, labels, _ = read_vsgv(path)
    return VoxelGrid(occ, labels)


def save_activation(path, occupancy, volume):
    write_vsgv(path, occupancy, values=volume)


# --------------------------------------------------------------------------
# tensor framing shared by checkpoint sections

DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def write_tensors(fh, named):
    named = list(named)
    fh.write(struct.pack("<I", len(named)))
    for name, arr in named:
        arr = np.ascontiguousarray(arr)
        if arr.dtype not in DTYPE_CODES:
            raise ValueError(f"tensor {name}: unsupported dtype {arr.dtype}")
        key = name.encode()
        fh.write(struct.pack("<H", len(key)) + key)
        fh.write(struct.pack("<BB", DTYPE_CODES[arr.dtype], arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.astype(arr.dtype.newbyteorder("<")).tobytes())


class Reader:
    def __init__(self, raw, path="<bytes>"):
        self.raw = raw
        self.off = 0
        self.path = path

    def take(self, n):
        if self.off + n > len(self.raw):
            raise ValueError(f"{self.path}: truncated file")
        chunk = self.raw[self.off:self.off + n]
        self.off += n
        return chunk

    def unpack(self, fmt):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size))

    def tensors(self):
        (count,) = self.unpack("<I")
        out = []
        for _ in range(count):
            (klen,) = self.unpack("<H")
            name = self.take(klen).decode()
            code, rank = self.unpack("<BB")
            if code not in CODE_DTYPES:
                raise ValueError(f"{self.path}: unknown dtype code {code} for {name}")
            dims = self.unpack(f"<{rank}I")
            dt = CODE_DTYPES[code]
            n = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(self.take(n * dt.itemsize), dt).reshape(dims)
            out.append((name, arr.astype(dt.newbyteorder("="))))
        return out
