"""Dense tensors with reverse-mode differentiation over a recorded tape.

Each differentiable operation builds its output with :func:`record`, passing
the parent tensors and a closure that maps the output gradient to one
gradient per parent. :meth:`Tensor.backward` replays the closures in reverse
creation order, which is a valid reverse topological order because a tensor
is always created after its inputs.
"""

import contextlib
import itertools

import numpy as np

DEFAULT_DTYPE = np.float64

_seq = itertools.count()
_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (inference, probing)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled():
    return _grad_enabled


class Tensor:
    """A numpy array plus the bookkeeping needed for reverse-mode gradients.

    Leaves created with ``requires_grad=True`` are parameters; their ``grad``
    is filled by :meth:`backward`. Intermediate tensors keep their gradient
    only if ``retain_grad`` is set, otherwise it is dropped once propagated.
    """

    __slots__ = ("data", "requires_grad", "grad", "retain_grad", "op",
                 "_parents", "_backward", "_seq")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype.kind != "f":
            arr = arr.astype(DEFAULT_DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.retain_grad = False
        self.op = "leaf"
        self._parents = ()
        self._backward = None
        self._seq = next(_seq)

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def is_leaf(self):
        return not self._parents

    def numpy(self):
        return self.data

    def item(self):
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data, dtype=self.dtype)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op})"

    def __add__(self, other):
        return add(self, other)

    def backward(self):
        """Populate gradients of this scalar with respect to every tape input.

        Raises if the tensor is not a scalar, is not connected to any tensor
        requiring gradients, if the tape has already been consumed, or if a
        parameter still holds a gradient from a previous call.
        """
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise RuntimeError("loss is detached: no tensor on its tape requires grad")
        if self.op == "consumed":
            raise RuntimeError("backward() already ran on this tape; rebuild the graph")

        nodes = {}
        stack = [self]
        while stack:
            t = stack.pop()
            if id(t) in nodes:
                continue
            nodes[id(t)] = t
            stack.extend(p for p in t._parents if p.requires_grad)
        order = sorted(nodes.values(), key=lambda t: t._seq, reverse=True)

        stale = [t for t in order if t.is_leaf and t.grad is not None]
        if stale:
            raise RuntimeError(
                f"{len(stale)} parameter(s) already hold gradients; call zero_grad() "
                "before the next backward()"
            )

        grads = {id(self): np.ones_like(self.data)}
        for t in order:
            g = grads.pop(id(t), None)
            if g is None:
                continue
            if t.is_leaf or t.retain_grad:
                t.grad = g
            if t._backward is None:
                continue
            parent_grads = t._backward(g)
            for p, pg in zip(t._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                if pg.shape != p.shape:
                    raise AssertionError(
                        f"{t.op} backward produced {pg.shape} for input {p.shape}"
                    )
                key = id(p)
                grads[key] = pg if key not in grads else grads[key] + pg
            if not t.is_leaf:
                t._backward = None
                t._parents = ()
                t.op = "consumed"


def record(data, parents, backward, op):
    """Wrap ``data`` as the output of ``op`` and register its backward rule."""
    out = Tensor(data, dtype=data.dtype)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        out.op = op
    return out


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _check_same_shape(a, b, what):
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_same_shape(a, b, "add")
    return record(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_same_shape(a, b, "sub")
    return record(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_same_shape(a, b, "mul")
    return record(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def scale(a, c):
    """Multiply by a Python scalar constant."""
    return record(a.data * c, (a,), lambda g: (g * c,), "scale")


def tsum(a):
    """Sum of all entries as a 1-element tensor."""
    total = np.array([a.data.sum()], dtype=a.dtype)
    return record(total, (a,), lambda g: (np.full(a.shape, g[0], dtype=a.dtype),), "sum")


def reshape(a, shape):
    return record(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def scale_channels(f, a):
    """Multiply channel ``i`` of ``f`` by ``a[..., i]``.

    ``f`` is ``(C, ...)`` with ``a`` of shape ``(C,)``, or batched
    ``(B, C, ...)`` with ``a`` of shape ``(B, C)``.
    """
    if a.ndim == 1:
        lead = 1
        if f.shape[0] != a.shape[0]:
            raise ValueError(f"scale_channels: f has {f.shape[0]} channels, a has {a.shape[0]}")
    elif a.ndim == 2:
        lead = 2
        if f.shape[:2] != a.shape:
            raise ValueError(f"scale_channels: f leading dims {f.shape[:2]} vs a {a.shape}")
    else:
        raise ValueError(f"scale_channels: attention must be 1-D or 2-D, got {a.shape}")
    extra = (1,) * (f.ndim - lead)
    ab = a.data.reshape(a.shape + extra)
    red = tuple(range(lead, f.ndim))

    def backward(g):
        return g * ab, (g * f.data).sum(axis=red)

    return record(f.data * ab, (f, a), backward, "scale_channels")


def concat_channels(f_lo, f_hi, axis=1):
    """Concatenate along the channel axis (1 for batched maps, 0 otherwise)."""
    for t in (f_lo, f_hi):
        if t.shape[axis] < 1:
            raise ValueError("concat_channels: channel extent must be at least 1")
    rest_lo = f_lo.shape[:axis] + f_lo.shape[axis + 1:]
    rest_hi = f_hi.shape[:axis] + f_hi.shape[axis + 1:]
    if rest_lo != rest_hi:
        raise ValueError(f"concat_channels: non-channel extents differ: {f_lo.shape} vs {f_hi.shape}")
    c = f_lo.shape[axis]

    def backward(g):
        lo, hi = np.split(g, [c], axis=axis)
        return np.ascontiguousarray(lo), np.ascontiguousarray(hi)

    data = np.concatenate([f_lo.data, f_hi.data], axis=axis)
    return record(data, (f_lo, f_hi), backward, "concat")


def split_channels(f, c, axis=1):
    """Inverse of :func:`concat_channels`: split at channel ``c``."""
    lo, hi = np.split(f.data, [c], axis=axis)

    def back_lo(g):
        full = np.zeros_like(f.data)
        full[(slice(None),) * axis + (slice(0, c),)] = g
        return (full,)

    def back_hi(g):
        full = np.zeros_like(f.data)
        full[(slice(None),) * axis + (slice(c, None),)] = g
        return (full,)

    return (record(np.ascontiguousarray(lo), (f,), back_lo, "split"),
            record(np.ascontiguousarray(hi), (f,), back_hi, "split"))


def finite_difference_check(graph_builder, params, epsilon=1e-6, max_entries=None, seed=0):
    """Compare analytic gradients with central differences.

    ``graph_builder()`` must rebuild the scalar loss from the current values of
    ``params`` (a mapping of name to leaf tensor). Returns ``{name: error}``
    where error is ``max |analytic - numeric| / max(1, |numeric|)`` over the
    probed entries. ``max_entries`` caps the probes per tensor (random subset).
    """
    if not 1e-7 <= epsilon <= 1e-3:
        raise ValueError(f"epsilon {epsilon} outside [1e-7, 1e-3]")
    for name, p in params.items():
        if p.dtype != np.float64:
            raise ValueError(f"finite differences need float64, {name} is {p.dtype}")
        p.zero_grad()
    loss = graph_builder()
    loss.backward()
    analytic = {name: (p.grad if p.grad is not None else np.zeros_like(p.data)).copy()
                for name, p in params.items()}

    rng = np.random.default_rng(seed)

    def probe():
        with no_grad():
            val = graph_builder().item()
        if not np.isfinite(val):
            raise FloatingPointError("non-finite loss while probing")
        return val

    errors = {}
    for name, p in params.items():
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        worst = 0.0
        ana = analytic[name].reshape(-1)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + epsilon
            up = probe()
            flat[i] = orig - epsilon
            down = probe()
            flat[i] = orig
            numeric = (up - down) / (2 * epsilon)
            worst = max(worst, abs(ana[i] - numeric) / max(1.0, abs(numeric)))
        errors[name] = worst
        p.zero_grad()
    return errors
