"""N-d tensors with reverse-mode autodiff and the 3D network primitives.

A ``Tensor`` wraps a numpy array and, when any input of an op requires
gradients, records the op on a tape (parents + backward closure).
``backward()`` on a scalar result walks the tape in reverse topological
order and accumulates gradients additively, so calling it twice without
resetting doubles every gradient.

Float width follows the data: float32 is the training default, float64
is used by the finite-difference gradient checks.  The conv/pool hot
loops live in :mod:`decalcify.backend` (numba or numpy, env-selected).
"""

import struct

import numpy as np

from . import backend


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data)
        if not np.issubdtype(self.data.dtype, np.floating):
            self.data = self.data.astype(np.float32)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self):
        self.grad = None

    def sum(self) -> "Tensor":
        out = _make(np.asarray(self.data.sum()), (self,))
        if out._parents:
            def bw(g):
                return (np.broadcast_to(g, self.data.shape),)
            out._backward = bw
        return out

    def backward(self):
        backward(self)

    def __repr__(self):
        return (f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, "
                f"requires_grad={self.requires_grad})")


def _tracked(t: Tensor) -> bool:
    return t.requires_grad or bool(t._parents)


def _make(data, parents) -> Tensor:
    """Result tensor; joins the tape only if some parent requires grad."""
    tracked = tuple(p for p in parents if isinstance(p, Tensor))
    out = Tensor(data)
    if any(_tracked(p) for p in tracked):
        out._parents = tracked
    return out


def backward(root: Tensor) -> None:
    """Reverse-accumulate gradients from a scalar root through the tape.

    Interior-node gradients are transient per call; gradients persist
    only on tensors with ``requires_grad`` and add up across calls.
    """
    if root.data.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    flowing = {id(root): np.ones_like(root.data)}
    for node in reversed(order):
        g = flowing.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not _tracked(parent):
                continue
            if id(parent) in flowing:
                flowing[id(parent)] = flowing[id(parent)] + pg
            else:
                flowing[id(parent)] = pg


# ------------------------------------------------------------------ ops

def _pad5(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p), (p, p)))


def conv3d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1) -> Tensor:
    """Cross-correlation with same-padding (pad = (k-1)/2, cubic odd kernel).

    x: (N, C_in, D, H, W), w: (C_out, C_in, k, k, k), b: (C_out,).
    Stride 1 preserves spatial dims; stride 2 halves them (ceil).
    """
    n, ci, d, h, wdim = x.shape
    co, ci_w, k = w.shape[0], w.shape[1], w.shape[2]
    if ci != ci_w:
        raise ValueError(f"channel mismatch: input {ci}, weights {ci_w}")
    if w.shape[2:] != (k, k, k) or k % 2 == 0:
        raise ValueError(f"kernel must be cubic odd, got {w.shape[2:]}")
    if stride not in (1, 2):
        raise ValueError(f"stride must be 1 or 2, got {stride}")
    pad = (k - 1) // 2
    xp = _pad5(x.data, pad)
    dims_out = tuple((s + 2 * pad - k) // stride + 1 for s in (d, h, wdim))
    out_arr = np.empty((n, co) + dims_out, dtype=x.data.dtype)
    backend.conv3d_forward(xp, w.data, b.data, stride, out_arr)
    out = _make(out_arr, (x, w, b))
    if out._parents:
        def bw(g):
            g = np.ascontiguousarray(g)
            gw = gb = gx = None
            if _tracked(w) or _tracked(b):
                gw = np.zeros_like(w.data)
                gb = np.zeros_like(b.data)
                backend.conv3d_backward_weights(g, xp, stride, gw, gb)
            if _tracked(x):
                gxp = np.zeros_like(xp)
                backend.conv3d_backward_input(g, w.data, stride, gxp)
                gx = gxp[:, :, pad:-pad, pad:-pad, pad:-pad] if pad else gxp
            return (gx, gw, gb)
        out._backward = bw
    return out


def maxpool3d(x: Tensor, window: int = 2, stride: int = 2) -> Tensor:
    """2x2x2 max pooling; gradient routes to the argmax (first index on ties)."""
    if window != 2 or stride != 2:
        raise ValueError("only window=2, stride=2 pooling is supported")
    n, c, d, h, w = x.shape
    if d % 2 or h % 2 or w % 2:
        raise ValueError(f"spatial dims must be even for pooling, got {x.shape}")
    out_arr = np.empty((n, c, d // 2, h // 2, w // 2), dtype=x.data.dtype)
    argmax = np.empty(out_arr.shape, dtype=np.int64)
    backend.maxpool3d_forward(x.data, out_arr, argmax)
    out = _make(out_arr, (x,))
    if out._parents:
        def bw(g):
            gx = np.zeros_like(x.data)
            backend.maxpool3d_backward(np.ascontiguousarray(g), argmax, gx)
            return (gx,)
        out._backward = bw
    return out


def upsample3d(x: Tensor, factor: int = 2) -> Tensor:
    """Nearest-neighbor upsampling; gradient sums over each replica block."""
    f = factor
    out_arr = x.data.repeat(f, axis=2).repeat(f, axis=3).repeat(f, axis=4)
    out = _make(out_arr, (x,))
    if out._parents:
        n, c, d, h, w = x.shape

        def bw(g):
            blocks = g.reshape(n, c, d, f, h, f, w, f)
            return (blocks.sum(axis=(3, 5, 7)),)
        out._backward = bw
    return out


def relu(x: Tensor) -> Tensor:
    out = _make(np.maximum(x.data, 0), (x,))
    if out._parents:
        def bw(g):
            return (g * (x.data > 0),)
        out._backward = bw
    return out


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ValueError(f"concat needs matching non-channel dims: "
                         f"{a.shape} vs {b.shape}")
    out = _make(np.concatenate([a.data, b.data], axis=1), (a, b))
    if out._parents:
        ca = a.shape[1]

        def bw(g):
            return (g[:, :ca], g[:, ca:])
        out._backward = bw
    return out


def batchnorm3d(x: Tensor, gamma: Tensor, beta: Tensor,
                running_mean: np.ndarray, running_var: np.ndarray,
                mode: str = "train", momentum: float = 0.1,
                eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalization over (N, D, H, W).

    Train mode normalizes with batch statistics (biased variance) and
    updates the running buffers in place:
    ``running = (1 - momentum) * running + momentum * batch``.
    Eval mode normalizes with the running buffers.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be train or eval, got {mode!r}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError("gamma/beta must be per-channel vectors")
    axes = (0, 2, 3, 4)
    shape = (1, c, 1, 1, 1)
    if mode == "train":
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean[:] = (1 - momentum) * running_mean + momentum * mean
        running_var[:] = (1 - momentum) * running_var + momentum * var
    else:
        mean = running_mean.astype(x.data.dtype)
        var = running_var.astype(x.data.dtype)
    ivar = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean.reshape(shape)) * ivar.reshape(shape)
    out_arr = gamma.data.reshape(shape) * xhat + beta.data.reshape(shape)
    out = _make(out_arr, (x, gamma, beta))
    if out._parents:
        m_count = x.data.size // c

        def bw(g):
            ggamma = (g * xhat).sum(axis=axes)
            gbeta = g.sum(axis=axes)
            if not _tracked(x):
                return (None, ggamma, gbeta)
            gi = g * gamma.data.reshape(shape) * ivar.reshape(shape)
            if mode == "eval":
                return (gi, ggamma, gbeta)
            gsum = gi.sum(axis=axes).reshape(shape)
            gxsum = (gi * xhat).sum(axis=axes).reshape(shape)
            return (gi - (gsum + xhat * gxsum) / m_count, ggamma, gbeta)
        out._backward = bw
    return out


def mse_loss(pred: Tensor, target, mask: np.ndarray | None = None) -> Tensor:
    """Mean squared error over all voxels, or over ``mask`` only.

    ``target`` is treated as a constant; ``mask`` is a boolean array
    broadcastable to the prediction shape (the centered inpainting box
    in the mask-only training regime).
    """
    tdata = target.data if isinstance(target, Tensor) else np.asarray(target)
    if pred.shape != tdata.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {tdata.shape}")
    diff = pred.data - tdata
    if mask is None:
        count = diff.size
        loss = np.asarray((diff * diff).mean(), dtype=pred.dtype)
        grad_coeff = diff
    else:
        bmask = np.broadcast_to(mask, diff.shape)
        count = int(bmask.sum())
        if count == 0:
            raise ValueError("empty mask")
        loss = np.asarray((diff * diff * bmask).sum() / count, dtype=pred.dtype)
        grad_coeff = diff * bmask
    out = _make(loss, (pred,))
    if out._parents:
        def bw(g):
            return ((2.0 / count) * grad_coeff * g,)
        out._backward = bw
    return out


# ------------------------------------------------------------------ adam

def adam_step(param: np.ndarray, grad: np.ndarray, m: np.ndarray,
              v: np.ndarray, t: int, lr: float = 1e-4, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update, in place on param and both moments."""
    if not (param.shape == grad.shape == m.shape == v.shape):
        raise ValueError("param/grad/state shape mismatch")
    if t < 1:
        raise ValueError("step counter starts at 1")
    m[:] = beta1 * m + (1 - beta1) * grad
    v[:] = beta2 * v + (1 - beta2) * grad * grad
    mhat = m / (1 - beta1 ** t)
    vhat = v / (1 - beta2 ** t)
    param -= lr * mhat / (np.sqrt(vhat) + eps)


class Adam:
    """Adam over a named parameter dict; keeps first/second moments per name."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-4,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self):
        self.t += 1
        for name, p in self.params.items():
            if p.grad is None:
                continue
            adam_step(p.data, p.grad, self.m[name], self.v[name], self.t,
                      self.lr, self.beta1, self.beta2, self.eps)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


# ------------------------------------------------------------ checkpoints

_CKPT_MAGIC = b"DUW1"


class CheckpointError(ValueError):
    pass


def save_checkpoint(arrays: dict[str, np.ndarray], path) -> None:
    """Write named tensors as 32-bit little-endian floats (magic DUW1).

    Layout per tensor: u32 name length, utf-8 name, u32 ndim, u32 shape
    entries, then the f32 payload.  Entries are sorted by name so the
    file bytes are a pure function of the contents.
    """
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(struct.pack("<I", len(arrays)))
        for name in sorted(arrays):
            arr = np.ascontiguousarray(arrays[name], dtype="<f4")
            nb = name.encode()
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != _CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad checkpoint magic {raw[:4]!r}")
    pos = 4
    (count,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    out = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            name = raw[pos:pos + nlen].decode()
            pos += nlen
            (ndim,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            shape = struct.unpack_from(f"<{ndim}I", raw, pos)
            pos += 4 * ndim
            size = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(raw, dtype="<f4", count=size, offset=pos)
            pos += 4 * size
            out[name] = arr.reshape(shape).astype(np.float32)
    except (struct.error, ValueError) as e:
        raise CheckpointError(f"{path}: truncated checkpoint") from e
    return out
