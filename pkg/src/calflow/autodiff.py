"""Minimal reverse-mode tape over numpy arrays.

Just enough machinery to differentiate the invertible network: elementwise
arithmetic, tanh/exp, channel concat/split/flip, 3x3 same-padding
convolution, 2x2 space-to-channel squeeze, and full reductions. Everything
runs in float64. Nodes record parents and a backward closure only when a
gradient is actually required, so inference-time calls build no graph.
"""

from __future__ import annotations

import numpy as np


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_bwd")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._bwd = None

    @property
    def shape(self):
        return self.data.shape

    def accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _node(data: np.ndarray, parents: tuple[Tensor, ...], bwd) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._bwd = bwd
    return out


def backward(root: Tensor, seed) -> None:
    """Propagate d(root)/d(leaf) into .grad of every reachable leaf.

    `seed` is the upstream gradient at the root (a scalar for loss roots,
    an array for image roots fed by an external analytic gradient).
    """
    if not root.requires_grad:
        raise ValueError("root does not require gradients")
    seed = np.asarray(seed, dtype=np.float64)
    if seed.shape != root.data.shape:
        raise ValueError(f"seed shape {seed.shape} != root shape {root.data.shape}")

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    root.accumulate(seed)
    for node in reversed(order):
        if node._bwd is not None and node.grad is not None:
            node._bwd(node.grad)


# ---------------------------------------------------------------- arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    def bwd(g):
        if a.requires_grad:
            a.accumulate(g)
        if b.requires_grad:
            b.accumulate(g)

    return _node(a.data + b.data, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    def bwd(g):
        if a.requires_grad:
            a.accumulate(g)
        if b.requires_grad:
            b.accumulate(-g)

    return _node(a.data - b.data, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    def bwd(g):
        if a.requires_grad:
            a.accumulate(g * b.data)
        if b.requires_grad:
            b.accumulate(g * a.data)

    return _node(a.data * b.data, (a, b), bwd)


def scale(a: Tensor, c: float) -> Tensor:
    def bwd(g):
        a.accumulate(g * c)

    return _node(a.data * c, (a,), bwd)


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def bwd(g):
        a.accumulate(g * out_data)

    return _node(out_data, (a,), bwd)


def tanh(a: Tensor) -> Tensor:
    out_data = np.tanh(a.data)

    def bwd(g):
        a.accumulate(g * (1.0 - out_data * out_data))

    return _node(out_data, (a,), bwd)


def tsum(a: Tensor) -> Tensor:
    def bwd(g):
        a.accumulate(np.full_like(a.data, float(g)))

    return _node(a.data.sum(), (a,), bwd)


# ------------------------------------------------------------ shape plumbing


def concat_ch(a: Tensor, b: Tensor) -> Tensor:
    ca = a.data.shape[0]

    def bwd(g):
        if a.requires_grad:
            a.accumulate(g[:ca])
        if b.requires_grad:
            b.accumulate(g[ca:])

    return _node(np.concatenate([a.data, b.data], axis=0), (a, b), bwd)


def slice_ch(a: Tensor, start: int, stop: int) -> Tensor:
    def bwd(g):
        full = np.zeros_like(a.data)
        full[start:stop] = g
        a.accumulate(full)

    return _node(a.data[start:stop].copy(), (a,), bwd)


def flip_ch(a: Tensor) -> Tensor:
    def bwd(g):
        a.accumulate(g[::-1])

    return _node(a.data[::-1].copy(), (a,), bwd)


def expand_ch(v: Tensor, h: int, w: int) -> Tensor:
    """Broadcast a per-channel vector (C,) to a (C, h, w) map."""

    def bwd(g):
        v.accumulate(g.sum(axis=(1, 2)))

    return _node(np.broadcast_to(v.data[:, None, None], (v.data.shape[0], h, w)).copy(), (v,), bwd)


def _squeeze_data(x: np.ndarray) -> np.ndarray:
    c, h, w = x.shape
    return x.reshape(c, h // 2, 2, w // 2, 2).transpose(0, 2, 4, 1, 3).reshape(4 * c, h // 2, w // 2)


def _unsqueeze_data(z: np.ndarray) -> np.ndarray:
    c4, h, w = z.shape
    c = c4 // 4
    return z.reshape(c, 2, 2, h, w).transpose(0, 3, 1, 4, 2).reshape(c, 2 * h, 2 * w)


def squeeze2(a: Tensor) -> Tensor:
    """Fold 2x2 spatial blocks into channels: (C, H, W) -> (4C, H/2, W/2)."""
    c, h, w = a.data.shape
    if h % 2 or w % 2:
        raise ValueError(f"spatial size {h}x{w} not divisible by 2")

    def bwd(g):
        a.accumulate(_unsqueeze_data(g))

    return _node(_squeeze_data(a.data), (a,), bwd)


def unsqueeze2(a: Tensor) -> Tensor:
    c4 = a.data.shape[0]
    if c4 % 4:
        raise ValueError(f"channel count {c4} not divisible by 4")

    def bwd(g):
        a.accumulate(_squeeze_data(g))

    return _node(_unsqueeze_data(a.data), (a,), bwd)


# ---------------------------------------------------------------- conv (3x3)


def _im2col(x_padded: np.ndarray, h: int, w: int) -> np.ndarray:
    # x_padded: (C, h+2, w+2) -> (h*w, C*9)
    windows = np.lib.stride_tricks.sliding_window_view(x_padded, (3, 3), axis=(1, 2))
    return np.ascontiguousarray(windows.transpose(1, 2, 0, 3, 4)).reshape(h * w, -1)


def _col2im(cols: np.ndarray, c: int, h: int, w: int) -> np.ndarray:
    # scatter-add (h*w, C*9) patch gradients back to (C, h+2, w+2)
    cols = cols.reshape(h, w, c, 3, 3)
    x_padded = np.zeros((c, h + 2, w + 2))
    for di in range(3):
        for dj in range(3):
            x_padded[:, di : di + h, dj : dj + w] += cols[:, :, :, di, dj].transpose(2, 0, 1)
    return x_padded


def conv2d(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """3x3 convolution with same padding on a (C_in, H, W) map."""
    c_in, h, w = x.data.shape
    c_out = weight.data.shape[0]
    if weight.data.shape != (c_out, c_in, 3, 3):
        raise ValueError(f"weight shape {weight.data.shape} incompatible with input {x.data.shape}")
    x_padded = np.zeros((c_in, h + 2, w + 2))
    x_padded[:, 1 : 1 + h, 1 : 1 + w] = x.data
    cols = _im2col(x_padded, h, w)
    wmat = weight.data.reshape(c_out, -1)
    out = (cols @ wmat.T + bias.data[None, :]).T.reshape(c_out, h, w)

    def bwd(g):
        gmat = g.reshape(c_out, -1).T  # (h*w, c_out)
        if x.requires_grad:
            gx_padded = _col2im(gmat @ wmat, c_in, h, w)
            x.accumulate(gx_padded[:, 1 : 1 + h, 1 : 1 + w])
        if weight.requires_grad:
            weight.accumulate((gmat.T @ cols).reshape(c_out, c_in, 3, 3))
        if bias.requires_grad:
            bias.accumulate(gmat.sum(axis=0))

    return _node(out, (x, weight, bias), bwd)
