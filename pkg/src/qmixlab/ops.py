"""Primitive tensor ops with hand-written adjoints.

Every public function takes plain :class:`~qmixlab.tensor.Tensor` operands and
an optional ``tape``; with ``tape=None`` only the forward value is computed.
Shapes are strict (no silent broadcasting beyond the documented cases) and
violations raise :class:`ShapeError` naming the offending dimension.

Convolution is computed by an im2col gather followed by a batched matmul; the
gather/scatter loops run over the k*k kernel offsets only, so the hot path is
dense matrix multiplication while the semantics stay those of the naive
six-nested-loop definition (the test suite checks this against exactly that
oracle).
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError
from .tensor import ParamBlock, Tape, Tensor, check_same_shape


def _rec(tape: Tape | None, out: Tensor, adjoint) -> Tensor:
    if tape is not None:
        tape.record(out, adjoint)
    return out


# ---------------------------------------------------------------------------
# convolution / pooling


def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Gather (B, C, k, k, ho, wo) patches from a padded input."""
    b, c = xp.shape[:2]
    cols = np.empty((b, c, k, k, ho, wo), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i : i + stride * (ho - 1) + 1 : stride,
                                  j : j + stride * (wo - 1) + 1 : stride]
    return cols


def _col2im(dcols: np.ndarray, xp_shape, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Scatter-add patch gradients back onto the padded input grid."""
    dxp = np.zeros(xp_shape, dtype=dcols.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i : i + stride * (ho - 1) + 1 : stride,
                j : j + stride * (wo - 1) + 1 : stride] += dcols[:, :, i, j]
    return dxp


def conv2d(
    x: Tensor,
    weight: ParamBlock,
    bias: ParamBlock | None = None,
    stride: int = 1,
    padding: int = 0,
    groups: int = 1,
    tape: Tape | None = None,
) -> Tensor:
    """2-D cross-correlation of a (B, Cin, H, W) input with (Cout, Cin/g, k, k) weights."""
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d input must be rank 4, got shape {x.shape}")
    if weight.data.ndim != 4:
        raise ShapeError(f"conv2d weight must be rank 4, got shape {weight.shape}")
    b, cin, h, w = x.shape
    cout, cin_g, k, k2 = weight.shape
    if k != k2:
        raise ShapeError(f"conv2d kernel must be square, got {k}x{k2}")
    if k < 1 or stride < 1 or padding < 0:
        raise ShapeError(f"conv2d needs k>=1, stride>=1, padding>=0 (got k={k}, stride={stride}, padding={padding})")
    if groups < 1 or cin % groups != 0 or cout % groups != 0:
        raise ShapeError(f"channels (Cin={cin}, Cout={cout}) must divide groups={groups}")
    if cin_g != cin // groups:
        raise ShapeError(f"weight expects Cin/groups={cin_g} input channels but input has Cin={cin} with groups={groups}")
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d output spatial dims would be {ho}x{wo} for input {h}x{w}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"bias has shape {bias.shape}, expected ({cout},)")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _im2col(xp, k, stride, ho, wo)
    colmat = cols.reshape(b, groups, cin_g * k * k, ho * wo)
    wmat = weight.data.reshape(groups, cout // groups, cin_g * k * k)
    out_mat = np.matmul(wmat[None], colmat)  # (B, g, Cout/g, ho*wo)
    out_arr = out_mat.reshape(b, cout, ho, wo)
    if bias is not None:
        out_arr = out_arr + bias.data[None, :, None, None]
    out = Tensor(out_arr)

    def adjoint(g: np.ndarray) -> None:
        gm = g.reshape(b, groups, cout // groups, ho * wo)
        dw = np.matmul(gm, colmat.transpose(0, 1, 3, 2)).sum(axis=0)
        weight.ensure_grad()[...] += dw.reshape(weight.shape)
        if bias is not None:
            bias.ensure_grad()[...] += g.sum(axis=(0, 2, 3))
        dcols = np.matmul(wmat.transpose(0, 2, 1)[None], gm)
        dxp = _col2im(dcols.reshape(cols.shape), xp.shape, k, stride, ho, wo)
        if padding:
            dxp = dxp[:, :, padding:-padding, padding:-padding]
        x.ensure_grad()[...] += dxp

    return _rec(tape, out, adjoint)


def maxpool2d(x: Tensor, k: int, stride: int = 1, padding: int = 0, tape: Tape | None = None) -> Tensor:
    """Max pooling; ties resolve to the first kernel offset in scan order."""
    if x.data.ndim != 4:
        raise ShapeError(f"maxpool2d input must be rank 4, got shape {x.shape}")
    b, c, h, w = x.shape
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"maxpool2d output spatial dims would be {ho}x{wo}")
    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)),
                    constant_values=-np.inf)
    else:
        xp = x.data
    best = np.full((b, c, ho, wo), -np.inf, dtype=x.dtype)
    arg = np.zeros((b, c, ho, wo), dtype=np.int64)
    for idx in range(k * k):
        i, j = divmod(idx, k)
        cur = xp[:, :, i : i + stride * (ho - 1) + 1 : stride,
                 j : j + stride * (wo - 1) + 1 : stride]
        m = cur > best
        best[m] = cur[m]
        arg[m] = idx
    out = Tensor(best)

    def adjoint(g: np.ndarray) -> None:
        dxp = np.zeros(xp.shape, dtype=g.dtype)
        for idx in range(k * k):
            m = arg == idx
            if not m.any():
                continue
            i, j = divmod(idx, k)
            view = dxp[:, :, i : i + stride * (ho - 1) + 1 : stride,
                       j : j + stride * (wo - 1) + 1 : stride]
            view[m] += g[m]
        if padding:
            dxp = dxp[:, :, padding:-padding, padding:-padding]
        x.ensure_grad()[...] += dxp

    return _rec(tape, out, adjoint)


def upsample_nearest_2x(x: Tensor, tape: Tape | None = None) -> Tensor:
    """Nearest-neighbour 2x spatial upsampling."""
    if x.data.ndim != 4:
        raise ShapeError(f"upsample input must be rank 4, got shape {x.shape}")
    b, c, h, w = x.shape
    out = Tensor(x.data.repeat(2, axis=2).repeat(2, axis=3))

    def adjoint(g: np.ndarray) -> None:
        x.ensure_grad()[...] += g.reshape(b, c, h, 2, w, 2).sum(axis=(3, 5))

    return _rec(tape, out, adjoint)


def global_avg_pool(x: Tensor, tape: Tape | None = None) -> Tensor:
    """Spatial mean per channel: (B, C, H, W) -> (B, C)."""
    if x.data.ndim != 4:
        raise ShapeError(f"global_avg_pool input must be rank 4, got shape {x.shape}")
    b, c, h, w = x.shape
    if h * w < 1:
        raise ShapeError("global_avg_pool needs at least one spatial element")
    out = Tensor(x.data.mean(axis=(2, 3)))

    def adjoint(g: np.ndarray) -> None:
        x.ensure_grad()[...] += (g / (h * w))[:, :, None, None]

    return _rec(tape, out, adjoint)


# ---------------------------------------------------------------------------
# dense / channel-vector ops


def linear(x: Tensor, weight: ParamBlock, bias: ParamBlock | None = None, tape: Tape | None = None) -> Tensor:
    """Row-major matrix product: (B, n) x (m, n)^T -> (B, m)."""
    if x.data.ndim != 2 or weight.data.ndim != 2:
        raise ShapeError(f"linear expects rank-2 operands, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"inner dimensions disagree: input has {x.shape[1]}, weight expects {weight.shape[1]}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"bias has shape {bias.shape}, expected ({weight.shape[0]},)")
    out_arr = x.data @ weight.data.T
    if bias is not None:
        out_arr = out_arr + bias.data[None, :]
    out = Tensor(out_arr)

    def adjoint(g: np.ndarray) -> None:
        weight.ensure_grad()[...] += g.T @ x.data
        if bias is not None:
            bias.ensure_grad()[...] += g.sum(axis=0)
        x.ensure_grad()[...] += g @ weight.data

    return _rec(tape, out, adjoint)


def sin_affine(z: Tensor, w: Tensor, theta: Tensor | None = None, tape: Tape | None = None) -> Tensor:
    """Elementwise sinusoidal mixing: out[b, i] = sin(z[b, i] * w[i] + theta[i])."""
    if z.data.ndim != 2:
        raise ShapeError(f"sin_affine expects a rank-2 input, got shape {z.shape}")
    r = z.shape[1]
    if w.shape != (r,):
        raise ShapeError(f"weight vector has shape {w.shape}, expected ({r},)")
    if theta is not None and theta.shape != (r,):
        raise ShapeError(f"phase vector has shape {theta.shape}, expected ({r},)")
    pre = z.data * w.data[None, :]
    if theta is not None:
        pre = pre + theta.data[None, :]
    out = Tensor(np.sin(pre))

    def adjoint(g: np.ndarray) -> None:
        gc = g * np.cos(pre)
        z.ensure_grad()[...] += gc * w.data[None, :]
        w.ensure_grad()[...] += (gc * z.data).sum(axis=0)
        if theta is not None:
            theta.ensure_grad()[...] += gc.sum(axis=0)

    return _rec(tape, out, adjoint)


def slice_prefix(p: Tensor, r: int, tape: Tape | None = None) -> Tensor:
    """Read the leading ``r`` entries of a vector; gradients flow back into that prefix."""
    if p.data.ndim != 1:
        raise ShapeError(f"slice_prefix expects a vector, got shape {p.shape}")
    if not 0 < r <= p.size:
        raise ShapeError(f"prefix length {r} out of range for vector of size {p.size}")
    out = Tensor(p.data[:r].copy())

    def adjoint(g: np.ndarray) -> None:
        p.ensure_grad()[:r] += g

    return _rec(tape, out, adjoint)


def scale(x: Tensor, alpha: Tensor, tape: Tape | None = None) -> Tensor:
    """Multiply by a learnable scalar (shape (1,) or ())."""
    if alpha.size != 1:
        raise ShapeError(f"scale factor must be a scalar, got shape {alpha.shape}")
    a = alpha.data.reshape(())
    out = Tensor(x.data * a)

    def adjoint(g: np.ndarray) -> None:
        x.ensure_grad()[...] += g * a
        alpha.ensure_grad()[...] += (g * x.data).sum().reshape(alpha.shape)

    return _rec(tape, out, adjoint)


# ---------------------------------------------------------------------------
# pointwise family


def sigmoid(x: Tensor, tape: Tape | None = None) -> Tensor:
    d = x.data
    out_arr = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))),
                       np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))
    out = Tensor(out_arr)

    def adjoint(g: np.ndarray) -> None:
        x.ensure_grad()[...] += g * out_arr * (1.0 - out_arr)

    return _rec(tape, out, adjoint)


def silu(x: Tensor, tape: Tape | None = None) -> Tensor:
    """x * sigmoid(x)."""
    d = x.data
    s = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))),
                 np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))
    out = Tensor(d * s)

    def adjoint(g: np.ndarray) -> None:
        x.ensure_grad()[...] += g * s * (1.0 + d * (1.0 - s))

    return _rec(tape, out, adjoint)


def add(x: Tensor, y: Tensor, tape: Tape | None = None) -> Tensor:
    check_same_shape("left addend", x, "right addend", y)
    out = Tensor(x.data + y.data)

    def adjoint(g: np.ndarray) -> None:
        x.ensure_grad()[...] += g
        y.ensure_grad()[...] += g

    return _rec(tape, out, adjoint)


def mul(x: Tensor, y: Tensor, tape: Tape | None = None) -> Tensor:
    check_same_shape("left factor", x, "right factor", y)
    out = Tensor(x.data * y.data)

    def adjoint(g: np.ndarray) -> None:
        x.ensure_grad()[...] += g * y.data
        y.ensure_grad()[...] += g * x.data

    return _rec(tape, out, adjoint)


def channel_gate(x: Tensor, s: Tensor, tape: Tape | None = None) -> Tensor:
    """Rescale a (B, C, H, W) map by per-channel weights s of shape (B, C)."""
    if x.data.ndim != 4 or s.data.ndim != 2:
        raise ShapeError(f"channel_gate expects rank-4 map and rank-2 gate, got {x.shape} and {s.shape}")
    if x.shape[:2] != s.shape:
        raise ShapeError(f"gate shape {s.shape} does not match map batch/channel dims {x.shape[:2]}")
    out = Tensor(x.data * s.data[:, :, None, None])

    def adjoint(g: np.ndarray) -> None:
        x.ensure_grad()[...] += g * s.data[:, :, None, None]
        s.ensure_grad()[...] += (g * x.data).sum(axis=(2, 3))

    return _rec(tape, out, adjoint)


def concat_channels(xs: list[Tensor], tape: Tape | None = None) -> Tensor:
    if not xs:
        raise ShapeError("concat_channels needs at least one input")
    base = xs[0].shape
    for i, t in enumerate(xs[1:], 1):
        if t.data.ndim != len(base) or t.shape[0] != base[0] or t.shape[2:] != base[2:]:
            raise ShapeError(f"concat input {i} has shape {t.shape}, incompatible with {base}")
    sizes = [t.shape[1] for t in xs]
    out = Tensor(np.concatenate([t.data for t in xs], axis=1))

    def adjoint(g: np.ndarray) -> None:
        off = 0
        for t, c in zip(xs, sizes):
            t.ensure_grad()[...] += g[:, off : off + c]
            off += c

    return _rec(tape, out, adjoint)


def split_channels(x: Tensor, sizes: list[int], tape: Tape | None = None) -> list[Tensor]:
    """Split along the channel axis; each piece gets its own tape record."""
    if sum(sizes) != x.shape[1]:
        raise ShapeError(f"split sizes {sizes} do not sum to channel count {x.shape[1]}")
    outs = []
    off = 0
    for c in sizes:
        lo = off
        piece = Tensor(x.data[:, lo : lo + c].copy())

        def adjoint(g: np.ndarray, lo=lo, c=c) -> None:
            x.ensure_grad()[:, lo : lo + c] += g

        outs.append(_rec(tape, piece, adjoint))
        off += c
    return outs


# ---------------------------------------------------------------------------
# normalization / reductions / loss


def batch_norm(
    x: Tensor,
    gamma: ParamBlock,
    beta: ParamBlock,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool = False,
    momentum: float = 0.03,
    eps: float = 1e-3,
    tape: Tape | None = None,
) -> Tensor:
    """Per-channel batch normalization over (B, H, W).

    Training mode normalizes with biased batch statistics and nudges the
    running buffers (unbiased variance, torch-style momentum); eval mode is a
    pure affine transform using the running buffers.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"batch_norm input must be rank 4, got shape {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm affine params must have shape ({c},)")
    if training:
        n = x.shape[0] * x.shape[2] * x.shape[3]
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mu[None, :, None, None]) * inv[None, :, None, None]
        if n > 1:
            running_mean += momentum * (mu - running_mean)
            running_var += momentum * (var * n / (n - 1) - running_var)
        out = Tensor(gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None])

        def adjoint(g: np.ndarray) -> None:
            gamma.ensure_grad()[...] += (g * xhat).sum(axis=(0, 2, 3))
            beta.ensure_grad()[...] += g.sum(axis=(0, 2, 3))
            gx = g * gamma.data[None, :, None, None]
            mean_gx = gx.mean(axis=(0, 2, 3), keepdims=True)
            mean_gx_xhat = (gx * xhat).mean(axis=(0, 2, 3), keepdims=True)
            x.ensure_grad()[...] += inv[None, :, None, None] * (gx - mean_gx - xhat * mean_gx_xhat)

    else:
        inv = 1.0 / np.sqrt(running_var + eps)
        xhat = (x.data - running_mean[None, :, None, None]) * inv[None, :, None, None]
        out = Tensor(gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None])

        def adjoint(g: np.ndarray) -> None:
            gamma.ensure_grad()[...] += (g * xhat).sum(axis=(0, 2, 3))
            beta.ensure_grad()[...] += g.sum(axis=(0, 2, 3))
            x.ensure_grad()[...] += g * (gamma.data * inv)[None, :, None, None]

    return _rec(tape, out, adjoint)


def reduce_sum(x: Tensor, tape: Tape | None = None) -> Tensor:
    out = Tensor(np.asarray(x.data.sum()))

    def adjoint(g: np.ndarray) -> None:
        x.ensure_grad()[...] += g

    return _rec(tape, out, adjoint)


def reduce_mean(x: Tensor, tape: Tape | None = None) -> Tensor:
    n = x.size
    out = Tensor(np.asarray(x.data.mean()))

    def adjoint(g: np.ndarray) -> None:
        x.ensure_grad()[...] += g / n

    return _rec(tape, out, adjoint)


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray, tape: Tape | None = None) -> Tensor:
    """Mean cross-entropy of integer labels under a softmax over the last axis."""
    if logits.data.ndim != 2:
        raise ShapeError(f"logits must be rank 2, got shape {logits.shape}")
    b, k = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (b,):
        raise ShapeError(f"labels have shape {labels.shape}, expected ({b},)")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    ez = np.exp(z)
    denom = ez.sum(axis=1, keepdims=True)
    logp = z - np.log(denom)
    out = Tensor(np.asarray(-logp[np.arange(b), labels].mean()))

    def adjoint(g: np.ndarray) -> None:
        soft = ez / denom
        soft[np.arange(b), labels] -= 1.0
        logits.ensure_grad()[...] += g * soft / b

    return _rec(tape, out, adjoint)
