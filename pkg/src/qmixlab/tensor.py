"""Tensor containers, the gradient tape, and the finite-difference gradient oracle.

The numeric core is deliberately small: values live in numpy arrays, every
primitive op appends one record to an explicit :class:`Tape`, and backward
replays those records in exact reverse execution order.  All arithmetic is
single-threaded-deterministic: running the same ops on the same inputs at the
same precision reproduces bit-identical values and gradients.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import NumericsError, ShapeError, TapeError

F64 = np.float64
F32 = np.float32
DEFAULT_DTYPE = F64


def resolve_dtype(precision) -> np.dtype:
    """Map a precision flag (64/32, 'f64'/'f32', or a dtype) to a numpy dtype."""
    if precision in (None, 64, "64", "f64", "float64", F64, np.dtype(F64)):
        return np.dtype(F64)
    if precision in (32, "32", "f32", "float32", F32, np.dtype(F32)):
        return np.dtype(F32)
    raise ValueError(f"unsupported precision {precision!r}; use 64 or 32")


class Tensor:
    """A value node: numpy data plus an optional same-shape gradient slot."""

    __slots__ = ("data", "grad")

    def __init__(self, data, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def ensure_grad(self) -> np.ndarray:
        """Return the gradient accumulator, allocating zeros on first use."""
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        return self.grad

    def clear_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"{type(self).__name__}(shape={self.shape}, dtype={self.dtype})"


class ParamBlock(Tensor):
    """A named, owned parameter: values plus an additively-accumulated gradient.

    ``trainable=False`` marks stored-but-frozen blocks (they are counted in
    parameter totals but skipped by optimizers and gradient checks).
    """

    __slots__ = ("id", "trainable")

    def __init__(self, pid: str, data, dtype=None, trainable: bool = True):
        super().__init__(data, dtype=dtype)
        self.id = pid
        self.trainable = trainable

    @property
    def count(self) -> int:
        return self.data.size

    def zero_grad(self) -> None:
        """Reset the accumulator so every entry is exactly 0."""
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"ParamBlock({self.id!r}, shape={self.shape})"


class Tape:
    """Ordered record of executed primitive ops.

    Each record is ``(out, adjoint)`` where ``adjoint`` propagates ``out.grad``
    into the grads of the op's inputs.  ``backward`` walks the records in
    exact reverse execution order; records whose output never received a
    gradient (dead branches) are skipped.
    """

    __slots__ = ("_records", "_consumed")

    def __init__(self):
        self._records: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []
        self._consumed = False

    def record(self, out: Tensor, adjoint: Callable[[np.ndarray], None]) -> None:
        self._records.append((out, adjoint))

    def __len__(self) -> int:
        return len(self._records)

    @property
    def last_output(self) -> Tensor:
        if not self._records:
            raise TapeError("tape is empty")
        return self._records[-1][0]

    def backward(self, loss_grad: float = 1.0) -> None:
        """Fill gradients for every tensor touched on this tape.

        The tape must be closed over a scalar loss: the final recorded op's
        output must have exactly one element.  Gradients accumulate additively,
        so a parameter used at several sites receives the sum of its per-site
        adjoints.  A tape can be walked backward only once.
        """
        if self._consumed:
            raise TapeError("tape already consumed by a previous backward")
        if not self._records:
            raise TapeError("backward on an empty tape")
        loss = self._records[-1][0]
        if loss.size != 1:
            raise TapeError(
                f"tape is not closed over a scalar loss (final output has shape {loss.shape})"
            )
        loss.grad = np.full_like(loss.data, loss_grad)
        for out, adjoint in reversed(self._records):
            if out.grad is None:
                continue
            adjoint(out.grad)
        self._consumed = True


def check_same_shape(name_a: str, a: Tensor, name_b: str, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{name_a} has shape {a.shape} but {name_b} has shape {b.shape}")


def assert_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericsError(f"{what} contains non-finite values")


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        if isinstance(t, ParamBlock):
            t.zero_grad()
        else:
            t.clear_grad()


def finite_diff_check(
    f: Callable[[Tape | None], Tensor],
    tensors: Sequence[Tensor],
    eps: float = 1e-5,
    coords_per_tensor: int = 100,
    seed: int = 0,
) -> float:
    """Compare tape gradients against central finite differences.

    ``f`` must be a deterministic scalar-valued forward function: called with a
    tape it records ops and returns the scalar loss tensor, called with ``None``
    it just recomputes the loss.  ``tensors`` are the leaves to check (params or
    inputs).  Returns the max over sampled coordinates of
    ``|g_analytic - g_numeric| / max(1, |g_numeric|)``.

    64-bit values are expected; at lower precision central differences are
    dominated by round-off and the result is meaningless.
    """
    zero_grads(tensors)
    tape = Tape()
    loss = f(tape)
    if loss.size != 1:
        raise ShapeError(f"gradient check needs a scalar loss, got shape {loss.shape}")
    assert_finite(loss.data, "loss")
    tape.backward()

    analytic = []
    for t in tensors:
        analytic.append(np.zeros_like(t.data) if t.grad is None else t.grad.copy())

    rng = np.random.default_rng(seed)
    max_rel = 0.0
    for t, ga in zip(tensors, analytic):
        flat = t.data.reshape(-1)
        n = flat.size
        idxs = rng.choice(n, size=min(coords_per_tensor, n), replace=False)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + eps
            lp = float(f(None).data.reshape(()))
            flat[i] = orig - eps
            lm = float(f(None).data.reshape(()))
            flat[i] = orig
            if not (np.isfinite(lp) and np.isfinite(lm)):
                raise NumericsError("perturbed loss is non-finite during gradient check")
            gn = (lp - lm) / (2.0 * eps)
            rel = abs(ga.reshape(-1)[i] - gn) / max(1.0, abs(gn))
            if rel > max_rel:
                max_rel = rel
    return max_rel
