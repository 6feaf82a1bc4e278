"""Dense tensors, the gradient tape, and reverse-mode differentiation.

A :class:`Tensor` wraps a C-contiguous (row-major) numpy array and is treated
as an immutable value: operations never write into an existing tensor, they
allocate fresh outputs, so tensors are safe to share read-only across threads.
A :class:`Tape` records executed primitives while active; :func:`backward`
replays the record once in reverse execution order and returns a gradient for
every watched parameter (zero for parameters the loss does not depend on).

Scalar kind is float32 by default; gradient-oracle tests and other
precision-sensitive callers pass ``dtype=np.float64`` explicitly or flip the
module default with :func:`set_default_dtype`.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "backward",
    "Rng",
    "tensor",
    "zeros",
    "set_default_dtype",
    "default_dtype",
    "set_check_finite",
    "pause_recording",
    "active_tape",
    "NonFiniteError",
    "TapeError",
]

_DEFAULT_DTYPE = np.float32
_CHECK_FINITE = False
_TAPE_STACK: list["Tape"] = []


class NonFiniteError(ValueError):
    """A tensor holds NaN or Inf; results must stay finite."""


class TapeError(RuntimeError):
    """Misuse of the gradient tape (reuse, foreign loss, non-scalar loss)."""


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported scalar kind: {dtype}")
    _DEFAULT_DTYPE = dtype.type


def default_dtype():
    return _DEFAULT_DTYPE


def set_check_finite(enabled: bool) -> None:
    """Validate every op result for finiteness (slow; meant for tests)."""
    global _CHECK_FINITE
    _CHECK_FINITE = bool(enabled)


class Tensor:
    """Immutable dense array with shape and row-major flat data."""

    __slots__ = ("_data",)

    def __init__(self, data, dtype=None):
        arr = np.array(data, dtype=dtype or _DEFAULT_DTYPE, order="C")
        if arr.dtype.type not in (np.float32, np.float64):
            raise ValueError(f"unsupported scalar kind: {arr.dtype}")
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor data contains NaN/Inf")
        arr.setflags(write=False)
        self._data = arr

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        # Trusted internal path for op results: no copy, optional finite check.
        out = cls.__new__(cls)
        arr = np.ascontiguousarray(arr)
        if _CHECK_FINITE and not np.all(np.isfinite(arr)):
            raise NonFiniteError("operation produced NaN/Inf")
        arr.setflags(write=False)
        out._data = arr
        return out

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def shape(self) -> tuple[int, ...]:
        return self._data.shape

    @property
    def dtype(self):
        return self._data.dtype

    @property
    def size(self) -> int:
        return self._data.size

    @property
    def ndim(self) -> int:
        return self._data.ndim

    def item(self) -> float:
        return float(self._data.reshape(-1)[0])

    def tolist(self):
        return self._data.tolist()

    def astype(self, dtype) -> "Tensor":
        return Tensor._wrap(self._data.astype(dtype))

    def assert_finite(self, what: str = "tensor") -> "Tensor":
        if not np.all(np.isfinite(self._data)):
            raise NonFiniteError(f"{what} contains NaN/Inf")
        return self

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self._data.dtype.name})"


def tensor(data, dtype=None) -> Tensor:
    return Tensor(data, dtype=dtype)


def zeros(shape, dtype=None) -> Tensor:
    return Tensor._wrap(np.zeros(shape, dtype=dtype or _DEFAULT_DTYPE))


class Tape:
    """Ordered record of executed primitives, consumed by one backward pass.

    Use as a context manager; primitives executed inside register a node
    holding the output tensor and a closure over whatever intermediates the
    reverse pass needs. Watch parameters (by name) before or during recording.
    """

    def __init__(self):
        self._nodes: list[tuple[Tensor, object]] = []
        self._produced: set[int] = set()
        self._watched: dict[str, Tensor] = {}
        self.consumed = False

    def watch(self, params: dict) -> None:
        for name, p in params.items():
            if not isinstance(p, Tensor):
                raise TypeError(f"watched parameter {name!r} is not a Tensor")
            self._watched[name] = p

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        popped = _TAPE_STACK.pop()
        assert popped is self, "unbalanced tape nesting"
        return False

    def _record(self, out: Tensor, backward_fn) -> None:
        self._nodes.append((out, backward_fn))
        self._produced.add(id(out))

    def gradients(self, loss: Tensor) -> dict[str, Tensor]:
        return backward(self, loss)


def active_tape() -> Tape | None:
    if not _TAPE_STACK:
        return None
    top = _TAPE_STACK[-1]
    return top if isinstance(top, Tape) else None


def record(out: Tensor, backward_fn) -> None:
    """Register a primitive on the active tape, if any."""
    t = active_tape()
    if t is not None:
        t._record(out, backward_fn)


class pause_recording:
    """Context manager masking any active tape (e.g. teacher forwards)."""

    def __enter__(self):
        _TAPE_STACK.append(None)
        return self

    def __exit__(self, *exc):
        popped = _TAPE_STACK.pop()
        assert popped is None, "unbalanced tape nesting"
        return False


def backward(tape: Tape, loss: Tensor) -> dict[str, Tensor]:
    """Reverse pass: gradients of a scalar loss for every watched parameter.

    Visits nodes in strict reverse execution order (reverse topological by
    construction). The tape is consumed; a second call raises.
    """
    if tape.consumed:
        raise TapeError("tape already consumed by a previous backward call")
    if loss.size != 1:
        raise TapeError(f"loss must be scalar, got shape {loss.shape}")
    if id(loss) not in tape._produced:
        raise TapeError("loss was not produced under this tape's recording")
    tape.consumed = True

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for out, fn in reversed(tape._nodes):
        g = grads.get(id(out))
        if g is None:
            continue
        for inp, gin in fn(g):
            acc = grads.get(id(inp))
            grads[id(inp)] = gin if acc is None else acc + gin

    result: dict[str, Tensor] = {}
    for name, p in tape._watched.items():
        g = grads.get(id(p))
        if g is None:
            result[name] = Tensor._wrap(np.zeros_like(p.data))
        else:
            result[name] = Tensor._wrap(np.asarray(g, dtype=p.data.dtype))
    return result


class Rng:
    """Deterministic splittable random source (numpy Philox + SeedSequence).

    The same 64-bit seed always yields the same draw sequence, and
    :meth:`split` derives independent child generators deterministically, so
    concurrent consumers never share state.
    """

    def __init__(self, seed: int, _seq: np.random.SeedSequence | None = None):
        self.seed = int(seed)
        self._seq = _seq if _seq is not None else np.random.SeedSequence(self.seed)
        self._gen = np.random.Generator(np.random.Philox(self._seq))

    def split(self, n: int) -> list["Rng"]:
        return [Rng(self.seed, _seq=child) for child in self._seq.spawn(n)]

    def normal(self, shape=(), mean=0.0, std=1.0, dtype=None) -> np.ndarray:
        out = self._gen.standard_normal(size=shape, dtype=np.float64)
        out = out * std + mean
        return out.astype(dtype or _DEFAULT_DTYPE)

    def uniform(self, shape=(), low=0.0, high=1.0, dtype=None) -> np.ndarray:
        out = self._gen.uniform(low, high, size=shape)
        return np.asarray(out, dtype=dtype or _DEFAULT_DTYPE)

    def integers(self, low, high=None, shape=()) -> np.ndarray:
        return self._gen.integers(low, high, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n: int, size: int, replace: bool = False) -> np.ndarray:
        return self._gen.choice(n, size=size, replace=replace)
