"""Dense tensor primitives.

A tensor is a C-contiguous float64 ``numpy.ndarray``: shape plus a flat
row-major data buffer. Every operation here is a pure function returning a
new array, so values can be shared freely between threads.
"""

from __future__ import annotations

import zlib
from typing import Sequence

import numpy as np

Tensor = np.ndarray
AxisPairing = Sequence[tuple[int, int]]

ISOMETRY_MODES = ("qr", "noise", "identity_noise")


class TensorError(ValueError):
    """Raised for shape, pairing or argument errors in tensor operations."""


def tensor(data, shape=None, dtype=np.float64) -> Tensor:
    """Build a tensor from nested data or a flat sequence plus ``shape``."""
    arr = np.array(data, dtype=dtype)
    if shape is not None:
        shape = tuple(int(s) for s in shape)
        if arr.size != int(np.prod(shape, dtype=np.int64)):
            raise TensorError(f"{arr.size} values cannot fill shape {shape}")
        arr = arr.reshape(shape)
    if any(s < 1 for s in arr.shape):
        raise TensorError(f"extents must be >= 1, got {arr.shape}")
    return np.asarray(arr, order="C")


def rng_stream(seed: int, *names) -> np.random.Generator:
    """Named, splittable PCG64 stream.

    The stream for ``(seed, *names)`` is ``PCG64(SeedSequence(seed,
    spawn_key=(crc32(name_0), ...)))``; names may be strings or ints. Distinct
    name paths give statistically independent streams, and the same path always
    gives the same stream.
    """
    key = tuple(
        n if isinstance(n, int) else zlib.crc32(str(n).encode()) for n in names
    )
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=key)))


def _check_pairing(a: Tensor, b: Tensor, pairs, role: str):
    seen_a, seen_b = set(), set()
    for i, j in pairs:
        if not (0 <= i < a.ndim and 0 <= j < b.ndim):
            raise TensorError(f"{role} pair ({i}, {j}) out of range for ranks {a.ndim}, {b.ndim}")
        if i in seen_a or j in seen_b:
            raise TensorError(f"axis repeated in {role} pairing {list(pairs)}")
        if a.shape[i] != b.shape[j]:
            raise TensorError(
                f"extent mismatch on {role} pair ({i}, {j}): {a.shape[i]} != {b.shape[j]}"
            )
        seen_a.add(i)
        seen_b.add(j)
    return seen_a, seen_b


def contract(a: Tensor, b: Tensor, pairing: AxisPairing, batch: AxisPairing = ()) -> Tensor:
    """Sum over paired axes of ``a`` and ``b``.

    Result axes are: batch axes (in ``batch`` order), then the unpaired axes of
    ``a``, then the unpaired axes of ``b``. ``batch`` pairs are shared indices
    that are kept rather than summed (a Hadamard product along those axes);
    with no batch pairs this is an ordinary tensordot.
    """
    pairs = [(int(i), int(j)) for i, j in pairing]
    bpairs = [(int(i), int(j)) for i, j in batch]
    used_a, used_b = _check_pairing(a, b, pairs + bpairs, "contraction")

    free_a = [k for k in range(a.ndim) if k not in used_a]
    free_b = [k for k in range(b.ndim) if k not in used_b]
    if not bpairs:
        out = np.tensordot(a, b, axes=([i for i, _ in pairs], [j for _, j in pairs]))
        return np.asarray(out, order="C")

    ba, bb = [i for i, _ in bpairs], [j for _, j in bpairs]
    ca, cb = [i for i, _ in pairs], [j for _, j in pairs]
    bshape = [a.shape[i] for i in ba]
    fa_shape = [a.shape[i] for i in free_a]
    fb_shape = [b.shape[j] for j in free_b]
    nb = int(np.prod(bshape, dtype=np.int64))
    nk = int(np.prod([a.shape[i] for i in ca], dtype=np.int64))
    am = np.transpose(a, ba + free_a + ca).reshape(nb, -1, nk)
    bm = np.transpose(b, bb + cb + free_b).reshape(nb, nk, -1)
    out = np.matmul(am, bm)
    return np.ascontiguousarray(out.reshape(bshape + fa_shape + fb_shape))


def permute(a: Tensor, perm: Sequence[int]) -> Tensor:
    perm = [int(p) for p in perm]
    if sorted(perm) != list(range(a.ndim)):
        raise TensorError(f"{perm} is not a permutation of 0..{a.ndim - 1}")
    return np.asarray(np.transpose(a, perm), order="C")


def inverse_permutation(perm: Sequence[int]) -> list[int]:
    inv = [0] * len(perm)
    for i, p in enumerate(perm):
        inv[p] = i
    return inv


def reshape(a: Tensor, new_shape: Sequence[int]) -> Tensor:
    new_shape = tuple(int(s) for s in new_shape)
    if any(s < 1 for s in new_shape):
        raise TensorError(f"extents must be >= 1, got {new_shape}")
    if int(np.prod(new_shape, dtype=np.int64)) != a.size:
        raise TensorError(f"cannot reshape {a.shape} ({a.size} values) to {new_shape}")
    return np.asarray(a, order="C").reshape(new_shape)


def isometry_residual(w: Tensor, n_in_axes: int | None = None) -> float:
    """max |WᵀW - I| with ``w`` matricized as (in-legs) x (out-legs).

    By default all axes but the last are in-legs.
    """
    n_in = w.ndim - 1 if n_in_axes is None else n_in_axes
    rows = int(np.prod(w.shape[:n_in], dtype=np.int64))
    m = w.reshape(rows, -1)
    return float(np.max(np.abs(m.T @ m - np.eye(m.shape[1]))))


def random_isometry(
    dim_in: int,
    dim_out: int,
    mode: str = "qr",
    std: float = 1e-4,
    rng: np.random.Generator | int | None = None,
) -> Tensor:
    """Random ``dim_in x dim_out`` matrix for initializing network tensors.

    ``qr`` orthonormalizes a Gaussian matrix; ``noise`` draws i.i.d. N(0, std²)
    entries and is not isometric; ``identity_noise`` perturbs the truncated
    identity by N(0, std²) noise and projects back onto the isometries.
    """
    if mode not in ISOMETRY_MODES:
        raise TensorError(f"unknown init mode {mode!r}; expected one of {ISOMETRY_MODES}")
    if dim_in < 1 or dim_out < 1:
        raise TensorError("dimensions must be positive")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)

    if mode == "noise":
        if std <= 0:
            raise TensorError("noise init needs std > 0")
        return rng.normal(0.0, std, size=(dim_in, dim_out))

    if dim_out > dim_in:
        raise TensorError(f"{mode} init needs dim_out <= dim_in, got {dim_in} x {dim_out}")
    if mode == "qr":
        q, r = np.linalg.qr(rng.standard_normal((dim_in, dim_out)))
        # sign fix makes the draw Haar-distributed
        return np.ascontiguousarray(q * np.where(np.diag(r) < 0, -1.0, 1.0))

    if std < 0:
        raise TensorError("identity_noise init needs std >= 0")
    eye = np.eye(dim_in, dim_out)
    if std == 0:
        return eye
    return _polar(eye + rng.normal(0.0, std, size=(dim_in, dim_out)))


def _polar(m: np.ndarray) -> np.ndarray:
    u, _, vt = np.linalg.svd(m, full_matrices=False)
    return u @ vt


def project_isometry(t: Tensor, in_axes: Sequence[int] | None = None) -> Tensor:
    """Nearest isometry in Frobenius norm (the polar factor).

    ``in_axes`` selects the in-group; the remaining axes form the out-group.
    The default in-group is every axis but the last. The result has the same
    shape and axis order as ``t``.
    """
    in_axes = list(range(t.ndim - 1)) if in_axes is None else [int(i) for i in in_axes]
    out_axes = [k for k in range(t.ndim) if k not in in_axes]
    if len(set(in_axes)) != len(in_axes) or any(not 0 <= k < t.ndim for k in in_axes):
        raise TensorError(f"bad in-axes {in_axes} for rank {t.ndim}")
    perm = in_axes + out_axes
    moved = np.transpose(t, perm)
    rows = int(np.prod(moved.shape[: len(in_axes)], dtype=np.int64))
    cols = moved.size // rows
    if cols > rows:
        raise TensorError(f"out-dimension {cols} exceeds in-dimension {rows}")
    w = _polar(moved.reshape(rows, cols)).reshape(moved.shape)
    return np.ascontiguousarray(np.transpose(w, inverse_permutation(perm)))
