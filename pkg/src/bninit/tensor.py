"""Dense float64 array substrate.

Tensors are plain ``numpy.ndarray`` objects with dtype float64. This module
adds the few checked primitives the layers rely on: seeded sampling,
biased batch statistics and a shape-checked matrix product.

Random streams use numpy's PCG64 bit generator; Gaussian draws use numpy's
ziggurat sampler (``Generator.standard_normal``). Both are fixed by the
numpy Generator API, so a seed reproduces the same sequence across runs
and platforms.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

DTYPE = np.float64

RNG_ALGORITHM = "PCG64+ziggurat"


def make_rng(seed: int) -> np.random.Generator:
    """Return a PCG64 stream for an unsigned 64-bit seed (0 is valid)."""
    seed = int(seed)
    if seed < 0 or seed >= 2**64:
        raise ValueError(f"seed must fit in 64 unsigned bits, got {seed}")
    return np.random.Generator(np.random.PCG64(seed))


def as_tensor(x) -> np.ndarray:
    return np.asarray(x, dtype=DTYPE)


def randn(shape: Sequence[int] | int, mean: float = 0.0, std: float = 1.0,
          rng: np.random.Generator | None = None) -> np.ndarray:
    """I.i.d. Gaussian samples.

    Draws ``prod(shape)`` standard normals, so an empty shape consumes
    nothing from the stream. ``std == 0`` still consumes the draws, which
    keeps downstream sequences independent of the std value.
    """
    if std < 0:
        raise ValueError(f"std must be non-negative, got {std}")
    if rng is None:
        raise ValueError("randn needs an explicit rng")
    z = rng.standard_normal(shape, dtype=DTYPE)
    return z * std + mean


def reduce_stats(x: np.ndarray, axes: int | Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
    """Mean and biased (divisor m) variance over ``axes``."""
    x = as_tensor(x)
    axes = (axes,) if isinstance(axes, int) else tuple(axes)
    for a in axes:
        if not -x.ndim <= a < x.ndim:
            raise ValueError(f"axis {a} out of range for shape {x.shape}")
    m = int(np.prod([x.shape[a] for a in axes]))
    if m == 0:
        raise ValueError("cannot reduce over an empty extent")
    mean = x.mean(axis=axes)
    var = ((x - np.expand_dims(mean, axes)) ** 2).mean(axis=axes)
    return mean, var


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = as_tensor(a)
    b = as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"inner dimensions differ: {a.shape} x {b.shape}")
    return a @ b


def check_finite(x: np.ndarray, where: str = "tensor") -> np.ndarray:
    """Raise ``FloatingPointError`` if ``x`` holds NaN or Inf."""
    if not np.all(np.isfinite(x)):
        raise FloatingPointError(f"non-finite values in {where}")
    return x
