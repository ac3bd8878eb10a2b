"""Executor-parameterized ``copy`` and ``transform`` over vector iterators.

Work always follows the destination's partition: every chunk of block ``i``
of the destination is submitted to the executor serving ``targets[i]``.

``copy`` picks its path from the memory spaces of source and destination:

* same space, plain numeric data: bulk ``copyto`` per chunk;
* host and device: staged transfer enqueued on the device queue;
* anything else (e.g. object elements): per-index ``bulk_execute``.
"""

from dataclasses import dataclass, replace
from typing import Any

import numpy as np

from .execution import Shape, derive_missing
from .placement import plan_shape


@dataclass(frozen=True)
class ExecutionPolicy:
    mode: str
    executor: Any = None

    def __post_init__(self):
        if self.mode not in ("sequential", "parallel"):
            raise ValueError(f"unknown execution mode {self.mode!r}")

    def on(self, executor):
        return replace(self, executor=executor)

    def __repr__(self):
        name = "seq" if self.mode == "sequential" else "par"
        return name if self.executor is None else f"{name}.on({self.executor!r})"


seq = ExecutionPolicy("sequential")
par = ExecutionPolicy("parallel")


def policy_on(base, executor):
    return base.on(executor)


def _executor_for(policy, vec):
    if policy.executor is not None:
        return derive_missing(policy.executor)
    return vec.executor


def _run(policy, dst, start, stop, kernel):
    """Run ``kernel(lo, hi)`` over destination positions ``[start, stop)``."""
    if stop <= start:
        return
    ex = _executor_for(policy, dst)
    shape = plan_shape(ex, dst.partition, start, stop)
    if policy.mode == "sequential":
        # one range at a time, in order, still on the owning block's target
        for r in shape:
            ex.bulk_async_execute_ranges(kernel, Shape([r])).result()
        return
    ex.bulk_async_execute_ranges(kernel, shape).result()


def _check_range(first, last, d_first):
    if last.owner is not first.owner:
        raise ValueError("first and last belong to different vectors")
    n = last - first
    if n < 0:
        raise ValueError("last precedes first")
    if d_first.position + n > len(d_first.owner):
        raise ValueError(
            f"destination has {len(d_first.owner) - d_first.position} slots, need {n}"
        )
    return n


def _check_overlap(src_first, n, d_first):
    if __debug__ and n and src_first.owner is d_first.owner:
        s, d = src_first.position, d_first.position
        if s != d and s < d + n and d < s + n:
            raise ValueError("overlapping source and destination ranges")


def _contiguous(vec):
    return vec.dtype != object


def copy(policy, first, last, d_first):
    """Copy ``[first, last)`` to ``d_first``; returns the destination end."""
    n = _check_range(first, last, d_first)
    src, dst = first.owner, d_first.owner
    if src.dtype != dst.dtype:
        raise TypeError(f"element types differ: {src.dtype} vs {dst.dtype}")
    _check_overlap(first, n, d_first)
    if n == 0:
        return d_first
    if src.memory_space != dst.memory_space:
        _staged_copy(first, n, d_first)
    elif _contiguous(src) and _contiguous(dst):
        _bulk_copy(policy, first, n, d_first)
    else:
        _elementwise_copy(policy, first, n, d_first)
    return d_first + n


def _bulk_copy(policy, first, n, d_first):
    src, dst = first.owner, d_first.owner
    delta = first.position - d_first.position

    def kernel(lo, hi):
        np.copyto(dst.local_view(lo, hi), src.local_view(lo + delta, hi + delta))
    _run(policy, dst, d_first.position, d_first.position + n, kernel)


def _elementwise_copy(policy, first, n, d_first):
    src, dst = first.owner, d_first.owner
    s0, d0 = first.position, d_first.position
    ex = _executor_for(policy, dst)
    shape = plan_shape(ex, dst.partition, d0, d0 + n)

    def assign(j):
        dst.local_view(j, j + 1)[0] = src.local_view(j - d0 + s0, j - d0 + s0 + 1)[0]
    if policy.mode == "sequential":
        for r in shape:
            ex.bulk_execute(assign, Shape([r]))
    else:
        ex.bulk_execute(assign, shape)


def _staged_copy(first, n, d_first):
    """Host <-> device transfer as queue operations on the device side."""
    src, dst = first.owner, d_first.owner
    s0, d0 = first.position, d_first.position
    if src.is_device and dst.is_device:
        # different devices: bounce through a host staging buffer
        stage = np.empty(n, dtype=src.dtype)
        src.buffer.device.copy_from_device(src.queue_id, src.buffer.base, s0, stage).result()
        dst.buffer.device.copy_to_device(dst.queue_id, dst.buffer.base, d0, stage).result()
    elif dst.is_device:
        host = src.buffer.host[s0:s0 + n]
        dst.buffer.device.copy_to_device(dst.queue_id, dst.buffer.base, d0, host).result()
    else:
        host = dst.buffer.host[d0:d0 + n]
        src.buffer.device.copy_from_device(src.queue_id, src.buffer.base, s0, host).result()


def _same_space(*vecs):
    spaces = {v.memory_space for v in vecs}
    if len(spaces) != 1:
        raise ValueError("transform operands live in different memory spaces; copy them first")


def transform(policy, first, last, d_first, f, *, vectorized=False):
    """``dst[i] = f(src[i])``; returns the destination end.

    With ``vectorized=True``, ``f`` receives whole chunks as numpy arrays
    and must return an array (or scalar) of the chunk's shape.
    """
    n = _check_range(first, last, d_first)
    src, dst = first.owner, d_first.owner
    _same_space(src, dst)
    delta = first.position - d_first.position

    if vectorized:
        def kernel(lo, hi):
            dst.local_view(lo, hi)[...] = f(src.local_view(lo + delta, hi + delta))
    else:
        def kernel(lo, hi):
            out = dst.local_view(lo, hi)
            inp = src.local_view(lo + delta, hi + delta)
            for k in range(hi - lo):
                out[k] = f(inp[k])
    _run(policy, dst, d_first.position, d_first.position + n, kernel)
    return d_first + n


def transform_binary(policy, first1, last1, first2, d_first, f, *, vectorized=False):
    """``dst[i] = f(src1[i], src2[i])``; returns the destination end."""
    n = _check_range(first1, last1, d_first)
    src1, src2, dst = first1.owner, first2.owner, d_first.owner
    if first2.position + n > len(src2):
        raise ValueError("second source is shorter than the first")
    _same_space(src1, src2, dst)
    d1 = first1.position - d_first.position
    d2 = first2.position - d_first.position

    if vectorized:
        def kernel(lo, hi):
            dst.local_view(lo, hi)[...] = f(src1.local_view(lo + d1, hi + d1),
                                            src2.local_view(lo + d2, hi + d2))
    else:
        def kernel(lo, hi):
            out = dst.local_view(lo, hi)
            a = src1.local_view(lo + d1, hi + d1)
            b = src2.local_view(lo + d2, hi + d2)
            for k in range(hi - lo):
                out[k] = f(a[k], b[k])
    _run(policy, dst, d_first.position, d_first.position + n, kernel)
    return d_first + n


__all__ = [
    "ExecutionPolicy", "seq", "par", "policy_on",
    "copy", "transform", "transform_binary",
]
