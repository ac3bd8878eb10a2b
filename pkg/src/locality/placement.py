"""Target-bound allocation, block partitioning and bulk construction.

Host buffers are one contiguous numpy array. Pages are not touched at
allocation; :meth:`TargetAllocator.bulk_construct` writes block ``i`` from
threads pinned to ``targets[i]``, so first-touch places each block in its
target's memory. Blocks are element-aligned, not page-aligned.
"""

import bisect
import logging
import threading
from dataclasses import dataclass
from typing import Any, Tuple

import numpy as np

from .device import AllocationError
from .execution import IndexRange, Shape, shared_executor, split_evenly

logger = logging.getLogger(__name__)

#: work items per pinned worker when construction or algorithms split a block
CHUNKS_PER_WORKER = 4


@dataclass(frozen=True)
class Block:
    target: Any
    offset: int
    length: int

    @property
    def stop(self):
        return self.offset + self.length


@dataclass(frozen=True)
class Partition:
    blocks: Tuple[Block, ...]

    @property
    def size(self):
        return sum(b.length for b in self.blocks)

    @property
    def targets(self):
        return [b.target for b in self.blocks]

    def owner_of(self, index):
        """Index of the block holding element ``index``."""
        if not 0 <= index < self.size:
            raise IndexError(f"index {index} out of range for {self.size} elements")
        stops = [b.stop for b in self.blocks]
        return bisect.bisect_right(stops, index)


def partition_block(n, targets):
    """Split ``n`` elements over ``targets`` in contiguous, near-equal blocks.

    The first ``n % k`` blocks get one extra element; with fewer elements
    than targets the trailing blocks are empty.
    """
    targets = list(targets)
    if not targets:
        raise ValueError("partition needs at least one target")
    if n < 0:
        raise ValueError("element count must be non-negative")
    q, r = divmod(n, len(targets))
    blocks = []
    offset = 0
    for i, t in enumerate(targets):
        length = q + 1 if i < r else q
        blocks.append(Block(t, offset, length))
        offset += length
    return Partition(tuple(blocks))


class BufferHandle:
    """Storage for ``length`` elements owned by a :class:`TargetAllocator`.

    ``base`` is an opaque token (host address or arena address) that stays
    fixed until the buffer is deallocated. ``live`` counts constructed
    elements.
    """

    def __init__(self, base, length, dtype, host=None, device=None):
        self.base = base
        self.length = length
        self.dtype = np.dtype(dtype)
        self.host = host
        self.device = device
        self.live = 0
        self.freed = False
        self._lock = threading.Lock()

    @property
    def element_size(self):
        return self.dtype.itemsize

    @property
    def nbytes(self):
        return self.length * self.element_size

    def _count(self, delta):
        with self._lock:
            self.live += delta
        if self.device is not None:
            if delta > 0:
                self.device.note_constructed(self.base, delta)
            else:
                self.device.note_destroyed(self.base, -delta)

    def __repr__(self):
        return f"BufferHandle(base={self.base:#x}, length={self.length}, dtype={self.dtype})"


def _init_kind(init, n):
    if callable(init):
        return "generator"
    if np.ndim(init) == 0:
        return "value"
    if len(init) != n:
        raise ValueError(f"initializer has {len(init)} elements, expected {n}")
    return "sequence"


class TargetAllocator:
    """Allocates element buffers across a list of targets.

    Host targets may be combined; a device target must stand alone.
    ``executor`` runs construction work; by default a process-wide executor
    for the same targets is used, so construction and later algorithms can
    share pinned pools.
    """

    def __init__(self, targets, dtype=np.float64, executor=None):
        if not isinstance(targets, (list, tuple)):
            targets = [targets]
        targets = tuple(targets)
        if not targets:
            raise ValueError("allocator needs at least one target")
        spaces = {_space(t) for t in targets}
        if len(spaces) > 1 or (spaces != {"host"} and len(targets) > 1):
            raise ValueError("device targets cannot be mixed or combined in one allocator")
        self._targets = targets
        self.dtype = np.dtype(dtype)
        self._executor = executor

    def __repr__(self):
        return f"TargetAllocator({list(self._targets)!r}, dtype={self.dtype})"

    @property
    def targets(self):
        return list(self._targets)

    def target(self):
        return list(self._targets)

    @property
    def element_size(self):
        return self.dtype.itemsize

    @property
    def memory_space(self):
        return _space(self._targets[0])

    @property
    def is_device(self):
        return self.memory_space != "host"

    @property
    def executor(self):
        if self._executor is None:
            self._executor = shared_executor(self._targets)
        return self._executor

    def __eq__(self, other):
        return (isinstance(other, TargetAllocator) and self._targets == other._targets
                and self.dtype == other.dtype)

    def __hash__(self):
        return hash((self._targets, self.dtype))

    def allocate(self, n):
        if n < 0:
            raise ValueError("element count must be non-negative")
        part = partition_block(n, self._targets)
        nbytes = n * self.element_size
        if self.is_device:
            t = self._targets[0]
            addr = t.device.allocate(n, self.dtype, target=t)
            return BufferHandle(addr, n, self.dtype, device=t.device), part
        try:
            arr = np.empty(n, dtype=self.dtype)
        except MemoryError:
            raise AllocationError(nbytes, list(self._targets)) from None
        return BufferHandle(arr.__array_interface__["data"][0], n, self.dtype, host=arr), part

    def deallocate(self, buf):
        if buf.freed:
            return
        buf.freed = True
        if buf.device is not None:
            buf.device.free(buf.base)
        buf.host = None

    def bulk_construct(self, buf, part, init=None):
        """Construct every element exactly once, each block on its own target.

        ``init`` is a value, a sequence of ``len(buf)`` values or a callable
        ``index -> value``. If construction fails, elements already built
        are destroyed before the error propagates.
        """
        if part.size != buf.length:
            raise ValueError("partition does not match buffer")
        if init is None:
            init = None if self.dtype == object else self.dtype.type(0)
        kind = _init_kind(init, buf.length)
        if buf.length == 0:
            return
        done = []
        done_lock = threading.Lock()

        def construct(lo, hi):
            view = _view(buf, lo, hi)
            if kind == "value":
                view[...] = init
            elif kind == "sequence":
                if self.dtype == object:
                    for k in range(lo, hi):
                        view[k - lo] = init[k]
                else:
                    view[...] = init[lo:hi]
            else:
                for k in range(lo, hi):
                    try:
                        view[k - lo] = init(k)
                    except BaseException:
                        _clear(view[:k - lo])
                        raise
            buf._count(hi - lo)
            with done_lock:
                done.append((lo, hi))

        ex = self.executor
        try:
            ex.bulk_async_execute_ranges(construct, plan_shape(self.executor, part)).result()
        except BaseException:
            self._destroy_ranges(buf, done)
            raise

    def _destroy_ranges(self, buf, ranges):
        if not ranges:
            return

        def destroy():
            for lo, hi in ranges:
                _clear(_view(buf, lo, hi))
                buf._count(-(hi - lo))
        try:
            if buf.device is not None:
                self.executor.execute(destroy)
            else:
                destroy()
        except Exception:
            logger.exception("cleanup after failed construction raised")

    def bulk_destroy(self, buf, part):
        """Destroy every constructed element; never raises."""
        if buf.length == 0 or buf.freed:
            return

        def destroy(lo, hi):
            _clear(_view(buf, lo, hi))
            buf._count(-(hi - lo))
        try:
            self.executor.bulk_async_execute_ranges(destroy, plan_shape(self.executor, part)).result()
        except Exception:
            logger.exception("bulk_destroy failed")


def plan_shape(executor, partition, start=0, stop=None):
    """Work shape for elements ``[start, stop)`` laid out by ``partition``.

    Each block is clipped to the window and split into
    ``CHUNKS_PER_WORKER`` ranges per worker of the executor serving its
    target. Ranges are tagged with that target's position in
    ``executor.targets`` when every block target is served there; otherwise
    they are left untagged for the executor to place.
    """
    if stop is None:
        stop = partition.size
    ex_targets = list(getattr(executor, "targets", []))
    tagged = all(b.target in ex_targets for b in partition.blocks)
    ranges = []
    for blk in partition.blocks:
        lo, hi = max(blk.offset, start), min(blk.stop, stop)
        if lo >= hi:
            continue
        k = CHUNKS_PER_WORKER * _workers(executor, blk.target)
        tag = ex_targets.index(blk.target) if tagged else None
        for b, e in split_evenly(lo, hi - lo, k):
            ranges.append(IndexRange(b, e, tag))
    return Shape(ranges)


def _space(target):
    return getattr(target, "memory_space", "host")


def _workers(executor, target):
    fn = getattr(executor, "workers_for", None)
    return fn(target) if fn is not None else 1


def _view(buf, lo, hi):
    if buf.device is not None:
        return buf.device.deref(buf.base)[lo:hi]
    return buf.host[lo:hi]


def _clear(view):
    # only object arrays hold references that need releasing
    if view.dtype == object:
        view[...] = None


def target_of(alloc):
    return alloc.target()

