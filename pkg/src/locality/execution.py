"""Target-bound executors.

An executor only has to provide ``async_execute(f, *args) -> Future``.
:class:`Executor` derives the synchronous, fire-and-forget and bulk forms
from it; concrete executors override whichever of those they can do
better. Duck-typed objects that only offer ``async_execute`` are lifted with
:func:`derive_missing`.

Futures are :class:`concurrent.futures.Future`, which already enforces a
single pending -> finished transition.
"""

import itertools
import logging
import os
import threading
from concurrent.futures import Future, ThreadPoolExecutor, wait
from dataclasses import dataclass
from typing import Optional, Tuple

from .topology import format_cpulist

logger = logging.getLogger(__name__)

RECORD_ENV = "LOCALITY_RECORD"

_tls = threading.local()


class RejectedSubmission(RuntimeError):
    """Work was submitted to an executor that has been shut down."""


def current_affinity():
    """Logical affinity set of the calling worker thread, or None.

    Inside a pinned worker this is the set actually applied by the OS
    (read back after pinning), or the target cpuset for virtual pinning.
    """
    return getattr(_tls, "affinity", None)


def pinning_mode():
    """``"os"``, ``"virtual"`` or None for threads we did not start."""
    return getattr(_tls, "pinning", None)


def _pin_current_thread(target):
    os_cpus = target.os_cpus
    if os_cpus is not None and hasattr(os, "sched_setaffinity"):
        try:
            os.sched_setaffinity(0, os_cpus)
            _tls.affinity = target.logical_of(os.sched_getaffinity(0))
            _tls.pinning = "os"
            return
        except OSError as exc:
            logger.warning("could not pin to %s: %s", sorted(os_cpus), exc)
    _tls.affinity = target.cpuset
    _tls.pinning = "virtual"


# -- recording scheduler ---------------------------------------------------

@dataclass(frozen=True)
class TaskRecord:
    executor: str
    target: object
    span: Optional[Tuple[int, int]]
    block: Optional[int]
    thread_id: int
    thread_name: str
    affinity: Optional[frozenset]


class Recorder:
    """Collects one :class:`TaskRecord` per executed work item when enabled.

    Enabled at import when ``LOCALITY_RECORD`` is set to a non-empty value
    other than ``0``; use as a context manager to record a region.
    """

    def __init__(self, enabled=False):
        self.enabled = enabled
        self._records = []
        self._lock = threading.Lock()

    def log(self, executor, target, span=None, block=None):
        thread = threading.current_thread()
        rec = TaskRecord(executor, target, span, block, thread.ident, thread.name, current_affinity())
        with self._lock:
            self._records.append(rec)

    def records(self):
        with self._lock:
            return list(self._records)

    def clear(self):
        with self._lock:
            self._records.clear()

    def __enter__(self):
        self.clear()
        self._was_enabled = self.enabled
        self.enabled = True
        return self

    def __exit__(self, *exc):
        self.enabled = self._was_enabled
        return False


recorder = Recorder(os.environ.get(RECORD_ENV, "") not in ("", "0"))


# -- error hook for fire-and-forget ---------------------------------------

def _log_error(exc):
    logger.error("unhandled error in apply_execute task", exc_info=exc)


_error_hook = _log_error


def set_error_hook(hook):
    """Install ``hook(exc)`` for errors raised by fire-and-forget tasks.

    Returns the previous hook. ``None`` restores the logging default.
    """
    global _error_hook
    previous = _error_hook
    _error_hook = hook if hook is not None else _log_error
    return previous


def _report_failure(fut):
    if fut.cancelled():
        return
    exc = fut.exception()
    if exc is not None:
        try:
            _error_hook(exc)
        except Exception:
            logger.exception("error hook failed")


# -- shapes ----------------------------------------------------------------

@dataclass(frozen=True)
class IndexRange:
    begin: int
    end: int
    block: Optional[int] = None

    def __post_init__(self):
        if self.begin < 0 or self.end < self.begin:
            raise ValueError(f"invalid range [{self.begin}, {self.end})")

    def __len__(self):
        return self.end - self.begin


class Shape:
    """A set of non-overlapping half-open index ranges, kept in index order."""

    def __init__(self, ranges=()):
        rs = []
        for r in ranges:
            if not isinstance(r, IndexRange):
                r = IndexRange(*r)
            rs.append(r)
        rs.sort(key=lambda r: (r.begin, r.end))
        prev_end = None
        for r in rs:
            if len(r) == 0:
                continue
            if prev_end is not None and r.begin < prev_end:
                raise ValueError(f"overlapping ranges at index {r.begin}")
            prev_end = r.end
        self.ranges = tuple(rs)

    @classmethod
    def of(cls, n):
        return cls([IndexRange(0, n)]) if n else cls()

    @classmethod
    def from_partition(cls, partition, chunks=1, base=0):
        """Ranges following ``partition``'s blocks, each split into chunks.

        ``chunks`` is one count for all blocks or a per-block sequence.
        Each range is tagged with its block index.
        """
        if isinstance(chunks, int):
            chunks = [chunks] * len(partition.blocks)
        ranges = []
        for i, (blk, k) in enumerate(zip(partition.blocks, chunks)):
            for lo, hi in split_evenly(blk.offset, blk.length, max(1, k)):
                ranges.append(IndexRange(base + lo, base + hi, i))
        return cls(ranges)

    @property
    def size(self):
        return sum(len(r) for r in self.ranges)

    def indices(self):
        for r in self.ranges:
            yield from range(r.begin, r.end)

    def __len__(self):
        return len(self.ranges)

    def __iter__(self):
        return iter(self.ranges)

    def __repr__(self):
        return f"Shape({[(r.begin, r.end, r.block) for r in self.ranges]})"


def split_evenly(offset, length, k):
    """Split ``[offset, offset+length)`` into at most ``k`` non-empty ranges."""
    k = min(k, length)
    if k <= 0:
        return []
    q, r = divmod(length, k)
    out = []
    lo = offset
    for i in range(k):
        hi = lo + q + (1 if i < r else 0)
        out.append((lo, hi))
        lo = hi
    return out


class _Skipped(Exception):
    pass


def _bulk_ranges(submit, f, shape, args):
    """Run ``f(begin, end, *args)`` once per range; future of per-range results.

    ``submit(task, rng)`` must return a future for ``task()``. On the first
    error, ranges that have not started are skipped; the returned future
    settles (with that error) only after every submitted range is finished.
    """
    out = Future()
    out.set_running_or_notify_cancel()
    ranges = list(shape)
    if not ranges:
        out.set_result([])
        return out
    results = [None] * len(ranges)
    state = {"remaining": len(ranges), "error": None}
    lock = threading.Lock()
    failed = threading.Event()

    def make_task(rng):
        def task():
            if failed.is_set():
                raise _Skipped()
            return f(rng.begin, rng.end, *args)
        return task

    def on_done(k, fut):
        exc = fut.exception() if not fut.cancelled() else _Skipped()
        with lock:
            if exc is None:
                results[k] = fut.result()
            elif not isinstance(exc, _Skipped) and state["error"] is None:
                state["error"] = exc
                failed.set()
            state["remaining"] -= 1
            last = state["remaining"] == 0
        if last:
            if state["error"] is not None:
                out.set_exception(state["error"])
            else:
                out.set_result(results)

    for k, rng in enumerate(ranges):
        try:
            fut = submit(make_task(rng), rng)
        except Exception as exc:
            fut = Future()
            fut.set_exception(exc)
        fut.add_done_callback(lambda fut, k=k: on_done(k, fut))
    return out


def _flatten(fut):
    out = Future()
    out.set_running_or_notify_cancel()

    def done(inner):
        exc = inner.exception()
        if exc is not None:
            out.set_exception(exc)
        else:
            out.set_result([x for chunk in inner.result() for x in chunk])

    fut.add_done_callback(done)
    return out


def _per_index(f):
    def run_range(begin, end, *args):
        return [f(i, *args) for i in range(begin, end)]
    return run_range


class Executor:
    """Executor with every operation derived from :meth:`async_execute`."""

    def async_execute(self, f, *args):
        raise NotImplementedError

    def execute(self, f, *args):
        return self.async_execute(f, *args).result()

    def apply_execute(self, f, *args):
        self.async_execute(f, *args).add_done_callback(_report_failure)

    def bulk_async_execute_ranges(self, f, shape, *args):
        """Call ``f(begin, end, *args)`` once per range of ``shape``.

        This is the work-item granularity used by the algorithms; the
        per-index forms below are built on it.
        """
        return _bulk_ranges(lambda task, rng: self.async_execute(task), f, shape, args)

    def bulk_async_execute(self, f, shape, *args):
        return _flatten(self.bulk_async_execute_ranges(_per_index(f), shape, *args))

    def bulk_execute(self, f, shape, *args):
        return self.bulk_async_execute(f, shape, *args).result()


_DERIVED = ("execute", "apply_execute", "bulk_async_execute_ranges",
            "bulk_async_execute", "bulk_execute")


class _Derived(Executor):
    def __init__(self, inner):
        self._inner = inner
        for name in _DERIVED:
            own = getattr(inner, name, None)
            if own is not None:
                setattr(self, name, own)

    def async_execute(self, f, *args):
        return self._inner.async_execute(f, *args)

    def __getattr__(self, name):
        return getattr(self._inner, name)


def derive_missing(executor):
    """Return ``executor`` with the full interface, filling gaps by derivation."""
    if isinstance(executor, Executor):
        return executor
    if not callable(getattr(executor, "async_execute", None)):
        raise TypeError(f"{type(executor).__name__} has no async_execute")
    return _Derived(executor)


def async_execute(executor, f, *args):
    return derive_missing(executor).async_execute(f, *args)


def execute(executor, f, *args):
    return derive_missing(executor).execute(f, *args)


def apply_execute(executor, f, *args):
    derive_missing(executor).apply_execute(f, *args)


def bulk_async_execute(executor, f, shape, *args):
    return derive_missing(executor).bulk_async_execute(f, shape, *args)


def bulk_execute(executor, f, shape, *args):
    return derive_missing(executor).bulk_execute(f, shape, *args)


def _rejected(what):
    fut = Future()
    fut.set_exception(RejectedSubmission(f"{what} is shut down"))
    return fut


_names = itertools.count()


class HostExecutor(Executor):
    """Thread pool whose workers are pinned to ``target.cpuset``.

    ``workers`` defaults to one thread per processing unit. Pinning uses
    ``sched_setaffinity`` for probed targets and is virtual for mock ones.
    """

    def __init__(self, target, workers=None, record=False, name=None):
        self.target = target
        self.workers = workers or len(target.cpuset)
        self.name = name or f"host{next(_names)}[{format_cpulist(target.cpuset)}]"
        self.record = record
        self._pool = ThreadPoolExecutor(
            self.workers, thread_name_prefix=self.name,
            initializer=_pin_current_thread, initargs=(target,),
        )
        self._lock = threading.Lock()
        self._pending = set()
        self._closed = False

    def __repr__(self):
        return f"HostExecutor({self.target!r}, workers={self.workers})"

    @property
    def targets(self):
        return [self.target]

    def workers_for(self, target):
        return self.workers

    def _run(self, f, args, span, block):
        if self.record or recorder.enabled:
            recorder.log(self.name, self.target, span, block)
        return f(*args)

    def _submit(self, f, args, span=None, block=None):
        with self._lock:
            if self._closed:
                return _rejected(self.name)
            fut = self._pool.submit(self._run, f, args, span, block)
            self._pending.add(fut)
        fut.add_done_callback(self._forget)
        return fut

    def _forget(self, fut):
        with self._lock:
            self._pending.discard(fut)

    def async_execute(self, f, *args):
        return self._submit(f, args)

    def execute(self, f, *args):
        # already on one of our units: run inline instead of a round trip
        aff = current_affinity()
        if aff is not None and aff <= self.target.cpuset and not self._closed:
            return self._run(f, args, None, None)
        return self.async_execute(f, *args).result()

    def bulk_async_execute_ranges(self, f, shape, *args):
        def submit(task, rng):
            return self._submit(task, (), (rng.begin, rng.end), rng.block)
        return _bulk_ranges(submit, f, shape, args)

    def drain(self):
        """Block until every task submitted so far has finished."""
        while True:
            with self._lock:
                pending = list(self._pending)
            if not pending:
                return
            wait(pending)

    def shutdown(self, wait=True):
        with self._lock:
            self._closed = True
        if wait:
            self.drain()
        self._pool.shutdown(wait=wait)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.shutdown()
        return False


class BlockExecutor(Executor):
    """One :class:`HostExecutor` per target; block ``i`` runs on ``targets[i]``.

    Ranges tagged with a block index go to that block's executor. Untagged
    shapes are first split with the same block scheme the allocator uses,
    over the shape's index span.
    """

    def __init__(self, targets, workers=None, record=False):
        targets = list(targets)
        if not targets:
            raise ValueError("BlockExecutor needs at least one target")
        self.executors = [HostExecutor(t, workers, record) for t in targets]
        self._rr = itertools.count()

    def __repr__(self):
        return f"BlockExecutor({self.targets!r})"

    @property
    def targets(self):
        return [e.target for e in self.executors]

    def workers_for(self, target):
        for e in self.executors:
            if e.target == target:
                return e.workers
        return 1

    def async_execute(self, f, *args):
        k = next(self._rr) % len(self.executors)
        return self.executors[k].async_execute(f, *args)

    def execute(self, f, *args):
        aff = current_affinity()
        for e in self.executors:
            if aff is not None and aff <= e.target.cpuset:
                return e.execute(f, *args)
        return self.async_execute(f, *args).result()

    def assign_blocks(self, shape):
        """Tag every range of ``shape`` with the block that should run it."""
        from .placement import partition_block

        ranges = list(shape)
        if all(r.block is not None for r in ranges):
            for r in ranges:
                if not 0 <= r.block < len(self.executors):
                    raise ValueError(f"range tagged with unknown block {r.block}")
            return shape
        lo = min(r.begin for r in ranges)
        hi = max(r.end for r in ranges)
        part = partition_block(hi - lo, self.targets)
        tagged = []
        for r in ranges:
            if r.block is not None:
                tagged.append(r)
                continue
            for i, blk in enumerate(part.blocks):
                b = max(r.begin, lo + blk.offset)
                e = min(r.end, lo + blk.offset + blk.length)
                if b < e:
                    tagged.append(IndexRange(b, e, i))
        return Shape(tagged)

    def bulk_async_execute_ranges(self, f, shape, *args):
        if len(shape) == 0:
            return _bulk_ranges(None, f, shape, args)
        shape = self.assign_blocks(shape)

        def submit(task, rng):
            return self.executors[rng.block]._submit(task, (), (rng.begin, rng.end), rng.block)
        return _bulk_ranges(submit, f, shape, args)

    def drain(self):
        for e in self.executors:
            e.drain()

    def shutdown(self, wait=True):
        for e in self.executors:
            e.shutdown(wait)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.shutdown()
        return False


class DeviceExecutor(Executor):
    """Runs work on a mock device queue, in submission order.

    Bulk work is launched as a single queue operation, mirroring a kernel
    launch; completion is signalled by the queue's callback into the future.
    """

    def __init__(self, target, record=False):
        self.target = target
        self.device = target.device
        self.record = record
        self.name = f"dev{target.device_id}-q{target.queue_id}"
        self._closed = False

    def __repr__(self):
        return f"DeviceExecutor({self.target!r})"

    @property
    def targets(self):
        return [self.target]

    def workers_for(self, target):
        return 1

    def _launch(self, f, args, span=None, block=None):
        if self._closed:
            return _rejected(self.name)

        def op():
            if self.record or recorder.enabled:
                recorder.log(self.name, self.target, span, block)
            return f(*args)
        inner = self.device.submit(self.target.queue_id, op)
        out = Future()
        out.set_running_or_notify_cancel()

        def relay(fut):
            exc = fut.exception()
            if exc is not None:
                out.set_exception(exc)
            else:
                out.set_result(fut.result())
        inner.add_done_callback(relay)
        return out

    def async_execute(self, f, *args):
        return self._launch(f, args)

    def execute(self, f, *args):
        if self.device.on_queue_thread():
            return f(*args)
        return self.device.submit(self.target.queue_id, f, *args).result()

    def bulk_async_execute_ranges(self, f, shape, *args):
        ranges = list(shape)

        def kernel():
            return [f(r.begin, r.end, *args) for r in ranges]
        span = (ranges[0].begin, ranges[-1].end) if ranges else None
        return self._launch(kernel, (), span)

    def drain(self):
        self.device.submit(self.target.queue_id, lambda: None).result()

    def shutdown(self, wait=True):
        if wait and not self._closed:
            self.drain()
        self._closed = True

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.shutdown()
        return False


_shared = {}
_shared_lock = threading.Lock()


def shared_executor(targets):
    """Process-wide executor for a target list, created on first use."""
    targets = tuple(targets)
    # targets compare by cpuset/ids only; pinning and device identity matter here
    key = tuple((t, getattr(t, "os_ids", None), id(getattr(t, "device", None))) for t in targets)
    with _shared_lock:
        ex = _shared.get(key)
        if ex is None:
            if len(targets) == 1 and getattr(targets[0], "memory_space", "host") != "host":
                ex = DeviceExecutor(targets[0])
            else:
                ex = BlockExecutor(targets)
            _shared[key] = ex
        return ex
