"""In-process mock of a discrete-memory device.

A :class:`MockDevice` owns a fixed-capacity arena and any number of FIFO
operation queues. Arena storage can only be dereferenced from a thread that
belongs to one of the device's queues; host code reaches it by enqueueing
operations (staged reads, writes and copies) and waiting on the returned
futures.
"""

import itertools
import logging
import threading
from concurrent.futures import ThreadPoolExecutor

import numpy as np

logger = logging.getLogger(__name__)

_tls = threading.local()


class AllocationError(MemoryError):
    """Raised when a target cannot satisfy an allocation request."""

    def __init__(self, requested_bytes, target, reason=""):
        self.requested_bytes = requested_bytes
        self.target = target
        msg = f"cannot allocate {requested_bytes} bytes on {target!r}"
        if reason:
            msg += f": {reason}"
        super().__init__(msg)


class DeviceAccessError(RuntimeError):
    """Raised when host code touches device memory directly."""


def current_device():
    """Return ``(device_id, queue_id)`` if called from a device queue thread."""
    return getattr(_tls, "device", None)


class _Allocation:
    __slots__ = ("array", "nbytes", "live")

    def __init__(self, array, nbytes):
        self.array = array
        self.nbytes = nbytes
        self.live = 0


class MockDevice:
    def __init__(self, device_id, capacity):
        if capacity < 0:
            raise ValueError("device capacity must be non-negative")
        self.device_id = device_id
        self.capacity = capacity
        self._lock = threading.Lock()
        self._used = 0
        self._allocs = {}
        # address 0 is never handed out so a zero token stays recognisable
        self._next_addr = 64
        self._queue_ids = itertools.count()
        self._queues = {}

    def __repr__(self):
        return f"MockDevice(id={self.device_id}, capacity={self.capacity})"

    @property
    def used_bytes(self):
        return self._used

    @property
    def live_objects(self):
        with self._lock:
            return sum(a.live for a in self._allocs.values())

    # -- queues -----------------------------------------------------------

    def new_queue(self):
        qid = next(self._queue_ids)
        pool = ThreadPoolExecutor(
            max_workers=1,
            thread_name_prefix=f"dev{self.device_id}-q{qid}",
            initializer=self._enter_queue,
            initargs=(qid,),
        )
        with self._lock:
            self._queues[qid] = pool
        return qid

    def _enter_queue(self, qid):
        _tls.device = (self.device_id, qid)

    def submit(self, queue_id, fn, *args):
        """Enqueue ``fn(*args)``; operations on one queue run in order."""
        try:
            pool = self._queues[queue_id]
        except KeyError:
            raise ValueError(f"device {self.device_id} has no queue {queue_id}") from None
        return pool.submit(fn, *args)

    def on_queue_thread(self):
        dev = current_device()
        return dev is not None and dev[0] == self.device_id

    def shutdown(self):
        with self._lock:
            pools = list(self._queues.values())
        for pool in pools:
            pool.shutdown(wait=True)

    # -- arena ------------------------------------------------------------

    def allocate(self, count, dtype, target=None):
        dtype = np.dtype(dtype)
        nbytes = count * dtype.itemsize
        with self._lock:
            if self._used + nbytes > self.capacity:
                raise AllocationError(
                    nbytes, target if target is not None else self,
                    f"arena has {self.capacity - self._used} of {self.capacity} bytes free",
                )
            addr = self._next_addr
            # keep tokens distinct even for zero-byte requests
            self._next_addr += max(nbytes, 1) + (-max(nbytes, 1)) % 64
            self._used += nbytes
            self._allocs[addr] = _Allocation(None, nbytes)
        try:
            array = np.empty(count, dtype=dtype)
        except MemoryError:
            self.free(addr)
            raise AllocationError(nbytes, target if target is not None else self) from None
        self._allocs[addr].array = array
        return addr

    def free(self, addr):
        with self._lock:
            alloc = self._allocs.pop(addr, None)
            if alloc is not None:
                self._used -= alloc.nbytes

    def deref(self, addr):
        """Return the arena array at ``addr``; only legal on a queue thread."""
        if not self.on_queue_thread():
            raise DeviceAccessError(
                f"device {self.device_id} memory is not host-addressable; "
                "enqueue an operation instead"
            )
        return self._allocs[addr].array

    def note_constructed(self, addr, count):
        with self._lock:
            self._allocs[addr].live += count

    def note_destroyed(self, addr, count):
        with self._lock:
            alloc = self._allocs.get(addr)
            if alloc is not None:
                alloc.live -= count

    # -- staged transfers -------------------------------------------------

    def read(self, queue_id, addr, index):
        return self.submit(queue_id, lambda: self.deref(addr)[index].item())

    def write(self, queue_id, addr, index, value):
        def op():
            self.deref(addr)[index] = value
        return self.submit(queue_id, op)

    def copy_to_device(self, queue_id, addr, offset, host_array):
        def op():
            dst = self.deref(addr)
            np.copyto(dst[offset:offset + len(host_array)], host_array)
        return self.submit(queue_id, op)

    def copy_from_device(self, queue_id, addr, offset, host_array):
        def op():
            src = self.deref(addr)
            np.copyto(host_array, src[offset:offset + len(host_array)])
        return self.submit(queue_id, op)
