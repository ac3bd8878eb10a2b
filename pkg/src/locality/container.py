"""A fixed-size vector whose storage comes from a :class:`TargetAllocator`."""

import numpy as np

from .placement import TargetAllocator


class ElementProxy:
    """Reference to one element; device elements go through the queue."""

    __slots__ = ("owner", "index")

    def __init__(self, owner, index):
        self.owner = owner
        self.index = index

    def get(self):
        v = self.owner
        buf = v.buffer
        if buf.device is not None:
            return buf.device.read(v.queue_id, buf.base, self.index).result()
        return buf.host[self.index].item() if v.dtype != object else buf.host[self.index]

    def set(self, value):
        v = self.owner
        buf = v.buffer
        if buf.device is not None:
            buf.device.write(v.queue_id, buf.base, self.index, value).result()
        else:
            buf.host[self.index] = value

    value = property(get, set)

    def __repr__(self):
        return f"ElementProxy({self.index}={self.get()!r})"


class VectorIterator:
    """Random-access position in a :class:`TargetVector`."""

    __slots__ = ("owner", "position")

    def __init__(self, owner, position):
        self.owner = owner
        self.position = position

    def __add__(self, k):
        return VectorIterator(self.owner, self.position + k)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, VectorIterator):
            self._check(other)
            return self.position - other.position
        return VectorIterator(self.owner, self.position - other)

    def _check(self, other):
        if other.owner is not self.owner:
            raise ValueError("iterators belong to different vectors")

    def __eq__(self, other):
        return (isinstance(other, VectorIterator) and other.owner is self.owner
                and other.position == self.position)

    def __hash__(self):
        return hash((id(self.owner), self.position))

    def __lt__(self, other):
        self._check(other)
        return self.position < other.position

    def __le__(self, other):
        self._check(other)
        return self.position <= other.position

    def deref(self):
        return self.owner.at(self.position)

    def get(self):
        return self.owner.at(self.position).get()

    @property
    def partition(self):
        return self.owner.partition

    def block(self):
        """Index of the partition block owning this position."""
        return self.owner.partition.owner_of(self.position)

    def target(self):
        return self.owner.partition.blocks[self.block()].target

    def __repr__(self):
        return f"VectorIterator(@{self.position})"


class TargetVector:
    """``n`` elements placed block-wise over the allocator's targets.

    Elements are built once with ``bulk_construct`` and destroyed by
    :meth:`release`. Size is fixed.
    """

    def __init__(self, n, allocator, init=None):
        if not isinstance(allocator, TargetAllocator):
            allocator = TargetAllocator(allocator)
        self.allocator = allocator
        self.buffer, self.partition = allocator.allocate(n)
        try:
            allocator.bulk_construct(self.buffer, self.partition, init)
        except BaseException:
            allocator.deallocate(self.buffer)
            raise

    @property
    def queue_id(self):
        return self.allocator.targets[0].queue_id

    @property
    def dtype(self):
        return self.allocator.dtype

    @property
    def memory_space(self):
        return self.allocator.memory_space

    @property
    def is_device(self):
        return self.allocator.is_device

    @property
    def executor(self):
        return self.allocator.executor

    def __len__(self):
        return self.buffer.length

    size = property(__len__)

    def at(self, i):
        if not 0 <= i < len(self):
            raise IndexError(f"index {i} out of range for vector of {len(self)}")
        return ElementProxy(self, i)

    def __getitem__(self, i):
        if i < 0:
            i += len(self)
        return self.at(i).get()

    def __setitem__(self, i, value):
        if i < 0:
            i += len(self)
        self.at(i).set(value)

    def begin(self):
        return VectorIterator(self, 0)

    def end(self):
        return VectorIterator(self, len(self))

    def __iter__(self):
        return iter(self.to_numpy().tolist())

    def to_numpy(self):
        """Copy of the contents; device data is staged through the queue."""
        buf = self.buffer
        if buf.device is None:
            return buf.host.copy()
        out = np.empty(len(self), dtype=self.dtype)
        if len(self):
            buf.device.copy_from_device(self.queue_id, buf.base, 0, out).result()
        return out

    def local_view(self, lo, hi):
        """Storage view ``[lo, hi)``. Device views only exist on a queue thread."""
        buf = self.buffer
        if buf.device is not None:
            return buf.device.deref(buf.base)[lo:hi]
        return buf.host[lo:hi]

    def release(self):
        if not self.buffer.freed:
            self.allocator.bulk_destroy(self.buffer, self.partition)
            self.allocator.deallocate(self.buffer)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.release()
        return False

    def __repr__(self):
        return f"TargetVector(n={len(self)}, dtype={self.dtype}, targets={self.allocator.targets!r})"


def make_vector(n, alloc, init=None):
    return TargetVector(n, alloc, init)
