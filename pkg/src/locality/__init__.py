"""Locality-aware parallel runtime: targets, target-bound allocators and
executors, parallel copy/transform, a target-aware vector and STREAM."""

from .algorithms import ExecutionPolicy, copy, par, policy_on, seq, transform, transform_binary
from .container import ElementProxy, TargetVector, VectorIterator, make_vector
from .device import AllocationError, DeviceAccessError, MockDevice
from .execution import (
    BlockExecutor,
    DeviceExecutor,
    Executor,
    HostExecutor,
    IndexRange,
    RejectedSubmission,
    Shape,
    apply_execute,
    async_execute,
    bulk_async_execute,
    bulk_execute,
    current_affinity,
    derive_missing,
    execute,
    recorder,
    set_error_hook,
)
from .placement import BufferHandle, Partition, TargetAllocator, partition_block, target_of
from .topology import (
    ConfigError,
    DeviceTarget,
    HostTarget,
    InvalidTargetError,
    Topology,
    TopologyConfig,
    get_numa_domains,
    get_targets,
    load_mock_topology,
    make_device_target,
    probe_topology,
    restrict_target,
)

__version__ = "0.1.0"
