"""Places in a machine: processing units, NUMA domains and device targets.

Processing units carry a dense logical index ``0..N-1`` numbered domain by
domain. Probed topologies also remember the OS cpu id behind each logical
index so executors can pin for real; mock topologies pin virtually.

Mock topologies come from a small line-oriented config::

    # two sockets, six cores each
    domain 0: 0-5
    domain 1: 6-11
    device 0: capacity 1048576

Unit lists use the Linux cpulist syntax (``0-3,8,10-11``). Blank lines and
``#`` comments are ignored. :meth:`TopologyConfig.dumps` writes the same
format back, so parse/dump round-trips.
"""

import glob
import logging
import os
import re
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, Mapping, Optional, Tuple

from .device import MockDevice

logger = logging.getLogger(__name__)

CpuSet = FrozenSet[int]


class ConfigError(ValueError):
    """Malformed or inconsistent topology configuration."""


class InvalidTargetError(ValueError):
    """A target cannot be built from the requested units or device."""


def parse_cpulist(text):
    """Parse ``"0-3,8"`` into ``frozenset({0, 1, 2, 3, 8})``."""
    units = set()
    text = text.strip()
    if not text:
        return frozenset()
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if "-" in part:
            lo, hi = part.split("-", 1)
            lo, hi = int(lo), int(hi)
            if hi < lo:
                raise ValueError(f"descending range {part!r}")
            units.update(range(lo, hi + 1))
        else:
            units.add(int(part))
    if any(u < 0 for u in units):
        raise ValueError("unit ids must be non-negative")
    return frozenset(units)


def format_cpulist(units):
    """Inverse of :func:`parse_cpulist`, collapsing runs into ranges."""
    units = sorted(units)
    parts = []
    i = 0
    while i < len(units):
        j = i
        while j + 1 < len(units) and units[j + 1] == units[j] + 1:
            j += 1
        parts.append(str(units[i]) if i == j else f"{units[i]}-{units[j]}")
        i = j + 1
    return ",".join(parts)


@dataclass(frozen=True)
class HostTarget:
    """A set of processing units plus the memory local to them.

    Equality and hashing only consider ``cpuset``.
    """

    cpuset: CpuSet
    numa_node: Optional[int] = field(default=None, compare=False)
    # logical id -> OS cpu id; None for mock topologies (virtual pinning)
    os_ids: Optional[Tuple[Tuple[int, int], ...]] = field(default=None, compare=False, repr=False)

    memory_space = "host"

    def __post_init__(self):
        if not self.cpuset:
            raise InvalidTargetError("host target needs a non-empty cpuset")
        object.__setattr__(self, "cpuset", frozenset(self.cpuset))

    @property
    def os_cpus(self):
        if self.os_ids is None:
            return None
        return frozenset(os_id for _, os_id in self.os_ids)

    def logical_of(self, os_cpus):
        """Map a set of OS cpu ids back to this target's logical ids."""
        if self.os_ids is None:
            return frozenset(os_cpus)
        back = {os_id: lid for lid, os_id in self.os_ids}
        return frozenset(back.get(c, -1 - c) for c in os_cpus)

    def __repr__(self):
        node = "" if self.numa_node is None else f", node={self.numa_node}"
        return f"HostTarget({{{format_cpulist(self.cpuset)}}}{node})"


@dataclass(frozen=True)
class DeviceTarget:
    """A mock discrete-memory device plus one FIFO operation queue on it."""

    device_id: int
    queue_id: int
    device: MockDevice = field(compare=False, repr=False)

    @property
    def memory_space(self):
        return ("device", self.device_id)


@dataclass
class TopologyConfig:
    domains: Dict[int, Tuple[int, ...]] = field(default_factory=dict)
    devices: Dict[int, int] = field(default_factory=dict)

    _line = re.compile(r"^(domain|device)\s+(\d+)\s*:\s*(.*)$")

    @classmethod
    def uniform(cls, n_domains, units_per_domain, devices=None):
        """Config of ``n_domains`` equal domains with consecutive unit ids."""
        domains = {
            d: tuple(range(d * units_per_domain, (d + 1) * units_per_domain))
            for d in range(n_domains)
        }
        return cls(domains, dict(devices or {}))

    @classmethod
    def parse(cls, text):
        cfg = cls()
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            m = cls._line.match(line)
            if m is None:
                raise ConfigError(f"line {lineno}: cannot parse {raw.strip()!r}")
            kind, ident, rest = m.group(1), int(m.group(2)), m.group(3).strip()
            if kind == "domain":
                if ident in cfg.domains:
                    raise ConfigError(f"line {lineno}: domain {ident} declared twice")
                try:
                    units = parse_cpulist(rest)
                except ValueError as exc:
                    raise ConfigError(f"line {lineno}: domain {ident}: {exc}") from None
                cfg.domains[ident] = tuple(sorted(units))
            else:
                cm = re.fullmatch(r"capacity\s+(\d+)", rest)
                if cm is None:
                    raise ConfigError(f"line {lineno}: expected 'capacity <bytes>' for device {ident}")
                if ident in cfg.devices:
                    raise ConfigError(f"line {lineno}: device {ident} declared twice")
                cfg.devices[ident] = int(cm.group(1))
        return cfg

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.parse(fh.read())

    def dumps(self):
        lines = [f"domain {d}: {format_cpulist(u)}" for d, u in sorted(self.domains.items())]
        lines += [f"device {d}: capacity {c}" for d, c in sorted(self.devices.items())]
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class Topology:
    domains: Tuple[CpuSet, ...]
    domain_ids: Tuple[int, ...]
    source: str
    # logical id -> OS cpu id, probed topologies only
    os_ids: Optional[Tuple[int, ...]] = field(default=None, repr=False)
    devices: Mapping[int, MockDevice] = field(default_factory=dict, compare=False, repr=False)

    @property
    def processing_units(self):
        return tuple(sorted(u for d in self.domains for u in d))

    @property
    def num_units(self):
        return sum(len(d) for d in self.domains)

    def domain_of(self, units):
        """Return the domain id fully containing ``units``, else None."""
        units = frozenset(units)
        for node, dom in zip(self.domain_ids, self.domains):
            if units and units <= dom:
                return node
        return None

    def _os_pairs(self, units):
        if self.os_ids is None:
            return None
        return tuple((u, self.os_ids[u]) for u in sorted(units))

    def host_target(self, units):
        units = frozenset(units)
        bad = units - set(self.processing_units)
        if bad:
            raise InvalidTargetError(f"units {format_cpulist(bad)} not in topology")
        return HostTarget(units, self.domain_of(units), self._os_pairs(units))

    def with_devices(self, devices):
        """Copy of this topology with extra mock devices ``{id: capacity}``."""
        merged = dict(self.devices)
        for dev_id, capacity in devices.items():
            merged[dev_id] = MockDevice(dev_id, capacity)
        return Topology(self.domains, self.domain_ids, self.source, self.os_ids, merged)


def _read_numa_nodes():
    nodes = {}
    for path in glob.glob("/sys/devices/system/node/node[0-9]*/cpulist"):
        node = int(re.search(r"node(\d+)", path).group(1))
        with open(path) as fh:
            nodes[node] = parse_cpulist(fh.read())
    return nodes


def _schedulable_cpus():
    if hasattr(os, "sched_getaffinity"):
        return frozenset(os.sched_getaffinity(0))
    return frozenset(range(os.cpu_count() or 1))


def _from_os_groups(groups, node_ids):
    os_ids = []
    domains = []
    for group in groups:
        start = len(os_ids)
        os_ids.extend(sorted(group))
        domains.append(frozenset(range(start, len(os_ids))))
    return Topology(tuple(domains), tuple(node_ids), "probed", tuple(os_ids))


def probe_topology():
    """Discover hardware threads and NUMA domains of the running machine.

    Only threads in the process's affinity mask are reported. Anything that
    prevents reading NUMA information degrades to a single domain.
    """
    allowed = _schedulable_cpus()
    try:
        nodes = _read_numa_nodes()
    except (OSError, ValueError, AttributeError) as exc:
        logger.debug("NUMA probe failed: %s", exc)
        nodes = {}
    groups, ids = [], []
    for node in sorted(nodes):
        units = nodes[node] & allowed
        if units:
            groups.append(units)
            ids.append(node)
    covered = frozenset().union(*groups) if groups else frozenset()
    if covered != allowed:
        if nodes:
            logger.debug("NUMA nodes do not cover schedulable cpus, using one domain")
        groups, ids = [allowed], [0]
    return _from_os_groups(groups, ids)


def load_mock_topology(config):
    """Build a topology that mirrors ``config`` exactly (no pinning)."""
    if isinstance(config, str):
        config = TopologyConfig.parse(config)
    if not config.domains:
        raise ConfigError("topology needs at least one domain")
    owner = {}
    for dom_id, units in sorted(config.domains.items()):
        if not units:
            raise ConfigError(f"domain {dom_id} is empty")
        for u in units:
            if u in owner:
                raise ConfigError(f"unit {u} in multiple domains ({owner[u]}, {dom_id})")
            owner[u] = dom_id
    if sorted(owner) != list(range(len(owner))):
        raise ConfigError(f"unit ids must be dense 0..{len(owner) - 1}, got {format_cpulist(owner)}")
    ids = tuple(sorted(config.domains))
    domains = tuple(frozenset(config.domains[d]) for d in ids)
    devices = {d: MockDevice(d, cap) for d, cap in sorted(config.devices.items())}
    return Topology(domains, ids, "mock", None, devices)


def get_targets(topo):
    """One single-unit target per processing unit, by logical id."""
    return [topo.host_target({u}) for u in topo.processing_units]


def get_numa_domains(topo):
    return [topo.host_target(dom) for dom in topo.domains]


def restrict_target(target, units, topo=None):
    """Narrow ``target`` to ``target.cpuset & units``.

    The NUMA node survives when the result still lies in one domain; pass
    ``topo`` to resolve the node for targets that spanned several domains.
    """
    cpuset = target.cpuset & frozenset(units)
    if not cpuset:
        raise InvalidTargetError(
            f"no units of {format_cpulist(target.cpuset)} in {format_cpulist(units)}"
        )
    if topo is not None:
        node = topo.domain_of(cpuset)
    else:
        node = target.numa_node
    os_ids = None
    if target.os_ids is not None:
        os_ids = tuple(p for p in target.os_ids if p[0] in cpuset)
    return HostTarget(cpuset, node, os_ids)


def make_device_target(topo, device_id):
    """A target on mock device ``device_id`` with a fresh FIFO queue."""
    try:
        device = topo.devices[device_id]
    except KeyError:
        raise InvalidTargetError(f"device {device_id} is not configured") from None
    return DeviceTarget(device_id, device.new_queue(), device)
