"""STREAM (Copy, Scale, Add, Triad) over target-placed vectors.

The abstraction path runs the four kernels through :mod:`locality.algorithms`
on vectors built from one target list, executed by an executor over the same
targets. The baseline runs the same numpy expressions from plain pinned
threads over plain arrays, with a static schedule and the same strip size,
so the difference between the two is the cost of the abstraction.
"""

import logging
import math
import os
import statistics
import threading
import time
from dataclasses import asdict, dataclass, field
from typing import List, Optional

import numpy as np

from . import algorithms as alg
from .container import TargetVector
from .execution import BlockExecutor, DeviceExecutor
from .placement import CHUNKS_PER_WORKER, TargetAllocator, partition_block
from .topology import get_numa_domains, get_targets, make_device_target, probe_topology

logger = logging.getLogger(__name__)

SCALAR = 3.0
KERNELS = ("Copy", "Scale", "Add", "Triad")
ARRAYS_PER_KERNEL = {"Copy": 2, "Scale": 2, "Add": 3, "Triad": 3}
INITIAL = (1.0, 2.0, 0.0)
TOLERANCE = 1e-8
ELEMENT_BYTES = 8
MB = 1e6


class StreamError(ValueError):
    pass


def elements_for(size_mb):
    return max(1, int(round(size_mb * MB / ELEMENT_BYTES)))


@dataclass
class BenchConfig:
    array_size_mb: float = 100.0
    iterations: int = 10
    target_kind: str = "numa"
    compare_baseline: bool = False
    output: str = "human"
    repetitions: int = 1
    # fault injection: Triad uses this instead of SCALAR, validation does not
    triad_scalar: Optional[float] = None

    def __post_init__(self):
        if self.iterations < 1:
            raise StreamError("iterations must be >= 1")
        if not self.array_size_mb > 0:
            raise StreamError("array size must be positive")
        if self.target_kind not in ("numa", "cores", "device"):
            raise StreamError(f"unknown target kind {self.target_kind!r}")
        if self.repetitions < 1:
            raise StreamError("repetitions must be >= 1")

    @property
    def n(self):
        return elements_for(self.array_size_mb)


@dataclass
class KernelStats:
    kernel: str
    bytes_moved: int
    times: List[float] = field(default_factory=list)
    # mean bandwidth of each repetition, for median-of-k comparisons
    rep_avg_mbps: List[float] = field(default_factory=list)

    @property
    def min_time(self):
        return min(self.times)

    @property
    def avg_time(self):
        return sum(self.times) / len(self.times)

    @property
    def max_time(self):
        return max(self.times)

    def _mbps(self, t):
        return self.bytes_moved / MB / t if t > 0 else math.inf

    @property
    def best_mbps(self):
        return self._mbps(self.min_time)

    @property
    def avg_mbps(self):
        return self._mbps(self.avg_time)

    @property
    def worst_mbps(self):
        return self._mbps(self.max_time)

    @property
    def median_avg_mbps(self):
        return statistics.median(self.rep_avg_mbps) if self.rep_avg_mbps else self.avg_mbps

    def merge(self, other):
        self.times.extend(other.times)
        self.rep_avg_mbps.append(other.avg_mbps)


def kernel_bytes(kernel, n):
    return ARRAYS_PER_KERNEL[kernel] * n * ELEMENT_BYTES


def _new_stats(n):
    return {k: KernelStats(k, kernel_bytes(k, n)) for k in KERNELS}


def _record(stats, times, iterations):
    # first iteration is warm-up unless it is the only one
    skip = 1 if iterations > 1 else 0
    for k in KERNELS:
        stats[k].times.extend(times[k][skip:])


# -- oracle -----------------------------------------------------------------

def expected_values(iterations, scalar=SCALAR):
    """Scalar (a, b, c) after ``iterations`` passes of the kernel recurrence."""
    a, b, c = INITIAL
    for _ in range(iterations):
        c = a
        b = scalar * c
        c = a + b
        a = b + scalar * c
    return a, b, c


def _host_values(x):
    if isinstance(x, TargetVector):
        return x.to_numpy()
    return np.asarray(x)


def validate(a, b, c, iterations, scalar=SCALAR):
    """Largest relative deviation of any element from the scalar recurrence."""
    worst = 0.0
    for arr, exp in zip((a, b, c), expected_values(iterations, scalar)):
        vals = _host_values(arr)
        if vals.size == 0:
            continue
        if exp == 0.0:
            err = float(np.max(np.abs(vals)))
        else:
            err = float(np.max(np.abs(vals - exp))) / abs(exp)
        if math.isnan(err):
            return math.inf
        worst = max(worst, err)
    return worst


# -- abstraction path ------------------------------------------------------

def stream_iteration(policy, a, b, c, scalar=SCALAR, triad_scalar=None, clock=time.perf_counter):
    """One pass of the four kernels; returns the time of each kernel."""
    ts = triad_scalar if triad_scalar is not None else scalar
    times = {}
    t0 = clock()
    alg.copy(policy, a.begin(), a.end(), c.begin())
    t1 = clock()
    alg.transform(policy, c.begin(), c.end(), b.begin(),
                  lambda c: c * scalar, vectorized=True)
    t2 = clock()
    alg.transform_binary(policy, a.begin(), a.end(), b.begin(), c.begin(),
                         lambda a, b: a + b, vectorized=True)
    t3 = clock()
    alg.transform_binary(policy, b.begin(), b.end(), c.begin(), a.begin(),
                         lambda b, c: b + c * ts, vectorized=True)
    t4 = clock()
    times["Copy"], times["Scale"], times["Add"], times["Triad"] = t1 - t0, t2 - t1, t3 - t2, t4 - t3
    return times


def run_stream(executor, a, b, c, iterations=10, scalar=SCALAR, triad_scalar=None):
    """Run ``iterations`` STREAM passes; returns ``{kernel: KernelStats}``."""
    if not len(a) == len(b) == len(c):
        raise StreamError(f"array lengths differ: {len(a)}, {len(b)}, {len(c)}")
    if iterations < 1:
        raise StreamError("iterations must be >= 1")
    policy = alg.par.on(executor)
    times = {k: [] for k in KERNELS}
    for _ in range(iterations):
        for k, t in stream_iteration(policy, a, b, c, scalar, triad_scalar).items():
            times[k].append(t)
    stats = _new_stats(len(a))
    _record(stats, times, iterations)
    return stats


def reset_arrays(executor, a, b, c):
    """Reset to the initial values, each block written on its own target."""
    policy = alg.par.on(executor)
    for vec, value in zip((a, b, c), INITIAL):
        alg.transform(policy, vec.begin(), vec.end(), vec.begin(),
                      lambda x, v=value: v, vectorized=True)


def build_targets(kind, topo):
    if kind == "numa":
        return get_numa_domains(topo)
    if kind == "cores":
        return get_targets(topo)
    if not topo.devices:
        raise StreamError("device target requested but topology has no devices")
    return [make_device_target(topo, min(topo.devices))]


def make_executor(kind, targets):
    if kind == "device":
        return DeviceExecutor(targets[0])
    return BlockExecutor(targets)


class StreamArrays:
    """The three STREAM vectors plus the executor co-located with them."""

    def __init__(self, kind, n, topo):
        self.targets = build_targets(kind, topo)
        self.executor = make_executor(kind, self.targets)
        alloc = TargetAllocator(self.targets, np.float64, executor=self.executor)
        self.vectors = []
        try:
            for value in INITIAL:
                self.vectors.append(TargetVector(n, alloc, value))
        except BaseException:
            self.close()
            raise

    def close(self):
        for v in self.vectors:
            v.release()
        self.vectors = []
        self.executor.shutdown()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False


# -- plain baseline --------------------------------------------------------

class PinnedTeam:
    """Plain threads, each pinned to one OS cpu set, released per kernel."""

    def __init__(self, cpusets):
        self.size = len(cpusets)
        self._start = threading.Barrier(self.size + 1)
        self._end = threading.Barrier(self.size + 1)
        self._job = None
        self._errors = []
        self._threads = [
            threading.Thread(target=self._loop, args=(rank, cpus), daemon=True,
                             name=f"baseline-{rank}")
            for rank, cpus in enumerate(cpusets)
        ]
        for t in self._threads:
            t.start()

    def _loop(self, rank, cpus):
        if cpus and hasattr(os, "sched_setaffinity"):
            try:
                os.sched_setaffinity(0, cpus)
            except OSError as exc:
                logger.warning("baseline thread %d not pinned: %s", rank, exc)
        while True:
            self._start.wait()
            job = self._job
            if job is None:
                return
            try:
                job(rank)
            except BaseException as exc:
                self._errors.append(exc)
            self._end.wait()

    def run(self, job):
        self._job = job
        self._start.wait()
        self._end.wait()
        if self._errors:
            err = self._errors[0]
            self._errors.clear()
            raise err

    def close(self):
        self._job = None
        self._start.wait()
        for t in self._threads:
            t.join()


def _baseline_threads(kind, topo):
    """OS cpu set per baseline thread: one thread per processing unit."""
    sets = []
    for t in build_targets(kind, topo):
        sets.extend([t.os_cpus] * len(t.cpuset))
    return sets


def _strips(lo, hi):
    step = max(1, -(-(hi - lo) // CHUNKS_PER_WORKER))
    return [(s, min(s + step, hi)) for s in range(lo, hi, step)]


class HostBaseline:
    """Pinned plain threads running the kernels as static numpy strips."""

    def __init__(self, kind, n, topo, scalar=SCALAR, triad_scalar=None):
        self.n = n
        self.scalar = scalar
        self.team = PinnedTeam(_baseline_threads(kind, topo))
        self.bounds = [(blk.offset, blk.stop)
                       for blk in partition_block(n, range(self.team.size)).blocks]
        ts = triad_scalar if triad_scalar is not None else scalar
        a = self.a = np.empty(n)
        b = self.b = np.empty(n)
        c = self.c = np.empty(n)

        def strips(rank):
            return _strips(*self.bounds[rank])

        def copy(rank):
            for lo, hi in strips(rank):
                c[lo:hi] = a[lo:hi]

        def scale(rank):
            for lo, hi in strips(rank):
                b[lo:hi] = c[lo:hi] * scalar

        def add(rank):
            for lo, hi in strips(rank):
                c[lo:hi] = a[lo:hi] + b[lo:hi]

        def triad(rank):
            for lo, hi in strips(rank):
                a[lo:hi] = b[lo:hi] + c[lo:hi] * ts

        self.jobs = dict(zip(KERNELS, (copy, scale, add, triad)))

    def _init(self, rank):
        lo, hi = self.bounds[rank]
        for arr, v in zip((self.a, self.b, self.c), INITIAL):
            arr[lo:hi] = v

    def reset(self):
        self.team.run(self._init)

    def step(self):
        times = {}
        for k in KERNELS:
            t0 = time.perf_counter()
            self.team.run(self.jobs[k])
            times[k] = time.perf_counter() - t0
        return times

    def max_error(self, iterations):
        return validate(self.a, self.b, self.c, iterations, self.scalar)

    def close(self):
        self.team.close()


class DeviceBaseline:
    """Each kernel as one queue operation straight on arena arrays."""

    def __init__(self, n, topo, scalar=SCALAR, triad_scalar=None):
        target = build_targets("device", topo)[0]
        self.dev, self.q = target.device, target.queue_id
        self.scalar = scalar
        ts = triad_scalar if triad_scalar is not None else scalar
        self.addrs = []
        try:
            for _ in range(3):
                self.addrs.append(self.dev.allocate(n, np.float64, target))
        except BaseException:
            self.close()
            raise

        def copy():
            a, b, c = self._arrays()
            c[...] = a

        def scale():
            a, b, c = self._arrays()
            b[...] = c * scalar

        def add():
            a, b, c = self._arrays()
            c[...] = a + b

        def triad():
            a, b, c = self._arrays()
            a[...] = b + c * ts

        self.jobs = dict(zip(KERNELS, (copy, scale, add, triad)))

    def _arrays(self):
        return [self.dev.deref(x) for x in self.addrs]

    def _on_dev(self, fn):
        return self.dev.submit(self.q, fn).result()

    def reset(self):
        def init():
            for arr, v in zip(self._arrays(), INITIAL):
                arr[...] = v
        self._on_dev(init)

    def step(self):
        times = {}
        for k in KERNELS:
            t0 = time.perf_counter()
            self._on_dev(self.jobs[k])
            times[k] = time.perf_counter() - t0
        return times

    def max_error(self, iterations):
        snapshot = self._on_dev(lambda: [x.copy() for x in self._arrays()])
        return validate(*snapshot, iterations, self.scalar)

    def close(self):
        for x in self.addrs:
            self.dev.free(x)
        self.addrs = []


def make_baseline(target_kind, n, topo, scalar=SCALAR, triad_scalar=None):
    if target_kind == "device":
        return DeviceBaseline(n, topo, scalar, triad_scalar)
    return HostBaseline(target_kind, n, topo, scalar, triad_scalar)


def run_baseline(target_kind, n, iterations, topo=None, repetitions=1,
                 scalar=SCALAR, triad_scalar=None):
    """Hand-written STREAM without allocator/executor/algorithm layers.

    Returns ``({kernel: KernelStats}, max_relative_error)``.
    """
    if iterations < 1:
        raise StreamError("iterations must be >= 1")
    topo = topo or probe_topology()
    base = make_baseline(target_kind, n, topo, scalar, triad_scalar)
    stats = _new_stats(n)
    worst = 0.0
    try:
        for _ in range(repetitions):
            base.reset()
            times = {k: [] for k in KERNELS}
            for _ in range(iterations):
                for k, t in base.step().items():
                    times[k].append(t)
            rep = _new_stats(n)
            _record(rep, times, iterations)
            for k in KERNELS:
                stats[k].merge(rep[k])
            worst = max(worst, base.max_error(iterations))
    finally:
        base.close()
    return stats, worst


# -- reports ---------------------------------------------------------------

@dataclass
class BandwidthReport:
    config: BenchConfig
    n: int
    kernels: dict
    max_rel_error: float
    baseline: Optional[dict] = None
    baseline_max_rel_error: Optional[float] = None
    tolerance: float = TOLERANCE
    error: Optional[str] = None

    @property
    def validated(self):
        if self.error is not None or not self.max_rel_error <= self.tolerance:
            return False
        if self.baseline is not None and not self.baseline_max_rel_error <= self.tolerance:
            return False
        return True

    @staticmethod
    def _means(stats):
        bw = [stats[k].median_avg_mbps for k in KERNELS]
        return {
            "arithmetic_mean_mbps": statistics.fmean(bw),
            "harmonic_mean_mbps": statistics.harmonic_mean(bw),
        }

    def summary(self):
        out = {"abstraction": self._means(self.kernels) if self.kernels else None}
        if self.baseline:
            out["baseline"] = self._means(self.baseline)
            out["ratio_by_kernel"] = {
                k: self.kernels[k].median_avg_mbps / self.baseline[k].median_avg_mbps
                for k in KERNELS
            }
        return out

    def config_dict(self):
        d = asdict(self.config)
        d["elements"] = self.n
        return d


def run_benchmark(config, topo=None):
    """Run the abstraction (and optionally the baseline) for one array size."""
    topo = topo or probe_topology()
    n = config.n
    stats = _new_stats(n)
    worst = 0.0
    base_stats = base_err = None
    with StreamArrays(config.target_kind, n, topo) as arrays:
        a, b, c = arrays.vectors
        for rep in range(config.repetitions):
            if rep:
                reset_arrays(arrays.executor, a, b, c)
            rep_stats = run_stream(arrays.executor, a, b, c, config.iterations,
                                   triad_scalar=config.triad_scalar)
            for k in KERNELS:
                stats[k].merge(rep_stats[k])
            worst = max(worst, validate(a, b, c, config.iterations))
    if config.compare_baseline:
        base_stats, base_err = run_baseline(
            config.target_kind, n, config.iterations, topo, config.repetitions,
            triad_scalar=config.triad_scalar,
        )
    return BandwidthReport(config, n, stats, worst, base_stats, base_err)


def run_paired(config, topo=None):
    """Like :func:`run_benchmark` with the baseline, interleaving the two.

    Abstraction and baseline alternate single STREAM iterations (the side
    going first also alternates), so drifts in machine state such as
    frequency changes or noisy neighbours hit both sides alike.
    """
    topo = topo or probe_topology()
    n = config.n
    stats, base_stats = _new_stats(n), _new_stats(n)
    worst = base_worst = 0.0
    ts = config.triad_scalar
    with StreamArrays(config.target_kind, n, topo) as arrays:
        a, b, c = arrays.vectors
        policy = alg.par.on(arrays.executor)
        base = make_baseline(config.target_kind, n, topo, triad_scalar=ts)
        try:
            for rep in range(config.repetitions):
                if rep:
                    reset_arrays(arrays.executor, a, b, c)
                base.reset()
                times = {k: [] for k in KERNELS}
                btimes = {k: [] for k in KERNELS}
                for it in range(config.iterations):
                    if it % 2:
                        bt = base.step()
                        at = stream_iteration(policy, a, b, c, triad_scalar=ts)
                    else:
                        at = stream_iteration(policy, a, b, c, triad_scalar=ts)
                        bt = base.step()
                    for k in KERNELS:
                        times[k].append(at[k])
                        btimes[k].append(bt[k])
                for target, ts_by_kernel in ((stats, times), (base_stats, btimes)):
                    one = _new_stats(n)
                    _record(one, ts_by_kernel, config.iterations)
                    for k in KERNELS:
                        target[k].merge(one[k])
                worst = max(worst, validate(a, b, c, config.iterations))
                base_worst = max(base_worst, base.max_error(config.iterations))
        finally:
            base.close()
    return BandwidthReport(config, n, stats, worst, base_stats, base_worst)


def size_sweep(config, sizes, topo=None):
    """One report per size (ascending); failures are recorded, not raised."""
    sizes = list(sizes)
    if not sizes:
        raise StreamError("size sweep needs at least one size")
    if any(b <= a for a, b in zip(sizes, sizes[1:])):
        raise StreamError("sweep sizes must be strictly ascending")
    topo = topo or probe_topology()
    reports = []
    for size in sizes:
        cfg = BenchConfig(size, config.iterations, config.target_kind, config.compare_baseline,
                          config.output, config.repetitions, config.triad_scalar)
        try:
            if cfg.compare_baseline:
                reports.append(run_paired(cfg, topo))
            else:
                reports.append(run_benchmark(cfg, topo))
        except Exception as exc:
            logger.error("size %s MB failed: %s", size, exc)
            reports.append(BandwidthReport(cfg, cfg.n, {}, math.inf, error=str(exc)))
    return reports


def sweep_table(reports):
    """Rows of (size_mb, abstraction avg MB/s, baseline avg MB/s, ratio)."""
    rows = []
    for r in reports:
        row = {"size_mb": r.config.array_size_mb, "abstraction_avg_mbps": None,
               "baseline_avg_mbps": None, "ratio": None, "validated": r.validated}
        if r.kernels:
            row["abstraction_avg_mbps"] = r.summary()["abstraction"]["arithmetic_mean_mbps"]
        if r.baseline:
            row["baseline_avg_mbps"] = r.summary()["baseline"]["arithmetic_mean_mbps"]
            row["ratio"] = row["abstraction_avg_mbps"] / row["baseline_avg_mbps"]
        rows.append(row)
    return rows
