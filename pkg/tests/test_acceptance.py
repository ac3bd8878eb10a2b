"""Acceptance criteria, one test each.

Every test prints a ``PASS criterion N`` or ``FAIL criterion N`` line; the
same lines are repeated in the terminal summary. The bandwidth criteria
(2 and 3) are marked ``slow``.
"""

import contextlib
import os
import random
import subprocess
import sys
import threading
import time

import numpy as np
import pytest

from locality import (
    BlockExecutor,
    DeviceExecutor,
    TargetAllocator,
    TopologyConfig,
    copy,
    derive_missing,
    get_numa_domains,
    load_mock_topology,
    make_device_target,
    make_vector,
    par,
    partition_block,
    probe_topology,
    seq,
    transform,
    transform_binary,
)
from locality.cli import main
from locality.execution import IndexRange, Shape, recorder
from locality.stream import BenchConfig, run_benchmark, run_paired, size_sweep, sweep_table

HERE = os.path.dirname(os.path.abspath(__file__))


@pytest.fixture
def criterion(request):
    lines = request.config.acceptance_lines

    @contextlib.contextmanager
    def check(number, title):
        notes = []
        start = time.perf_counter()
        try:
            yield notes
        except BaseException as exc:
            line = f"FAIL criterion {number} ({title}): {type(exc).__name__}: {exc}".splitlines()[0]
            print(line)
            lines.append(line)
            raise
        took = time.perf_counter() - start
        detail = "; ".join(notes)
        line = f"PASS criterion {number} ({title}) in {took:.1f}s" + (f": {detail}" if detail else "")
        print(line)
        lines.append(line)
    return check


def mock_2x6(devices=None):
    return load_mock_topology(TopologyConfig.uniform(2, 6, devices))


def available_mb():
    try:
        with open("/proc/meminfo") as fh:
            for line in fh:
                if line.startswith("MemAvailable:"):
                    return int(line.split()[1]) * 1024 / 1e6
    except OSError:
        pass
    return 2000.0


def largest_size_mb(cap):
    # a paired run holds 3 abstraction and 3 baseline arrays; keep 2 spare
    return min(cap, available_mb() / 8)


# 1 -----------------------------------------------------------------------

def test_stream_correctness(criterion):
    with criterion(1, "STREAM correctness") as notes:
        topo = probe_topology()
        start = time.perf_counter()
        worst = 0.0
        for size in (1, 10):
            for iters in (1, 10, 100):
                rep = run_benchmark(BenchConfig(size, iters), topo)
                assert rep.validated, f"{size} MB x {iters}: error {rep.max_rel_error}"
                assert rep.max_rel_error <= 1e-8
                worst = max(worst, rep.max_rel_error)
        took = time.perf_counter() - start
        assert took < 30, f"took {took:.1f}s"
        notes.append(f"max rel error {worst:.2e}, {took:.1f}s")


# 2 -----------------------------------------------------------------------

@pytest.mark.slow
def test_abstraction_parity(criterion):
    with criterion(2, "abstraction parity") as notes:
        size = largest_size_mb(100)
        start = time.perf_counter()
        rep = run_paired(BenchConfig(size, 10, compare_baseline=True, repetitions=3))
        took = time.perf_counter() - start
        assert rep.validated
        ratios = rep.summary()["ratio_by_kernel"]
        notes.append(f"{size:g} MB on {os.cpu_count()} hw threads, ratios "
                     + ", ".join(f"{k} {v:.3f}" for k, v in ratios.items()))
        assert all(v >= 0.95 for v in ratios.values()), ratios
        assert took < 300, f"took {took:.1f}s"


# 3 -----------------------------------------------------------------------

@pytest.mark.slow
def test_overhead_convergence(criterion):
    with criterion(3, "overhead convergence") as notes:
        top = largest_size_mb(400)
        sizes = [round(top / f, 3) for f in (40, 10, 4, 1)]
        start = time.perf_counter()
        reports = size_sweep(BenchConfig(sizes[0], 10, compare_baseline=True, repetitions=3), sizes)
        took = time.perf_counter() - start
        table = sweep_table(reports)
        assert all(r["validated"] for r in table)
        ratios = [r["ratio"] for r in table]
        notes.append(", ".join(f"{s:g} MB {r:.3f}" for s, r in zip(sizes, ratios)))
        assert sizes[-1] / sizes[0] >= 10
        assert ratios[-1] >= ratios[0], ratios
        assert took < 600, f"took {took:.1f}s"


# 4 -----------------------------------------------------------------------

def test_partition_oracle(criterion):
    with criterion(4, "partition oracle") as notes:
        start = time.perf_counter()
        targets = [f"t{i}" for i in range(16)]
        for k in range(1, 17):
            tk = targets[:k]
            for n in range(10_001):
                part = partition_block(n, tk)
                assert len(part.blocks) == k
                pos = 0
                lo, hi = n, 0
                for blk, t in zip(part.blocks, tk):
                    assert blk.target == t
                    assert blk.offset == pos          # contiguous, disjoint
                    assert blk.stop == blk.offset + blk.length
                    pos = blk.stop
                    lo, hi = min(lo, blk.length), max(hi, blk.length)
                assert pos == n                       # full coverage
                assert hi - lo <= 1
        took = time.perf_counter() - start
        assert took < 10, f"took {took:.1f}s"
        notes.append(f"{16 * 10_001} partitions")


# 5 -----------------------------------------------------------------------

class OnlyAsync:
    def __init__(self):
        from concurrent.futures import ThreadPoolExecutor
        self.pool = ThreadPoolExecutor(3)

    def async_execute(self, f, *args):
        return self.pool.submit(f, *args)


def random_shape(rng):
    cuts = sorted(rng.sample(range(0, 500), rng.randint(0, 14)))
    return Shape([IndexRange(a, b) for a, b in zip(cuts, cuts[1:]) if rng.random() < 0.7])


def test_executor_derivation(criterion):
    with criterion(5, "executor derivation") as notes:
        out = subprocess.run(
            [sys.executable, "-m", "pytest", os.path.join(HERE, "test_execution.py"),
             "-q", "-k", "minimal", "-p", "no:cacheprovider"],
            capture_output=True, text=True, cwd=os.path.dirname(HERE),
        )
        assert out.returncode == 0, out.stdout[-2000:]
        summary = out.stdout.strip().splitlines()[-1]
        notes.append(f"contract suite on minimal executor: {summary}")

        rng = random.Random(20240611)
        mini = OnlyAsync()
        with BlockExecutor(get_numa_domains(mock_2x6())) as full:
            derived = derive_missing(mini)
            for trial in range(1000):
                shape = random_shape(rng)
                k = rng.randint(-50, 50)

                def f(i, k=k):
                    return i * i - 7 * i + k
                oracle = [f(i) for i in shape.indices()]
                assert derived.bulk_execute(f, shape) == oracle
                assert derived.bulk_async_execute(f, shape).result() == oracle
                assert full.bulk_execute(f, shape) == oracle
        mini.pool.shutdown()
        notes.append("1000 random shapes equal")


# 6 -----------------------------------------------------------------------

def test_colocation_audit(criterion):
    with criterion(6, "co-location audit") as notes:
        domains = get_numa_domains(mock_2x6())
        n = 30_000
        with BlockExecutor(domains) as ex, recorder as rec:
            alloc = TargetAllocator(domains, executor=ex)
            a = make_vector(n, alloc, 1.0)
            b = make_vector(n, alloc, lambda i: float(i))
            c = make_vector(n, alloc, 0.0)
            copy(par.on(ex), a.begin(), a.end(), c.begin())
            transform(par.on(ex), c.begin(), c.end(), b.begin(), lambda x: 3.0 * x, vectorized=True)
            transform(seq.on(ex), a.begin(), a.begin() + 500, c.begin(), lambda x: x + 1)
            transform_binary(par.on(ex), a.begin(), a.end(), b.begin(), c.begin(),
                             lambda x, y: x + y)
            records = rec.records()
        part = a.partition
        placed = [r for r in records if r.block is not None]
        assert placed and len(placed) == len(records)
        bad = [r for r in placed
               if r.affinity is None or not r.affinity <= part.blocks[r.block].target.cpuset
               or not (part.blocks[r.block].offset <= r.span[0] and r.span[1] <= part.blocks[r.block].stop)]
        assert not bad, bad[:3]
        notes.append(f"{len(placed)}/{len(records)} work items inside their block's cpuset")


# 7 -----------------------------------------------------------------------

def test_cross_space_copy(criterion):
    with criterion(7, "cross-space copy") as notes:
        topo = mock_2x6({0: 8 * 10**6})
        domains = get_numa_domains(topo)
        dev = make_device_target(topo, 0)
        data = np.random.default_rng(7).standard_normal(10**5)
        data[:3] = [np.nan, -0.0, np.inf]
        with BlockExecutor(domains) as ex:
            host = make_vector(len(data), TargetAllocator(domains, executor=ex), data)
            back = make_vector(len(data), TargetAllocator(domains, executor=ex), 0.0)
            onto = make_vector(len(data), TargetAllocator(dev), 0.0)
            copy(par.on(ex), host.begin(), host.end(), onto.begin())
            copy(par.on(DeviceExecutor(dev)), onto.begin(), onto.end(), back.begin())
        assert back.to_numpy().tobytes() == data.tobytes()
        notes.append("1e5 doubles bitwise equal")

        v = make_vector(8, TargetAllocator(dev), 0.0)
        seen = []
        for k in range(200):
            v[k % 8] = float(k)
            seen.append(v[k % 8])
        assert seen == [float(k) for k in range(200)]
        order = []
        lock = threading.Lock()

        def note(i):
            with lock:
                order.append(i)
        device = dev.device
        futs = []
        for k in range(100):
            futs.append(device.submit(v.queue_id, note, k))
            v.at(k % 8).set(float(k))
        for f in futs:
            f.result()
        assert order == list(range(100))
        assert v.to_numpy().tolist() == [96.0, 97.0, 98.0, 99.0, 92.0, 93.0, 94.0, 95.0]
        notes.append("queue FIFO held for 300 interleaved operations")


# 8 -----------------------------------------------------------------------

def target_lists(topo):
    d0, d1 = get_numa_domains(topo)
    return {
        1: [d0],
        2: [d0, d1],
        3: [topo.host_target({0, 1, 2}), topo.host_target({3, 4, 5}), d1],
    }


def test_algorithm_oracle(criterion):
    with criterion(8, "algorithm oracle") as notes:
        topo = mock_2x6()
        rng = np.random.default_rng(11)
        cases = 0
        for k, targets in target_lists(topo).items():
            with BlockExecutor(targets) as ex:
                alloc = TargetAllocator(targets, executor=ex)
                for n in (0, 1, 7, 1_000, 100_000):
                    x = rng.uniform(-1e3, 1e3, n)
                    y = rng.uniform(-1e3, 1e3, n)
                    vx = make_vector(n, alloc, x)
                    vy = make_vector(n, alloc, y)
                    for policy in (par.on(ex), seq.on(ex)):
                        out = make_vector(n, alloc, 0.0)
                        end = copy(policy, vx.begin(), vx.end(), out.begin())
                        assert end == out.end()
                        assert out.to_numpy().tolist() == [x[i] for i in range(n)]

                        def u(v):
                            return v * 2.5 - 1.0
                        transform(policy, vx.begin(), vx.end(), out.begin(), u)
                        assert out.to_numpy().tolist() == [u(x[i]) for i in range(n)]

                        def g(p, q):
                            return p * q + p
                        transform_binary(policy, vx.begin(), vx.end(), vy.begin(), out.begin(), g)
                        assert out.to_numpy().tolist() == [g(x[i], y[i]) for i in range(n)]
                        cases += 3
        notes.append(f"{cases} algorithm runs equal the loop oracle")

        domains = get_numa_domains(topo)
        with BlockExecutor(domains) as ex:
            s = make_vector(10, TargetAllocator(domains, "<U1", executor=ex), list("helloworld"))
            transform(par.on(ex), s.begin(), s.end(), s.begin(), lambda ch: ch.upper())
            text = "".join(s)
        assert text == "HELLOWORLD", text
        notes.append(text)


# 9 -----------------------------------------------------------------------

def test_fault_injection(criterion, capsys):
    with criterion(9, "fault injection") as notes:
        bad = run_benchmark(BenchConfig(1, 10, triad_scalar=2.0))
        assert not bad.validated and bad.max_rel_error > 1e-3
        assert main(["--size-mb", "1", "--iterations", "10", "--inject-triad-scalar", "2.0"]) != 0
        assert "VALIDATION FAILED" in capsys.readouterr().out
        proc = subprocess.run([sys.executable, "-m", "locality", "--size-mb", "1",
                               "--inject-triad-scalar", "3.0000001"], capture_output=True, text=True)
        assert proc.returncode != 0
        ok = subprocess.run([sys.executable, "-m", "locality", "--size-mb", "1"],
                            capture_output=True, text=True)
        assert ok.returncode == 0, ok.stdout
        notes.append(f"rel error {bad.max_rel_error:.2e}, CLI exit {proc.returncode}")
