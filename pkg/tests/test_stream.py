import csv
import io
import json

import numpy as np
import pytest

from locality import TargetAllocator, TopologyConfig, load_mock_topology, make_vector
from locality.cli import main
from locality.report import CSV_FIELDS, emit_report, emit_sweep
from locality.stream import (
    KERNELS,
    SCALAR,
    BenchConfig,
    StreamError,
    expected_values,
    kernel_bytes,
    run_baseline,
    run_benchmark,
    run_paired,
    run_stream,
    size_sweep,
    sweep_table,
    validate,
)


def simulate(n_iter, scalar=3.0):
    """Independent oracle: elementwise simulation with plain Python lists."""
    a, b, c = [1.0] * 3, [2.0] * 3, [0.0] * 3
    for _ in range(n_iter):
        c = list(a)
        b = [scalar * x for x in c]
        c = [x + y for x, y in zip(a, b)]
        a = [x + scalar * y for x, y in zip(b, c)]
    return a[0], b[0], c[0]


def test_recurrence_one_iteration():
    assert expected_values(1) == (15.0, 3.0, 4.0)
    for k in range(12):
        assert expected_values(k) == simulate(k)


def arrays(domains, ex, n):
    alloc = TargetAllocator(domains, executor=ex)
    return [make_vector(n, alloc, v) for v in (1.0, 2.0, 0.0)]


@pytest.mark.parametrize("n", [1, 7, 1000])
def test_run_stream_one_iteration(domains, block_exec, n):
    a, b, c = arrays(domains, block_exec, n)
    stats = run_stream(block_exec, a, b, c, iterations=1)
    assert list(a) == [15.0] * n and list(b) == [3.0] * n and list(c) == [4.0] * n
    assert set(stats) == set(KERNELS)
    assert all(len(s.times) == 1 for s in stats.values())


def test_run_stream_length_mismatch(domains, block_exec):
    a, b, _ = arrays(domains, block_exec, 4)
    c = make_vector(5, TargetAllocator(domains), 0.0)
    with pytest.raises(StreamError):
        run_stream(block_exec, a, b, c)


def test_validate():
    ones = np.full(5, 1.0)
    assert validate(ones, ones * 2, ones * 0, 0) == 0.0
    a, b, c = (np.full(5, v) for v in expected_values(10))
    assert validate(a, b, c, 10) <= 1e-8
    a[3] *= 1 + 1e-6
    assert validate(a, b, c, 10) == pytest.approx(1e-6, rel=1e-3)


def test_validate_detects_wrong_triad(domains, block_exec):
    a, b, c = arrays(domains, block_exec, 100)
    run_stream(block_exec, a, b, c, iterations=10, triad_scalar=2.0)
    assert validate(a, b, c, 10) > 1e-3


def test_spatially_constant(domains, block_exec):
    a, b, c = arrays(domains, block_exec, 999)
    run_stream(block_exec, a, b, c, iterations=5)
    for v in (a, b, c):
        arr = v.to_numpy()
        assert np.all(arr == arr[0])


def test_kernel_stats_accounting():
    assert kernel_bytes("Copy", 10) == kernel_bytes("Scale", 10) == 2 * 10 * 8
    assert kernel_bytes("Add", 10) == kernel_bytes("Triad", 10) == 3 * 10 * 8


def test_warmup_excluded(topo):
    rep = run_benchmark(BenchConfig(0.08, iterations=4, target_kind="numa"), topo)
    for k in KERNELS:
        s = rep.kernels[k]
        assert len(s.times) == 3
        assert s.best_mbps >= s.avg_mbps >= s.worst_mbps
        assert s.bytes_moved == kernel_bytes(k, rep.n)


@pytest.mark.parametrize("kind", ["numa", "cores", "device"])
def test_benchmark_kinds_validate(topo, kind):
    rep = run_benchmark(BenchConfig(0.08, iterations=3, target_kind=kind, compare_baseline=True), topo)
    assert rep.validated, rep
    assert rep.baseline_max_rel_error <= 1e-8


def test_baseline_matches_probed_machine():
    stats, err = run_baseline("numa", 10_000, 3)
    assert err == 0.0
    assert set(stats) == set(KERNELS)


@pytest.mark.parametrize("kind", ["numa", "cores", "device"])
def test_paired_repetitions(topo, kind):
    rep = run_paired(BenchConfig(0.08, iterations=3, repetitions=3, target_kind=kind), topo)
    assert all(len(rep.kernels[k].rep_avg_mbps) == 3 for k in KERNELS)
    assert all(len(rep.baseline[k].rep_avg_mbps) == 3 for k in KERNELS)
    assert rep.validated
    bad = run_paired(BenchConfig(0.08, iterations=3, target_kind=kind, triad_scalar=2.0), topo)
    assert bad.max_rel_error > 1e-3 and bad.baseline_max_rel_error > 1e-3


def test_sweep(topo):
    cfg = BenchConfig(1, iterations=2, compare_baseline=True)
    reps = size_sweep(cfg, [0.05, 0.1, 0.2], topo)
    table = sweep_table(reps)
    assert [r["size_mb"] for r in table] == [0.05, 0.1, 0.2]
    assert all(r["ratio"] > 0 for r in table)
    assert len(sweep_table(size_sweep(cfg, [0.05], topo))) == 1
    with pytest.raises(StreamError):
        size_sweep(cfg, [0.2, 0.1], topo)


def test_sweep_continues_after_failure():
    small = load_mock_topology(TopologyConfig.uniform(1, 2, {0: 3 * 8 * 20_000}))
    cfg = BenchConfig(1, iterations=2, target_kind="device")
    reps = size_sweep(cfg, [0.1, 0.15, 10.0], small)
    assert [r.validated for r in reps] == [True, True, False]
    assert reps[2].error
    assert len(sweep_table(reps)) == 3


def test_config_validation():
    for bad in (dict(iterations=0), dict(array_size_mb=0), dict(target_kind="gpu"),
                dict(repetitions=0)):
        with pytest.raises(StreamError):
            BenchConfig(**bad)


# -- reports ---------------------------------------------------------------

@pytest.fixture
def report(topo):
    return run_paired(BenchConfig(0.08, iterations=2, compare_baseline=True), topo)


def test_csv(report, topo):
    rows = list(csv.DictReader(io.StringIO(emit_report(report, "csv"))))
    assert len(rows) == 8
    assert list(rows[0]) == CSV_FIELDS
    single = run_benchmark(BenchConfig(0.08, iterations=2), topo)
    text = emit_report(single, "csv")
    assert len(text.strip().splitlines()) == 5


def test_json(report):
    data = json.loads(emit_report(report, "json"))
    assert data["validated"] is True
    fields = {"kernel", "bytes", "min_time_s", "avg_time_s", "max_time_s", "best_mbps", "validated"}
    assert [k["kernel"] for k in data["kernels"]] == list(KERNELS)
    assert all(fields <= set(k) for k in data["kernels"] + data["baseline"])
    assert set(data["summary"]["abstraction"]) == {"arithmetic_mean_mbps", "harmonic_mean_mbps"}


def test_human_marks_failure(topo):
    bad = run_benchmark(BenchConfig(0.08, iterations=3, triad_scalar=2.0), topo)
    assert not bad.validated
    assert "VALIDATION FAILED" in emit_report(bad, "human")
    good = run_benchmark(BenchConfig(0.08, iterations=3), topo)
    assert "Solution validates" in emit_report(good, "human")


def test_emit_sweep(topo):
    reps = size_sweep(BenchConfig(1, iterations=2, compare_baseline=True), [0.05, 0.1], topo)
    assert json.loads(emit_sweep(reps, "json"))["sweep"][1]["size_mb"] == 0.1
    assert "ratio" in emit_sweep(reps, "human")
    assert len(emit_sweep(reps, "csv").strip().splitlines()) == 1 + 2 * 8


# -- CLI -------------------------------------------------------------------

@pytest.fixture
def topo_file(tmp_path):
    path = tmp_path / "topo.txt"
    path.write_text(TopologyConfig.uniform(2, 2, {0: 10_000_000}).dumps())
    return str(path)


def test_cli_json(capsys, topo_file):
    rc = main(["--size-mb", "0.1", "--iterations", "3", "--topology", topo_file,
               "--format", "json", "--compare-baseline"])
    assert rc == 0
    data = json.loads(capsys.readouterr().out)
    assert data["validated"] and data["config"]["target_kind"] == "numa"


def test_cli_out_file(tmp_path, topo_file):
    out = tmp_path / "r.csv"
    assert main(["--size-mb", "0.1", "--iterations", "2", "--topology", topo_file,
                 "--target", "device", "--format", "csv", "--out", str(out)]) == 0
    assert len(out.read_text().strip().splitlines()) == 5


def test_cli_sweep(capsys):
    assert main(["--size-mb", "0.05", "--size-mb", "0.1", "--iterations", "2",
                 "--compare-baseline", "--target", "cores"]) == 0
    assert "ratio" in capsys.readouterr().out


def test_cli_fault_injection_exits_nonzero(capsys):
    assert main(["--size-mb", "0.1", "--iterations", "3", "--inject-triad-scalar", "2.0"]) == 1
    assert "VALIDATION FAILED" in capsys.readouterr().out


def test_cli_bad_topology(tmp_path, capsys):
    path = tmp_path / "bad.txt"
    path.write_text("domain 0: 0-3\ndomain 1: 3-5\n")
    assert main(["--topology", str(path), "--size-mb", "0.1"]) == 2
    assert "unit 3 in multiple domains" in capsys.readouterr().err


def test_cli_device_without_config(capsys):
    assert main(["--size-mb", "0.1", "--iterations", "2", "--target", "device"]) == 0


def test_cli_record(capsys, topo_file):
    from locality.execution import recorder
    try:
        assert main(["--size-mb", "0.1", "--iterations", "2", "--topology", topo_file, "--record"]) == 0
        assert "recorded" in capsys.readouterr().err
        assert recorder.records()
    finally:
        recorder.enabled = False
        recorder.clear()


def test_module_entry_point():
    import subprocess
    import sys
    out = subprocess.run([sys.executable, "-m", "locality", "--size-mb", "0.1", "--iterations", "2",
                          "--inject-triad-scalar", "2.5"], capture_output=True, text=True)
    assert out.returncode == 1
    assert SCALAR == 3.0
