"""``locality-stream``: STREAM over target-placed vectors.

Exit status is 0 only when every run validates.
"""

import argparse
import logging
import sys

from . import execution
from .report import emit_report, emit_sweep
from .stream import BenchConfig, StreamError, elements_for, run_benchmark, run_paired, size_sweep
from .topology import ConfigError, TopologyConfig, load_mock_topology, probe_topology


def build_parser():
    p = argparse.ArgumentParser(
        prog="locality-stream",
        description="STREAM bandwidth benchmark over target-aware vectors and executors.",
    )
    p.add_argument("--size-mb", type=float, action="append", dest="sizes", metavar="MB",
                   help="array size in MB (1e6 bytes); repeat for a sweep (default 100)")
    p.add_argument("--iterations", type=int, default=10)
    p.add_argument("--target", choices=("numa", "cores", "device"), default="numa")
    p.add_argument("--topology", metavar="FILE",
                   help="mock topology config instead of probing the machine")
    p.add_argument("--compare-baseline", action="store_true",
                   help="also run the hand-written pinned-loop baseline")
    p.add_argument("--repetitions", type=int, default=1,
                   help="repeat each size and report the median (default 1)")
    p.add_argument("--format", choices=("human", "csv", "json"), default="human")
    p.add_argument("--out", metavar="PATH", help="write the report here instead of stdout")
    p.add_argument("--record", action="store_true",
                   help=f"log every work item (same as {execution.RECORD_ENV}=1)")
    p.add_argument("--inject-triad-scalar", type=float, default=None, help=argparse.SUPPRESS)
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _topology(args, sizes):
    if args.topology:
        topo = load_mock_topology(TopologyConfig.load(args.topology))
    else:
        topo = probe_topology()
    if args.target == "device" and not topo.devices:
        # three arrays of the largest size, plus headroom for the baseline copy
        need = 6 * elements_for(max(sizes)) * 8
        topo = topo.with_devices({0: need})
    return topo


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.record:
        execution.recorder.enabled = True
    sizes = args.sizes or [100.0]
    try:
        config = BenchConfig(sizes[0], args.iterations, args.target, args.compare_baseline,
                             args.format, args.repetitions, args.inject_triad_scalar)
        topo = _topology(args, sizes)
        if len(sizes) == 1:
            run = run_paired if config.compare_baseline else run_benchmark
            reports = [run(config, topo)]
            text = emit_report(reports[0], args.format)
        else:
            reports = size_sweep(config, sizes, topo)
            text = emit_sweep(reports, args.format)
    except (StreamError, ConfigError, OSError, MemoryError) as exc:
        print(f"locality-stream: error: {exc}", file=sys.stderr)
        return 2
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text if text.endswith("\n") else text + "\n")
    else:
        print(text)
    if args.record:
        print(f"recorded {len(execution.recorder.records())} work items", file=sys.stderr)
    return 0 if all(r.validated for r in reports) else 1


if __name__ == "__main__":
    sys.exit(main())
