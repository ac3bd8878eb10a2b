"""Serialize STREAM reports as a human table, CSV or JSON.

JSON layout (one object per run)::

    {
      "config": {...BenchConfig fields..., "elements": n},
      "validated": true,
      "max_rel_error": 0.0,
      "baseline_max_rel_error": 0.0 | null,
      "error": null,
      "kernels":  [KERNEL, ...],      # abstraction
      "baseline": [KERNEL, ...] | null,
      "summary":  {"abstraction": {"arithmetic_mean_mbps", "harmonic_mean_mbps"},
                   "baseline": {...}, "ratio_by_kernel": {...}}
    }

where KERNEL has the stable fields ``kernel, bytes, min_time_s, avg_time_s,
max_time_s, best_mbps, avg_mbps, worst_mbps, median_avg_mbps, validated``.
A sweep is ``{"runs": [run, ...], "sweep": [row, ...]}``.

CSV has one row per kernel and implementation, with columns
:data:`CSV_FIELDS`.
"""

import csv
import io
import json
import math

from .stream import KERNELS, sweep_table

CSV_FIELDS = ["size_mb", "impl", "kernel", "bytes", "min_time_s", "avg_time_s",
              "max_time_s", "best_mbps", "avg_mbps", "worst_mbps", "validated"]


def _num(x):
    if x is None or (isinstance(x, float) and not math.isfinite(x)):
        return None
    return x


def kernel_rows(stats, validated):
    rows = []
    for k in KERNELS:
        s = stats[k]
        rows.append({
            "kernel": k,
            "bytes": s.bytes_moved,
            "min_time_s": s.min_time,
            "avg_time_s": s.avg_time,
            "max_time_s": s.max_time,
            "best_mbps": _num(s.best_mbps),
            "avg_mbps": _num(s.avg_mbps),
            "worst_mbps": _num(s.worst_mbps),
            "median_avg_mbps": _num(s.median_avg_mbps),
            "validated": validated,
        })
    return rows


def report_dict(report):
    ok = report.validated
    return {
        "config": report.config_dict(),
        "validated": ok,
        "max_rel_error": _num(report.max_rel_error),
        "baseline_max_rel_error": _num(report.baseline_max_rel_error),
        "error": report.error,
        "kernels": kernel_rows(report.kernels, ok) if report.kernels else [],
        "baseline": kernel_rows(report.baseline, ok) if report.baseline else None,
        "summary": report.summary() if report.kernels else None,
    }


def _csv_rows(report):
    d = report_dict(report)
    size = report.config.array_size_mb
    rows = []
    for impl, krows in (("abstraction", d["kernels"]), ("baseline", d["baseline"] or [])):
        for r in krows:
            rows.append({"size_mb": size, "impl": impl, **{f: r[f] for f in CSV_FIELDS[2:]}})
    return rows


def _human(report):
    lines = []
    cfg = report.config
    lines.append(f"STREAM  target={cfg.target_kind}  array={cfg.array_size_mb:g} MB "
                 f"({report.n} doubles)  iterations={cfg.iterations}  "
                 f"repetitions={cfg.repetitions}")
    if report.error:
        lines.append(f"*** RUN FAILED: {report.error} ***")
        return "\n".join(lines)
    header = f"{'Function':<10}{'Best MB/s':>14}{'Avg time':>12}{'Min time':>12}{'Max time':>12}"
    sections = [("abstraction", report.kernels)]
    if report.baseline:
        sections.append(("baseline", report.baseline))
    for name, stats in sections:
        lines.append(f"[{name}]")
        lines.append(header)
        for k in KERNELS:
            s = stats[k]
            lines.append(f"{k + ':':<10}{s.best_mbps:>14.1f}{s.avg_time:>12.6f}"
                         f"{s.min_time:>12.6f}{s.max_time:>12.6f}")
    summary = report.summary()
    for name in ("abstraction", "baseline"):
        if summary.get(name):
            m = summary[name]
            lines.append(f"{name} mean avg bandwidth: arithmetic {m['arithmetic_mean_mbps']:.1f} MB/s, "
                         f"harmonic {m['harmonic_mean_mbps']:.1f} MB/s")
    if "ratio_by_kernel" in summary:
        ratios = ", ".join(f"{k} {v:.3f}" for k, v in summary["ratio_by_kernel"].items())
        lines.append(f"abstraction/baseline: {ratios}")
    if report.validated:
        lines.append(f"Solution validates: max relative error {report.max_rel_error:.3e} "
                     f"(tolerance {report.tolerance:g})")
    else:
        errs = f"{report.max_rel_error:.3e}"
        if report.baseline_max_rel_error is not None:
            errs += f", baseline {report.baseline_max_rel_error:.3e}"
        lines.append(f"*** VALIDATION FAILED: max relative error {errs} "
                     f"exceeds {report.tolerance:g} ***")
    return "\n".join(lines)


def emit_report(report, fmt="human"):
    if fmt == "json":
        return json.dumps(report_dict(report), indent=2)
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.DictWriter(buf, CSV_FIELDS, lineterminator="\n")
        w.writeheader()
        w.writerows(_csv_rows(report))
        return buf.getvalue()
    if fmt == "human":
        return _human(report)
    raise ValueError(f"unknown format {fmt!r}")


def emit_sweep(reports, fmt="human"):
    table = sweep_table(reports)
    if fmt == "json":
        return json.dumps({"runs": [report_dict(r) for r in reports], "sweep": table}, indent=2)
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.DictWriter(buf, CSV_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in reports:
            w.writerows(_csv_rows(r))
        return buf.getvalue()
    if fmt != "human":
        raise ValueError(f"unknown format {fmt!r}")
    parts = [_human(r) for r in reports]
    lines = [f"{'size MB':>10}{'abstraction MB/s':>18}{'baseline MB/s':>16}{'ratio':>8}"]
    for row in table:
        def cell(v, width, spec):
            return f"{'-':>{width}}" if v is None else f"{v:>{width}{spec}}"
        lines.append(cell(row["size_mb"], 10, "g") + cell(row["abstraction_avg_mbps"], 18, ".1f")
                     + cell(row["baseline_avg_mbps"], 16, ".1f") + cell(row["ratio"], 8, ".3f"))
    parts.append("\n".join(lines))
    return "\n\n".join(parts)
