"""Latency measurement with trial statistics and machine-readable reports.

Statistics convention: mean and SAMPLE standard deviation (n-1 denominator),
std defined only for two or more trials. One untimed warm-up run precedes
measurement, and weight-loading time is never inside the timed region
(preprocessing is, when explicitly flagged).

The JSON report schema is fixed:

    { "model", "trainsets", "trials_ms": [...], "mean_ms", "std_ms",
      "input": [C, H, W], "threads", "backend", "params", "flops",
      "perf_ratio" }

with null for absent optionals; emit -> parse is lossless.
"""

from __future__ import annotations

import json
import os
import statistics
import time
from dataclasses import dataclass
from typing import Sequence

from . import tensor_core as tc
from .data import preprocess
from .errors import MeladError
from .model import WeightBundle, count_params, count_flops, run_layers
from .tensor_core import Tensor

BACKENDS = ("native", "browser")

_JSON_KEYS = ("model", "trainsets", "trials_ms", "mean_ms", "std_ms",
              "input", "threads", "backend", "params", "flops", "perf_ratio")


@dataclass(frozen=True)
class BenchmarkReport:
    model: str
    trials_ms: tuple[float, ...]
    mean_ms: float
    std_ms: float | None
    input: tuple[int, int, int]
    backend: str = "native"
    threads: int | None = None
    trainsets: str | None = None
    params: int | None = None
    flops: int | None = None
    perf_ratio: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "trials_ms", tuple(float(t) for t in self.trials_ms))
        object.__setattr__(self, "input", tuple(int(e) for e in self.input))
        if len(self.trials_ms) < 1:
            raise ValueError("a report needs at least one trial")
        if self.backend not in BACKENDS:
            raise ValueError(f"backend must be one of {BACKENDS}, got {self.backend!r}")
        if len(self.input) != 3:
            raise ValueError(f"input must be (C, H, W), got {self.input}")
        if not min(self.trials_ms) <= self.mean_ms <= max(self.trials_ms):
            raise ValueError("mean_ms must lie within the trial range")
        if len(self.trials_ms) == 1 and self.std_ms is not None:
            raise ValueError("std_ms is undefined for a single trial")
        if self.std_ms is not None and self.std_ms < 0:
            raise ValueError("std_ms must be >= 0")

    @classmethod
    def from_timings(
        cls,
        model: str,
        trials_ms: Sequence[float],
        input: Sequence[int] = (3, 150, 150),
        **extra,
    ) -> "BenchmarkReport":
        """Compute mean and sample (n-1) std from raw trial timings."""
        timings = tuple(float(t) for t in trials_ms)
        if not timings:
            raise ValueError("at least one trial timing is required")
        mean = statistics.fmean(timings)
        std = statistics.stdev(timings) if len(timings) >= 2 else None
        return cls(model=model, trials_ms=timings, mean_ms=mean, std_ms=std,
                   input=tuple(input), **extra)


def time_inference(
    bundle: WeightBundle,
    image: Tensor | None = None,
    trials: int = 3,
    threads: int | None = None,
    deterministic: bool = False,
    image_path=None,
    include_preprocess: bool = False,
    trainsets: str | None = None,
) -> BenchmarkReport:
    """Time single-image forward passes.

    Pass a preprocessed tensor, or an image_path with
    include_preprocess=True to put decoding + resizing inside the timed
    region. Weight loading already happened at the call site and is never
    timed.

    The thread count is a budget, not a demand: requests above the host's
    logical core count are clamped to it, since oversubscribing cores only
    adds scheduler contention to the measurement. The report records the
    effective count. Deterministic mode always runs (and reports) a single
    worker.
    """
    if trials < 1:
        raise ValueError(f"trials must be >= 1, got {trials}")
    if include_preprocess and image_path is None:
        raise ValueError("include_preprocess requires image_path")
    if image is None:
        if image_path is None:
            raise ValueError("provide an image tensor or an image_path")
        image = preprocess(image_path, bundle.config.input_height)

    host_cores = os.cpu_count() or 1
    if deterministic:
        effective_threads = 1
    elif threads is None:
        effective_threads = host_cores
    else:
        if threads < 1:
            raise ValueError(f"thread count must be >= 1, got {threads}")
        effective_threads = min(threads, host_cores)

    timings: list[float] = []
    with tc.engine_threads(threads=effective_threads,
                           deterministic=deterministic):
        for trial in range(trials + 1):  # first pass is the untimed warm-up
            start = time.perf_counter()
            if include_preprocess:
                current = preprocess(image_path, bundle.config.input_height)
            else:
                current = image
            run_layers(bundle, current)
            elapsed_ms = (time.perf_counter() - start) * 1000.0
            if trial > 0:
                timings.append(elapsed_ms)

    counts = count_params(bundle.config)
    return BenchmarkReport.from_timings(
        model=bundle.config.name,
        trials_ms=timings,
        input=image.dims,
        backend="native",
        threads=effective_threads,
        trainsets=trainsets,
        params=counts.total,
        flops=count_flops(bundle.config, (image.dims[1], image.dims[2])),
    )


def perf_ratio(precision: float, mean_runtime_ms: float) -> float:
    """Precision divided by mean runtime in seconds."""
    if not 0.0 <= precision <= 1.0:
        raise ValueError(f"precision must be in [0, 1], got {precision}")
    if mean_runtime_ms <= 0:
        raise ValueError(f"runtime must be positive, got {mean_runtime_ms}")
    return precision / (mean_runtime_ms / 1000.0)


def _ordinal(n: int) -> str:
    if 10 <= n % 100 <= 20:
        suffix = "th"
    else:
        suffix = {1: "st", 2: "nd", 3: "rd"}.get(n % 10, "th")
    return f"{n}{suffix}"


def emit_report(report: BenchmarkReport, format: str = "json") -> str:
    """Render a report: lossless JSON, or a trial-table markdown row."""
    if format == "json":
        obj = {key: getattr(report, key) for key in _JSON_KEYS}
        obj["trials_ms"] = list(report.trials_ms)
        obj["input"] = list(report.input)
        return json.dumps(obj, indent=2)
    if format == "markdown":
        headers = ["Classifier", "Trainsets"]
        headers += [f"{_ordinal(i + 1)} trial" for i in range(len(report.trials_ms))]
        headers.append("Average")
        cells = [report.model, report.trainsets or "-"]
        cells += [f"{t:.0f} ms" for t in report.trials_ms]
        if report.std_ms is None:
            cells.append(f"{report.mean_ms:.1f} ms")
        else:
            cells.append(f"{report.mean_ms:.1f} ± {report.std_ms:.1f} ms")
        lines = [
            "| " + " | ".join(headers) + " |",
            "|" + "---|" * len(headers),
            "| " + " | ".join(cells) + " |",
        ]
        return "\n".join(lines)
    raise ValueError(f"unknown report format {format!r}")


def parse_report(text: str) -> BenchmarkReport:
    """Inverse of emit_report(..., 'json')."""
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise MeladError(f"report is not valid JSON: {exc}") from exc
    missing = [key for key in _JSON_KEYS if key not in obj]
    if missing:
        raise MeladError(f"report is missing keys: {missing}")
    return BenchmarkReport(
        model=obj["model"],
        trials_ms=tuple(obj["trials_ms"]),
        mean_ms=obj["mean_ms"],
        std_ms=obj["std_ms"],
        input=tuple(obj["input"]),
        backend=obj["backend"],
        threads=obj["threads"],
        trainsets=obj["trainsets"],
        params=obj["params"],
        flops=obj["flops"],
        perf_ratio=obj["perf_ratio"],
    )
