"""Decoding-speed harness: scenario sweeps, step accounting, speedups and Pareto frontiers.

There is no GPU axis here.  Parallel capacity is represented by a thread
sweep over disjoint shards plus the ``decoder_invocations`` count, which
records how many sequential decoder passes a configuration needs.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
import platform
import statistics
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .corpus import gen_task
from .decoding import StepCounter
from .metrics import bleu, chrf

log = logging.getLogger(__name__)

DEFAULT_BATCH_SIZES = (1, 2, 4, 8, 16, 32, 64, 128)
DEFAULT_WARMUP = 3
DEFAULT_REPS = 5
HEADER_NOTE = ("CPU-only measurement; the GPU/CPU contrast is represented by decoder step counts "
               "and a thread sweep over disjoint shards")


@dataclass
class Scenario:
    batch_size: int = 1
    threads: int = 1
    mode: str = "batched"  # latency | batched
    repetitions: int = DEFAULT_REPS
    warmup: int = DEFAULT_WARMUP

    def __post_init__(self):
        if self.mode not in ("latency", "batched"):
            raise ValueError(f"unknown scenario mode {self.mode!r}")
        if self.mode == "latency":
            self.batch_size = 1
        if self.batch_size < 1 or self.threads < 1 or self.repetitions < 1 or self.warmup < 0:
            raise ValueError(f"invalid scenario {self}")

    @property
    def key(self) -> str:
        return f"b{self.batch_size}-t{self.threads}"


def sweep(batch_sizes: Sequence[int] = DEFAULT_BATCH_SIZES, threads: Sequence[int] = (1,),
          repetitions: int = DEFAULT_REPS, warmup: int = DEFAULT_WARMUP) -> list[Scenario]:
    return [Scenario(b, t, "latency" if b == 1 else "batched", repetitions, warmup)
            for t in threads for b in batch_sizes]


@dataclass
class CellResult:
    model: str
    scenario: Scenario
    wall_seconds: float | None = None
    rep_seconds: list[float] = field(default_factory=list)
    sentences_per_sec: float | None = None
    decoder_invocations: int | None = None
    n_sentences: int = 0
    n_outputs: int = 0
    mean_output_length: float | None = None
    bleu: float | None = None
    chrf: float | None = None
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None


@dataclass
class BenchReport:
    cells: list[CellResult]
    environment: dict
    baseline: str | None = None
    note: str = HEADER_NOTE

    def cell(self, model: str, batch_size: int, threads: int = 1) -> CellResult | None:
        for c in self.cells:
            if c.model == model and c.scenario.batch_size == batch_size and c.scenario.threads == threads:
                return c
        return None

    def models(self) -> list[str]:
        return list(dict.fromkeys(c.model for c in self.cells))

    def invocation_ratio(self, numerator: str, denominator: str, batch_size: int = 1, threads: int = 1) -> float | None:
        """Decoder-invocation ratio of two models in the same scenario."""
        a, b = self.cell(numerator, batch_size, threads), self.cell(denominator, batch_size, threads)
        if a is None or b is None or not (a.ok and b.ok) or not b.decoder_invocations:
            return None
        return a.decoder_invocations / b.decoder_invocations

    def invocation_ratios(self) -> dict[str, float]:
        """Every model's batch-1 invocation count relative to the baseline."""
        if self.baseline is None:
            return {}
        out = {}
        for m in self.models():
            r = self.invocation_ratio(m, self.baseline)
            if r is not None:
                out[m] = r
        return out

    def to_dict(self) -> dict:
        return {
            "note": self.note,
            "environment": self.environment,
            "baseline": self.baseline,
            "invocation_ratios": self.invocation_ratios(),
            "cells": [asdict(c) for c in self.cells],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "BenchReport":
        cells = []
        for c in d["cells"]:
            c = dict(c)
            c["scenario"] = Scenario(**c["scenario"])
            cells.append(CellResult(**c))
        return cls(cells, dict(d["environment"]), d.get("baseline"), d.get("note", HEADER_NOTE))


def environment_stamp(threads: Sequence[int] = (1,)) -> dict:
    from . import __version__

    cpu = platform.processor() or platform.machine()
    try:
        with open("/proc/cpuinfo") as fh:
            for line in fh:
                if line.startswith("model name"):
                    cpu = line.split(":", 1)[1].strip()
                    break
    except OSError:
        pass
    return {
        "cpu_model": cpu,
        "hardware_threads": os.cpu_count() or 1,
        "threads_swept": list(threads),
        "build_id": f"narlab-{__version__} numpy-{np.__version__} python-{platform.python_version()}",
        "platform": platform.platform(),
    }


def desk_dataset(n: int = 10_000, seed: int = 2024, **task_kw) -> tuple[list[str], list[list[str]]]:
    """Seeded lexicon-task sources and references for timing runs."""
    data = gen_task("lexicon", n_train=0, n_dev=0, n_test=n, seed=seed, **task_kw)
    return [p.src for p in data.test], data.test_refs


def _translate_sharded(model, sources: list[str], batch_size: int, threads: int):
    batches = [sources[i : i + batch_size] for i in range(0, len(sources), batch_size)]

    def run(chunk):
        outs, counter = [], StepCounter()
        for b in chunk:
            o, c = model.translate(b, batch_size=batch_size)
            outs.extend(o)
            counter = counter + c
        return outs, counter

    if threads == 1:
        return run(batches)
    # contiguous, batch-aligned shards so batching matches the single-thread run
    per = math.ceil(len(batches) / threads)
    shards = [batches[i : i + per] for i in range(0, len(batches), per)]
    with ThreadPoolExecutor(len(shards)) as pool:
        parts = list(pool.map(run, shards))
    outs = [o for p, _ in parts for o in p]
    counter = StepCounter()
    for _, c in parts:
        counter = counter + c
    return outs, counter


def run_cell(name: str, model, scenario: Scenario, sources: list[str], refs=None) -> CellResult:
    cell = CellResult(name, scenario, n_sentences=len(sources))
    try:
        bs = scenario.batch_size
        for i in range(scenario.warmup):
            chunk = sources[(i * bs) % len(sources) :][:bs]
            model.translate(chunk, batch_size=bs)
        outputs, counter = None, None
        for _ in range(scenario.repetitions):
            t0 = time.perf_counter()
            outputs, counter = _translate_sharded(model, sources, bs, scenario.threads)
            cell.rep_seconds.append(time.perf_counter() - t0)
    except Exception as err:  # a failed cell must not end the sweep
        cell.error = f"{type(err).__name__}: {err}"
        log.warning("cell %s %s failed: %s", name, scenario.key, cell.error)
        return cell
    cell.wall_seconds = statistics.median(cell.rep_seconds)
    cell.sentences_per_sec = len(sources) / cell.wall_seconds
    cell.decoder_invocations = counter.decoder_invocations
    cell.n_outputs = len(outputs)
    cell.mean_output_length = float(np.mean([len(o.split()) for o in outputs]))
    if refs is not None:
        cell.bleu = bleu(outputs, refs).score
        cell.chrf = chrf(outputs, refs).score
    return cell


def run_benchmark(models: Mapping[str, object], scenarios: Sequence[Scenario], sources: Sequence[str],
                  refs=None, baseline: str | None = None) -> BenchReport:
    """Time every (model, scenario) cell.

    ``models`` maps names to fitted translators exposing
    ``translate(sentences, batch_size) -> (outputs, StepCounter)``.
    """
    sources = list(sources)
    if not sources:
        raise ValueError("empty benchmark dataset")
    if baseline is not None and baseline not in models:
        raise ValueError(f"baseline {baseline!r} is not among the models")
    cells = [run_cell(name, m, sc, sources, refs) for name, m in models.items() for sc in scenarios]
    threads = sorted({sc.threads for sc in scenarios})
    return BenchReport(cells, environment_stamp(threads), baseline)


@dataclass
class SpeedupRow:
    model: str
    scenario: str
    seconds: float | None
    baseline_seconds: float | None
    speedup: float | None
    status: str = "ok"


def speedup_table(report: BenchReport, baseline_model: str) -> list[SpeedupRow]:
    """Baseline time / model time per scenario, with absolute times alongside."""
    if baseline_model not in report.models():
        raise ValueError(f"baseline {baseline_model!r} not in report")
    rows = []
    for c in report.cells:
        base = report.cell(baseline_model, c.scenario.batch_size, c.scenario.threads)
        if not c.ok or base is None or not base.ok:
            rows.append(SpeedupRow(c.model, c.scenario.key, c.wall_seconds,
                                   base.wall_seconds if base is not None else None, None, "missing"))
            continue
        rows.append(SpeedupRow(c.model, c.scenario.key, c.wall_seconds, base.wall_seconds,
                               1.0 if c.model == baseline_model else base.wall_seconds / c.wall_seconds))
    return rows


def pareto_frontier(points: Sequence[tuple[float, float]]) -> list[tuple[float, float]]:
    """Non-dominated ``(quality, time)`` points, ordered by time (stable).

    ``q`` dominates ``p`` when it is at least as good on both axes (higher
    quality, lower time) and strictly better on one.
    """
    if not points:
        raise ValueError("need at least one point")
    order = sorted(range(len(points)), key=lambda i: (points[i][1], -points[i][0]))
    keep = []
    best_q = -math.inf
    best_t = None
    for i in order:
        q, t = points[i]
        if q > best_q:
            keep.append(i)
            best_q, best_t = q, t
        elif q == best_q and t == best_t:
            keep.append(i)  # exact duplicates do not dominate each other
    keep.sort(key=lambda i: (points[i][1], i))
    return [points[i] for i in keep]


def emit_report(report: BenchReport, out_dir: str | Path, formats: Sequence[str] = ("json", "csv", "plotdata"),
                stem: str = "report") -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for fmt in formats:
        if fmt == "json":
            p = out / f"{stem}.json"
            p.write_text(json.dumps(report.to_dict(), indent=1))
        elif fmt == "csv":
            p = out / f"{stem}.csv"
            with open(p, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["model", "batch_size", "threads", "wall_seconds", "sentences_per_sec",
                            "decoder_invocations", "bleu", "chrf"])
                for c in report.cells:
                    if c.ok:
                        w.writerow([c.model, c.scenario.batch_size, c.scenario.threads, c.wall_seconds,
                                    c.sentences_per_sec, c.decoder_invocations, c.bleu, c.chrf])
        elif fmt == "plotdata":
            p = out / f"{stem}.dat"
            lines = [f"# {report.note}", "# batch_size seconds"]
            for model in report.models():
                for th in sorted({c.scenario.threads for c in report.cells if c.model == model}):
                    lines.append(f'\n\n"{model} threads={th}"')
                    cells = sorted((c for c in report.cells if c.model == model and c.scenario.threads == th),
                                   key=lambda c: c.scenario.batch_size)
                    for c in cells:
                        lines.append(f"{c.scenario.batch_size} {c.wall_seconds if c.ok else 'NaN'}")
            p.write_text("\n".join(lines) + "\n")
        else:
            raise ValueError(f"unknown report format {fmt!r}")
        written.append(p)
    return written


def load_report(path: str | Path) -> BenchReport:
    return BenchReport.from_dict(json.loads(Path(path).read_text()))
