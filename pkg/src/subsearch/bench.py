"""Evaluation harness and solved-over-time curves."""

from __future__ import annotations

import csv
import io
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Optional, Sequence

from .graph import LabeledGraph, read_graph
from .model import NeuralPolicy, PolicyNet
from .search import DegreePolicy, RandomPolicy, SearchBudget, solve

log = logging.getLogger(__name__)

EVAL_HEADER = ["pair_id", "query_file", "policy", "solved", "first_ms", "num_solutions", "steps"]
CURVE_HEADER = ["t_seconds", "solved_cumulative"]
POLICIES = ("random", "degree", "neural")

# In step-limit mode the reported first-solution time is the step index at which the
# first match appeared, in units of this many milliseconds, so reruns are byte-identical.
VIRTUAL_MS_PER_STEP = 1.0


@dataclass(frozen=True)
class EvalRecord:
    pair_id: int
    query_file: str
    policy: str
    solved: bool
    first_ms: Optional[float]
    num_solutions: int
    steps: int
    error: Optional[str] = None

    def __post_init__(self):
        if self.solved != (self.num_solutions >= 1):
            raise ValueError("solved must agree with num_solutions")
        if (self.first_ms is not None) != self.solved:
            raise ValueError("first_ms is present exactly when solved")


@dataclass(frozen=True)
class CurvePoint:
    t_seconds: float
    solved_cumulative: int


@dataclass(frozen=True)
class EvalJob:
    pair_id: int
    query_path: str
    target_path: str
    policy: str
    seed: int
    time_limit: float
    step_limit: int
    solution_cap: Optional[int]
    restart_threshold: int
    restart_budget: int
    restarts: bool
    model_text: Optional[str]


_TARGETS: dict[str, LabeledGraph] = {}
_MODELS: dict[int, PolicyNet] = {}


def _target(path: str) -> LabeledGraph:
    g = _TARGETS.get(path)
    if g is None:
        g = _TARGETS[path] = read_graph(path)
    return g


def make_policy(name: str, seed: int, net: Optional[PolicyNet] = None):
    if name == "random":
        return RandomPolicy(seed)
    if name == "degree":
        return DegreePolicy()
    if name == "neural":
        if net is None:
            raise ValueError("neural policy needs a model")
        return NeuralPolicy(net)
    raise ValueError(f"unknown policy {name!r}")


def pair_seed(seed: int, pair_id: int) -> int:
    return seed * 1_000_003 + pair_id


def run_pair(job: EvalJob) -> EvalRecord:
    """One pair; any failure becomes an unsolved record carrying the error text."""
    name = os.path.basename(job.query_path)
    try:
        net = None
        if job.policy == "neural":
            if job.model_text is None:
                raise ValueError("neural policy needs --model")
            key = hash(job.model_text)
            net = _MODELS.get(key)
            if net is None:
                net = _MODELS[key] = PolicyNet.from_text(job.model_text)
        q = read_graph(job.query_path)
        G = _target(job.target_path)
        budget = SearchBudget(
            time_limit=job.time_limit,
            step_limit=job.step_limit,
            solution_cap=job.solution_cap,
            restart_threshold=job.restart_threshold,
            restart_budget=job.restart_budget,
        )
        out = solve(q, G, make_policy(job.policy, pair_seed(job.seed, job.pair_id), net), budget, restarts=job.restarts)
    except Exception as e:  # isolation: one bad pair must not hide the others
        log.warning("pair %d (%s) failed: %s", job.pair_id, name, e)
        return EvalRecord(job.pair_id, name, job.policy, False, None, 0, 0, error=f"{type(e).__name__}: {e}")
    first = None
    if out.solved:
        if job.time_limit > 0:
            first = round(out.first_solution_ms, 3)
        else:
            first = out.first_solution_step * VIRTUAL_MS_PER_STEP
    return EvalRecord(job.pair_id, name, job.policy, out.solved, first, len(out.matches), out.steps)


def list_queries(query_dir) -> list[str]:
    d = Path(query_dir)
    if not d.is_dir():
        raise FileNotFoundError(f"query directory not found: {query_dir}")
    return sorted(str(p) for p in d.iterdir() if p.suffix == ".graph")


def iter_eval_harness(
    query_paths: Sequence[str],
    target_path: str,
    policy: str,
    *,
    time_limit: float = 0.0,
    step_limit: int = 0,
    solution_cap: Optional[int] = None,
    seed: int = 0,
    model_text: Optional[str] = None,
    restart_threshold: int = 10,
    restart_budget: int = 120,
    restarts: bool = True,
    workers: int = 1,
) -> Iterator[EvalRecord]:
    """Yields records in pair-id order as they become available."""
    if policy not in POLICIES:
        raise ValueError(f"unknown policy {policy!r}")
    jobs = [
        EvalJob(i, str(p), str(target_path), policy, seed, time_limit, step_limit, solution_cap,
                restart_threshold, restart_budget, restarts, model_text)
        for i, p in enumerate(query_paths)
    ]
    if workers <= 1:
        for job in jobs:
            yield run_pair(job)
        return
    with ProcessPoolExecutor(max_workers=workers) as pool:
        yield from pool.map(run_pair, jobs)


def run_eval_harness(query_paths, target_path, policy, **kwargs) -> list[EvalRecord]:
    return list(iter_eval_harness(query_paths, target_path, policy, **kwargs))


# --- CSV ------------------------------------------------------------------------------------


def _num(x: float) -> str:
    return repr(float(x))


def record_row(r: EvalRecord) -> list[str]:
    first = "" if r.first_ms is None else _num(r.first_ms)
    return [str(r.pair_id), r.query_file, r.policy, "1" if r.solved else "0", first, str(r.num_solutions), str(r.steps)]


def write_eval_csv(records: Iterable[EvalRecord], fh) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(EVAL_HEADER)
    for r in records:
        w.writerow(record_row(r))
        fh.flush()


def read_eval_csv(fh) -> list[EvalRecord]:
    rows = list(csv.reader(fh))
    if not rows or rows[0] != EVAL_HEADER:
        raise ValueError("not an eval CSV (header mismatch)")
    out = []
    for row in rows[1:]:
        pid, qf, pol, solved, first, num, steps = row
        out.append(EvalRecord(int(pid), qf, pol, solved == "1", float(first) if first else None, int(num), int(steps)))
    return out


def eval_csv_text(records: Iterable[EvalRecord]) -> str:
    buf = io.StringIO()
    write_eval_csv(records, buf)
    return buf.getvalue()


# --- curves ----------------------------------------------------------------------------------


def aggregate_curves(
    records: Sequence[EvalRecord], bucket: float, horizon: Optional[float] = None
) -> list[CurvePoint]:
    """Cumulative solved count at bucket edges ``bucket, 2*bucket, ...`` up to ``horizon``.

    Without a horizon the curve ends at the first edge covering the slowest solve.
    """
    if bucket <= 0:
        raise ValueError("bucket must be positive")
    times = sorted(r.first_ms / 1000.0 for r in records if r.solved)
    if horizon is None:
        horizon = times[-1] if times else bucket
    n = max(1, math.ceil(horizon / bucket - 1e-12))
    points = []
    j = 0
    for i in range(1, n + 1):
        edge = i * bucket
        while j < len(times) and times[j] <= edge + 1e-12:
            j += 1
        points.append(CurvePoint(round(edge, 9), j))
    return points


def write_curves_csv(points: Iterable[CurvePoint], fh) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(CURVE_HEADER)
    for p in points:
        w.writerow([_num(p.t_seconds), str(p.solved_cumulative)])
