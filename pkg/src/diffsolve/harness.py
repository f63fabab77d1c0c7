"""Evaluation metrics, experiment harness, and result files.

Gap conventions make "lower is better" for both tasks: TSP gap is the
relative excess tour length over the reference, MIS gap is the relative
shortfall in set size. Every reported solution is re-validated against its
instance before it counts.

Result files are deterministic CSV (no wall-clock columns), so identical
seeds reproduce them byte for byte; timing is reported on the console.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np

from .decoding import multi_sample_solve, objective
from .denoiser import DenoiserParams
from .diffusion import NoiseSchedule, make_inference_schedule
from .instances import (IndependentSet, MisInstance, SparseGraph, Tour,
                        TspInstance, dense_graph, mis_graph, sparsify)


def gap_tsp(pred_length: float, ref_length: float) -> float:
    """Percent excess tour length over the reference (lower is better)."""
    if ref_length <= 0:
        raise ValueError(f"reference length must be positive, got {ref_length}")
    return (pred_length - ref_length) / ref_length * 100.0


def gap_mis(pred_size: float, ref_size: float) -> float:
    """Percent shortfall in set size versus the reference (lower is better)."""
    if ref_size <= 0:
        raise ValueError(f"reference size must be positive, got {ref_size}")
    return (ref_size - pred_size) / ref_size * 100.0


@dataclass
class EvalRecord:
    instance_id: str
    seed: int
    value: float          # tour length or set size
    gap: Optional[float]  # percent, None without a reference label
    seconds: float


@dataclass
class EvalReport:
    task: str
    records: list[EvalRecord] = field(default_factory=list)

    @property
    def mean_value(self) -> float:
        return float(np.mean([r.value for r in self.records]))

    @property
    def mean_gap(self) -> Optional[float]:
        gaps = [r.gap for r in self.records if r.gap is not None]
        return float(np.mean(gaps)) if gaps else None

    @property
    def total_seconds(self) -> float:
        return float(sum(r.seconds for r in self.records))

    def summary(self) -> str:
        name = "length" if self.task == "tsp" else "size"
        gap = self.mean_gap
        gap_text = f"{gap:.4f}%" if gap is not None else "n/a"
        return (f"instances={len(self.records)} mean_{name}={self.mean_value:.6f} "
                f"mean_gap={gap_text} total_time={self.total_seconds:.2f}s")


Solver = Callable[[Union[TspInstance, MisInstance], int],
                  Union[Tour, IndependentSet]]


def reference_value(instance: Union[TspInstance, MisInstance]
                    ) -> Optional[float]:
    if instance.label is None:
        return None
    if isinstance(instance, TspInstance):
        return instance.label.length
    return float(instance.label.size)


def evaluate(solver: Solver, instances: list, task: str,
             seeds: tuple[int, ...] = (0,)) -> EvalReport:
    """Solve every instance for every seed, validate, and compute metrics.

    ``solver(instance, seed)`` must return a Tour or IndependentSet. Any
    infeasible solution aborts the evaluation naming the instance.
    """
    report = EvalReport(task=task)
    for seed in seeds:
        for instance in instances:
            tic = time.perf_counter()
            solution = solver(instance, seed)
            seconds = time.perf_counter() - tic
            try:
                solution.validate(instance)
            except ValueError as exc:
                raise RuntimeError(
                    f"infeasible solution for instance {instance.id!r}: {exc}"
                ) from exc
            if isinstance(solution, Tour):
                value = solution.length
                ref = reference_value(instance)
                gap = gap_tsp(value, ref) if ref is not None else None
            else:
                value = float(solution.size)
                ref = reference_value(instance)
                gap = gap_mis(value, ref) if ref is not None else None
            report.records.append(EvalRecord(
                instance_id=instance.id, seed=seed, value=value, gap=gap,
                seconds=seconds))
    return report


@dataclass
class DecodeConfig:
    steps: int = 50
    samples: int = 1
    schedule: str = "cosine"
    two_opt: bool = True
    knn: int = 0
    cont_mode: str = "ddim"


def model_solver(params: DenoiserParams, sched: NoiseSchedule,
                 config: DecodeConfig) -> Solver:
    """Wrap a trained model as an evaluate()-compatible solver."""
    inf_sched = make_inference_schedule(config.steps, sched.T, config.schedule)
    graphs: dict[int, SparseGraph] = {}

    def solve(instance, seed):
        key = id(instance)
        if key not in graphs:
            if isinstance(instance, TspInstance):
                graphs[key] = (dense_graph(instance) if config.knn <= 0
                               else sparsify(instance, config.knn))
            else:
                graphs[key] = mis_graph(instance)
        use_2opt = config.two_opt and isinstance(instance, TspInstance)
        best, _ = multi_sample_solve(
            params, instance, sched, inf_sched, config.samples, seed,
            use_two_opt=use_2opt, graph=graphs[key],
            cont_mode=config.cont_mode)
        return best

    return solve


def sweep_grid(params: DenoiserParams, sched: NoiseSchedule, instances: list,
               task: str, steps_list: list[int], samples_list: list[int],
               base_config: DecodeConfig, seed: int = 0) -> list[dict]:
    """Mean gap for every (steps, samples) cell; rows in grid order."""
    rows = []
    for steps in steps_list:
        for samples in samples_list:
            cfg = DecodeConfig(steps=steps, samples=samples,
                               schedule=base_config.schedule,
                               two_opt=base_config.two_opt,
                               knn=base_config.knn,
                               cont_mode=base_config.cont_mode)
            report = evaluate(model_solver(params, sched, cfg), instances,
                              task, seeds=(seed,))
            rows.append({
                "steps": steps,
                "samples": samples,
                "mean_value": report.mean_value,
                "mean_gap": report.mean_gap,
            })
    return rows


# ---------------------------------------------------------------------------
# files


def _num(x: float) -> str:
    return repr(float(x))


def write_report(path, report: EvalReport) -> None:
    """Deterministic per-instance CSV: id, seed, value, gap."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("id,seed,value,gap\n")
        for r in report.records:
            gap = _num(r.gap) if r.gap is not None else ""
            fh.write(f"{r.instance_id},{r.seed},{_num(r.value)},{gap}\n")


def write_sweep(path, rows: list[dict]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("steps,samples,mean_value,mean_gap\n")
        for row in rows:
            gap = _num(row["mean_gap"]) if row["mean_gap"] is not None else ""
            fh.write(f"{row['steps']},{row['samples']},"
                     f"{_num(row['mean_value'])},{gap}\n")


def emit_plot_data(report_or_rows, path) -> None:
    """Long-form CSV (x, series, value) consumable by any plotting tool.

    Sweep rows plot mean gap against diffusion steps with one series per
    sample count; an EvalReport plots per-record values and gaps.
    """
    lines = ["x,series,value"]
    if isinstance(report_or_rows, EvalReport):
        for i, r in enumerate(report_or_rows.records):
            lines.append(f"{i},value,{_num(r.value)}")
            if r.gap is not None:
                lines.append(f"{i},gap,{_num(r.gap)}")
    else:
        for row in report_or_rows:
            value = row["mean_gap"] if row["mean_gap"] is not None \
                else row["mean_value"]
            lines.append(f"{row['steps']},samples={row['samples']},{_num(value)}")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def write_solutions(path, ids: list[str], solutions: list) -> None:
    """One line per instance: ``id <objective> <indices...>``."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for ident, sol in zip(ids, solutions):
            if isinstance(sol, Tour):
                body = " ".join(str(i) for i in sol.order)
                fh.write(f"{ident} {_num(sol.length)} {body}\n")
            else:
                body = " ".join(str(i) for i in sorted(sol.nodes))
                fh.write(f"{ident} {sol.size} {body}\n")


def write_heatmap(path, ids: list[str], heatmaps: list, graphs: list) -> None:
    """Per instance: an ``id`` line, then ``i j score`` (TSP) or ``i score``
    (MIS) lines."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for ident, hm, graph in zip(ids, heatmaps, graphs):
            fh.write(f"{ident}\n")
            if hm.task == "tsp":
                for e in range(graph.n_edges):
                    fh.write(f"{int(graph.src[e])} {int(graph.dst[e])} "
                             f"{_num(hm.scores[e])}\n")
            else:
                for v in range(hm.scores.shape[0]):
                    fh.write(f"{v} {_num(hm.scores[v])}\n")
