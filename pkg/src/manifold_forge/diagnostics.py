"""Junction-condition residuals across interfaces and convergence tables.

A C1 metric must have continuous intrinsic components and opposing
extrinsic curvatures on every interface.  This module measures how far a
sampled stage field is from that: the intrinsic metric jump and the
extrinsic curvature jump, as L2 norms over the interface grid points.
Norms follow the convention of averaging the squared intrinsic tensor
components over all grid points on all interface surfaces and taking the
square root; grid points are weighted uniformly and every interface is
counted once.

convergence_report packages repeated builds over a resolution list into
a CSV table for plotting and regression checks.
"""

import io
import time
from dataclasses import dataclass

import numpy as np

from .c0_metric import DEFAULT_PARTITION, MetricField, PartitionParams
from .c1_pipeline import (
    StageError,
    _all_face_curvatures,
    _face_restrict,
    _sym_matrices,
    build_c1_metric,
    inplane_axes,
    map_face_values,
)
from .multicube_core import MulticubeStructure
from .spectral_solver import ResolutionError

CSV_HEADER = ("manifold,N,stage,metric_jump_l2,extrinsic_l2,"
              "wall_seconds,cache_hit")


@dataclass(frozen=True)
class InterfaceNorm:
    """Junction residuals of one interface (counted once per pair)."""

    source: tuple               # (region id, face label)
    target: tuple
    metric_jump: float          # L2 of the intrinsic metric discontinuity
    extrinsic: float            # L2 of the intrinsic extrinsic curvature
    points: int


@dataclass(frozen=True)
class DiagnosticsReport:
    """Per-interface and pooled junction residuals of one stage field."""

    manifold: str
    stage: str
    N: int
    interfaces: tuple
    metric_jump_l2: float
    extrinsic_l2: float

    def worst_interface(self) -> InterfaceNorm:
        return max(self.interfaces,
                   key=lambda e: max(e.metric_jump, e.extrinsic))


def _intrinsic_block_sumsq(J: np.ndarray, label: str) -> float:
    """Sum of squared intrinsic components of a face tensor array."""
    u, v = inplane_axes(label)
    total = 0.0
    for a in (u, v):
        for b in (u, v):
            total += float(np.sum(J[..., a, b] ** 2))
    return total


def junction_report(structure: MulticubeStructure, field: MetricField,
                    manifold: str | None = None) -> DiagnosticsReport:
    """Measure both junction residuals of a sampled metric stage.

    The metric residual is a true discontinuity: source-side face values
    are carried through the face map (grid resampling plus the
    signed-permutation conjugation) and subtracted on the target grid.
    The curvature residual is the norm of the face extrinsic curvature
    itself, pooled over both sides of the interface; the refinement
    drives each side's curvature to zero, so any remainder violates the
    junction condition directly.  Only intrinsic (in-plane) components
    enter either norm; the remaining components are chart gauge.
    """
    if not field.is_metric:
        raise ValueError("junction diagnostics need a metric stage field")
    N = field.N
    curvatures = {rid: _all_face_curvatures(field, rid)
                  for rid in structure.region_ids}
    face_metrics = {
        (rid, label): _sym_matrices(
            _face_restrict(field.data[rid], label, N, 1))
        for rid in structure.region_ids
        for label in curvatures[rid]}

    entries = []
    pooled_g = pooled_k = 0.0
    pooled_points = 0
    for key in sorted(structure.faces):
        m = structure.faces[key]
        if m.target < m.source:
            continue
        M = m.rotation.matrix.astype(float)
        tgt_label = m.target[1]

        g_src = map_face_values(face_metrics[m.source], m, N)
        g_jump = np.einsum("pc,...cd,qd->...pq", M, g_src, M) \
            - face_metrics[m.target]
        sum_g = _intrinsic_block_sumsq(g_jump, tgt_label)

        sum_k = _intrinsic_block_sumsq(
            curvatures[m.source[0]][m.source[1]].K, m.source[1])
        k_sides = 1
        if m.source != m.target:
            sum_k += _intrinsic_block_sumsq(
                curvatures[m.target[0]][tgt_label].K, tgt_label)
            k_sides = 2

        points = N * N
        entries.append(InterfaceNorm(
            m.source, m.target,
            float(np.sqrt(sum_g / points)),
            float(np.sqrt(sum_k / (k_sides * points))),
            points))
        pooled_g += sum_g
        pooled_k += sum_k / k_sides
        pooled_points += points

    return DiagnosticsReport(
        manifold=manifold if manifold is not None else structure.name,
        stage=field.stage,
        N=N,
        interfaces=tuple(entries),
        metric_jump_l2=float(np.sqrt(pooled_g / pooled_points)),
        extrinsic_l2=float(np.sqrt(pooled_k / pooled_points)),
    )


def metric_jump_l2(structure: MulticubeStructure,
                   field: MetricField) -> float:
    """Pooled L2 of the intrinsic metric discontinuity, all interfaces."""
    return junction_report(structure, field).metric_jump_l2


def extrinsic_l2(structure: MulticubeStructure,
                 field: MetricField) -> float:
    """Pooled L2 of the extrinsic curvature discontinuity, all interfaces."""
    return junction_report(structure, field).extrinsic_l2


def loglog_slope(N_values, norms) -> float:
    """Least-squares slope of log(norm) against log(N).

    Informational fit used by the convergence tooling; pairs with a
    non-positive norm are skipped (they carry no slope information).
    """
    xs, ys = [], []
    for n, r in zip(N_values, norms):
        if r > 0:
            xs.append(np.log(float(n)))
            ys.append(np.log(float(r)))
    if len(xs) < 2:
        raise ValueError("need at least two positive samples for a slope")
    return float(np.polyfit(xs, ys, 1)[0])


def convergence_report(
    structure: MulticubeStructure,
    N_values,
    params: PartitionParams = DEFAULT_PARTITION,
    *,
    stages: str = "full",
    manifold: str | None = None,
    cache_directory=None,
    use_cache: bool = True,
    allow_huge: bool = False,
    smooth_gauge: bool = True,
) -> str:
    """Build the pipeline at each N and tabulate junction residuals.

    Returns CSV text with header manifold,N,stage,metric_jump_l2,
    extrinsic_l2,wall_seconds,cache_hit.  Numbers use shortest
    round-trip formatting.  A failing resolution contributes a row with
    "error" in the norm columns (the stage column names the failing
    stage) and the run continues with the next N.
    """
    name = manifold if manifold is not None else structure.name
    out = io.StringIO()
    out.write(CSV_HEADER + "\n")
    for N in N_values:
        t0 = time.perf_counter()
        try:
            build = build_c1_metric(
                structure, int(N), params, stages=stages,
                cache_directory=cache_directory, use_cache=use_cache,
                allow_huge=allow_huge, smooth_gauge=smooth_gauge)
            report = junction_report(structure, build.final, name)
            wall = time.perf_counter() - t0
            hits = build.cache_hits
            if hits:
                cache = "true" if all(hits.values()) else "false"
            else:
                cache = ""
            out.write(f"{name},{int(N)},{report.stage},"
                      f"{report.metric_jump_l2!r},{report.extrinsic_l2!r},"
                      f"{wall!r},{cache}\n")
        except StageError as exc:
            wall = time.perf_counter() - t0
            out.write(f"{name},{int(N)},{exc.stage},error,error,"
                      f"{wall!r},\n")
        except ResolutionError:
            # a refused size should not abort the rest of the sweep
            wall = time.perf_counter() - t0
            out.write(f"{name},{int(N)},refused,error,error,{wall!r},\n")
    return out.getvalue()
