"""Command line front end.

Subcommands cover the whole workflow: convert a triangulation, validate
a structure, build the staged reference metric, measure junction
residuals, run convergence sweeps, and manage the catalog and the
factorization cache.

Exit codes: 0 success, 1 usage problems, 2 validation or compatibility
failure, 3 numerical failure (the failing stage is named on stderr).
"""

import fnmatch
import hashlib
import json
import os
import pathlib
import struct
import sys
import time

import click
import numpy as np

from . import catalog
from .c0_metric import (COMPONENT_ORDER, DegenerateCornerError, MetricField,
                        PartitionParams)
from .c1_pipeline import C1Metric, StageError, build_c1_metric
from .diagnostics import CSV_HEADER, convergence_report, junction_report
from .multicube_core import MulticubeStructure, StructuralInconsistencyError
from .spectral_solver import CacheError, ResolutionError, cache_dir
from .triangulation_ingest import (TriangulationError, check_compatibility,
                                   layout_regions, load_triangulation,
                                   subdivide_to_multicube)

MCM_MAGIC = b"MCM1"


# -- metric file format ------------------------------------------------------
# Binary container: 4-byte magic, little-endian uint64 manifest length,
# UTF-8 JSON manifest, then raw float64 little-endian blocks.  One block
# per region per stage, component index slowest, x index fastest.  The
# manifest embeds the structure so a metric file is self-describing.

def write_metric_file(path, structure: MulticubeStructure, build: C1Metric):
    stages = [s for s in ("c0", "conformal", "gauge", "flattened")
              if s in build.stages]
    chunks = []
    blocks = []
    offset = 0
    for stage in stages:
        field = build.stages[stage]
        for rid in structure.region_ids:
            arr = np.ascontiguousarray(
                field.data[rid].transpose(0, 3, 2, 1)).astype("<f8")
            raw = arr.tobytes()
            blocks.append({
                "stage": stage,
                "region": rid,
                "offset": offset,
                "length": len(raw),
                "sha256": hashlib.sha256(raw).hexdigest(),
            })
            chunks.append(raw)
            offset += len(raw)
    manifest = {
        "format": "multicube-metric",
        "version": 1,
        "manifold": structure.name,
        "N": build.N,
        "L": structure.L,
        "stages": stages,
        "component_order": list(COMPONENT_ORDER),
        "layout": "component,z,y,x",
        "dtype": "<f8",
        "region_ids": list(structure.region_ids),
        "partition": {"k": build.params.k, "ell": build.params.ell},
        "structure": json.loads(structure.to_json()),
        "blocks": blocks,
    }
    payload = json.dumps(manifest, sort_keys=True,
                         separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(MCM_MAGIC)
        fh.write(struct.pack("<Q", len(payload)))
        fh.write(payload)
        for raw in chunks:
            fh.write(raw)


def read_metric_file(path):
    """Returns (structure, manifest, {stage: MetricField})."""
    with open(path, "rb") as fh:
        if fh.read(4) != MCM_MAGIC:
            raise ValueError(f"{path}: not a metric file (bad magic)")
        (mlen,) = struct.unpack("<Q", fh.read(8))
        manifest = json.loads(fh.read(mlen).decode())
        data_start = fh.tell()
        structure = MulticubeStructure.from_json(
            json.dumps(manifest["structure"]))
        N = int(manifest["N"])
        data = {stage: {} for stage in manifest["stages"]}
        for b in manifest["blocks"]:
            fh.seek(data_start + b["offset"])
            raw = fh.read(b["length"])
            if hashlib.sha256(raw).hexdigest() != b["sha256"]:
                raise ValueError(
                    f"{path}: checksum mismatch in block "
                    f"{b['stage']}/{b['region']}")
            arr = np.frombuffer(raw, dtype="<f8").reshape(6, N, N, N)
            data[b["stage"]][b["region"]] = np.ascontiguousarray(
                arr.transpose(0, 3, 2, 1))
    fields = {stage: MetricField(stage, N, float(manifest["L"]), blocks)
              for stage, blocks in data.items()}
    return structure, manifest, fields


# -- shared option plumbing --------------------------------------------------

def _load_structure(structure_file, catalog_name) -> MulticubeStructure:
    if (structure_file is None) == (catalog_name is None):
        raise click.UsageError(
            "give exactly one structure source: a file argument "
            "or --catalog NAME")
    if catalog_name is not None:
        try:
            return catalog.get(catalog_name).structure
        except LookupError as exc:
            raise click.UsageError(str(exc))
    return MulticubeStructure.from_json(
        pathlib.Path(structure_file).read_text())


def _parse_resolution(value: str):
    try:
        ns = [int(p) for p in value.split(",") if p.strip()]
    except ValueError:
        raise click.UsageError(f"bad resolution list {value!r}")
    if not ns:
        raise click.UsageError("empty resolution list")
    for n in ns:
        if n < 6:
            raise click.UsageError(f"N={n} too small; need N >= 6")
    return ns


def _partition(k: int, ell: int) -> PartitionParams:
    if k < 1 or ell < 1:
        raise click.UsageError("partition exponents k and l must be >= 1")
    return PartitionParams(k=k, ell=ell)


def _write_text(output, text: str, what: str):
    if output is None:
        click.echo(text, nl=False)
    else:
        pathlib.Path(output).write_text(text)
        click.echo(f"wrote {what} to {output}")


_structure_arg = click.argument(
    "structure_file", required=False, metavar="[STRUCTURE.json]",
    type=click.Path(exists=True, dir_okay=False))
_catalog_opt = click.option(
    "--catalog", "catalog_name", metavar="NAME",
    help="use a built-in structure instead of a file")
_cache_opt = click.option(
    "--cache-dir", "cache_directory", type=click.Path(file_okay=False),
    default=None, help="factorization cache directory "
    "(default: MCUBE_CACHE_DIR or ~/.cache/manifold-forge)")
_stage_opt = click.option(
    "--stages", type=click.Choice(["c0", "conformal", "gauge", "full"]),
    default="full", show_default=True,
    help="stop the refinement after this stage")
_partition_opts = (
    click.option("--k", type=int, default=2, show_default=True,
                 help="partition profile flatness exponent"),
    click.option("--l", "ell", type=int, default=3, show_default=True,
                 help="partition profile falloff exponent"),
)
_jobs_opt = click.option(
    "--jobs", type=int, default=1, show_default=True,
    help="upper bound on worker count (solves are sequential today)")


def _add_options(opts):
    def wrap(fn):
        for opt in reversed(opts):
            fn = opt(fn)
        return fn
    return wrap


@click.group(name="manifold-forge")
@click.version_option(package_name="manifold-forge")
def cli():
    """Construct and check C1 reference metrics on multicube manifolds."""


# -- convert -----------------------------------------------------------------

@cli.command()
@click.argument("triangulation", type=click.Path(exists=True, dir_okay=False))
@click.option("-o", "--output", required=True, type=click.Path(dir_okay=False),
              help="structure JSON destination")
@click.option("--force", is_flag=True,
              help="write the structure even if compatibility checks fail")
@click.option("--size", "cube_size", type=float, default=1.0,
              show_default=True,
              help="coordinate size of the subdivided cubes")
def convert(triangulation, output, force, cube_size):
    """Convert a tetrahedral triangulation to a multicube structure."""
    tri = load_triangulation(triangulation)
    structure = layout_regions(subdivide_to_multicube(tri, cube_size))
    if not structure.name:
        structure = MulticubeStructure(
            structure.L, structure.regions.items(),
            structure.faces.values(),
            name=pathlib.Path(triangulation).stem)
    report = structure.validate()
    comp = check_compatibility(structure)
    ok = report.valid and comp.passed
    if ok or force:
        pathlib.Path(output).write_text(structure.to_json())
        click.echo(f"wrote {len(structure.regions)} regions to {output}")
    if not ok:
        for code, message in report.findings:
            click.echo(f"structure: {code}: {message}", err=True)
        for message in comp.failures():
            click.echo(f"compatibility: {message}", err=True)
        sys.exit(2)


# -- validate ----------------------------------------------------------------

@cli.command()
@_structure_arg
@_catalog_opt
def validate(structure_file, catalog_name):
    """Run structural and compatibility checks, report JSON to stdout."""
    structure = _load_structure(structure_file, catalog_name)
    report = structure.validate()
    comp = check_compatibility(structure)
    ok = report.valid and comp.passed
    out = {
        "manifold": structure.name,
        "regions": len(structure.regions),
        "structural": report.to_dict(),
        "compatibility": comp.to_json(),
        "valid": ok,
    }
    click.echo(json.dumps(out, indent=2, sort_keys=True))
    if not ok:
        sys.exit(2)


# -- build -------------------------------------------------------------------

@cli.command()
@_structure_arg
@_catalog_opt
@click.option("-N", "--resolution", "n", type=int, required=True,
              help="collocation nodes per cube edge (>= 6)")
@_add_options(_partition_opts)
@_stage_opt
@click.option("-o", "--output", required=True, type=click.Path(dir_okay=False),
              help="metric file destination (.mcm)")
@_cache_opt
@click.option("--no-cache", is_flag=True, help="skip the on-disk LU cache")
@click.option("--allow-huge", is_flag=True,
              help="permit 3D solves beyond the default resolution cap")
@click.option("--simple-flatten-edges", is_flag=True,
              help="use plain zero edge data for the flattening gauge "
              "components instead of the smoothing solves")
@_jobs_opt
def build(structure_file, catalog_name, n, k, ell, stages, output,
          cache_directory, no_cache, allow_huge, simple_flatten_edges, jobs):
    """Build the staged reference metric and write a metric file."""
    if n < 6:
        raise click.UsageError(f"N={n} too small; need N >= 6")
    structure = _load_structure(structure_file, catalog_name)
    params = _partition(k, ell)
    result = build_c1_metric(
        structure, n, params, stages=stages,
        cache_directory=cache_directory, use_cache=not no_cache,
        allow_huge=allow_huge, smooth_gauge=not simple_flatten_edges)
    write_metric_file(output, structure, result)
    for stage in ("c0", "conformal", "gauge", "flattened"):
        if stage in result.timings:
            click.echo(f"{stage}: {result.timings[stage]:.3f} s")
    for dim in sorted(result.cache_hits):
        click.echo(
            f"factorization {dim}: "
            f"{'cache hit' if result.cache_hits[dim] else 'computed'} "
            f"({result.factor_seconds[dim]:.3f} s)")
    click.echo(f"wrote metric file {output}")


# -- diagnose ----------------------------------------------------------------

@cli.command()
@click.argument("metric_file", type=click.Path(exists=True, dir_okay=False))
@click.option("-o", "--output", type=click.Path(dir_okay=False), default=None,
              help="CSV destination (default: stdout)")
def diagnose(metric_file, output):
    """Measure junction residuals of every stage in a metric file."""
    structure, manifest, fields = read_metric_file(metric_file)
    lines = [CSV_HEADER]
    for stage in manifest["stages"]:
        t0 = time.perf_counter()
        rep = junction_report(structure, fields[stage])
        wall = time.perf_counter() - t0
        lines.append(f"{rep.manifold},{rep.N},{stage},"
                     f"{rep.metric_jump_l2!r},{rep.extrinsic_l2!r},"
                     f"{wall!r},")
    _write_text(output, "\n".join(lines) + "\n", "diagnostics")


# -- converge ----------------------------------------------------------------

@cli.command()
@_structure_arg
@_catalog_opt
@click.option("-N", "--resolutions", "n_list", required=True,
              metavar="N1,N2,...", help="comma separated resolution list")
@_add_options(_partition_opts)
@_stage_opt
@click.option("-o", "--output", type=click.Path(dir_okay=False), default=None,
              help="CSV destination (default: stdout)")
@_cache_opt
@click.option("--no-cache", is_flag=True, help="skip the on-disk LU cache")
@click.option("--allow-huge", is_flag=True,
              help="permit 3D solves beyond the default resolution cap")
@_jobs_opt
def converge(structure_file, catalog_name, n_list, k, ell, stages, output,
             cache_directory, no_cache, allow_huge, jobs):
    """Run build plus diagnostics over a resolution list, emit CSV."""
    structure = _load_structure(structure_file, catalog_name)
    ns = _parse_resolution(n_list)
    params = _partition(k, ell)
    text = convergence_report(
        structure, ns, params, stages=stages,
        cache_directory=cache_directory, use_cache=not no_cache,
        allow_huge=allow_huge)
    _write_text(output, text, "convergence report")


# -- catalog -----------------------------------------------------------------

@cli.group(name="catalog")
def catalog_group():
    """Inspect the built-in structure catalog."""


@catalog_group.command(name="list")
def catalog_list():
    """List catalog entries with region counts and geometry classes."""
    for name in catalog.list_names():
        entry = catalog.get(name)
        click.echo(f"{name:16s} regions={len(entry.structure.regions):3d} "
                   f"geometry={entry.geometry:6s} {entry.note}")


@catalog_group.command(name="export")
@click.argument("name")
@click.option("-o", "--output", type=click.Path(dir_okay=False), default=None,
              help="JSON destination (default: stdout)")
def catalog_export(name, output):
    """Write a catalog entry as structure JSON."""
    try:
        text = catalog.export(name)
    except LookupError as exc:
        raise click.UsageError(str(exc))
    _write_text(output, text if text.endswith("\n") else text + "\n",
                f"structure {name}")


# -- cache -------------------------------------------------------------------

@cli.group(name="cache")
def cache_group():
    """Inspect or clear the on-disk factorization cache."""


@cache_group.command(name="ls")
@_cache_opt
def cache_ls(cache_directory):
    """List cached factorizations."""
    directory = cache_dir(cache_directory)
    click.echo(directory)
    names = sorted(fnmatch.filter(os.listdir(directory), "bihar_*.lu"))
    for name in names:
        size = os.path.getsize(os.path.join(directory, name))
        click.echo(f"  {name}  {size} bytes")
    if not names:
        click.echo("  (empty)")


@cache_group.command(name="clear")
@_cache_opt
def cache_clear(cache_directory):
    """Delete cached factorizations."""
    directory = cache_dir(cache_directory)
    names = sorted(fnmatch.filter(os.listdir(directory), "bihar_*.lu"))
    for name in names:
        os.remove(os.path.join(directory, name))
    click.echo(f"removed {len(names)} cached factorization(s) "
               f"from {directory}")


def main(argv=None) -> int:
    try:
        cli.main(args=argv, standalone_mode=False)
        return 0
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except SystemExit as exc:  # commands exit directly on validation failure
        return int(exc.code or 0)
    except click.ClickException as exc:
        exc.show(file=sys.stderr)
        return 1
    except click.Abort:
        click.echo("aborted", err=True)
        return 1
    except (TriangulationError, StructuralInconsistencyError,
            DegenerateCornerError) as exc:
        click.echo(f"error: {exc}", err=True)
        return 2
    except ResolutionError as exc:
        click.echo(f"error: {exc}", err=True)
        return 1
    except StageError as exc:
        click.echo(f"numerical failure in stage {exc.stage}: {exc}", err=True)
        return 3
    except CacheError as exc:
        click.echo(f"cache failure: {exc}", err=True)
        return 3
    except OSError as exc:
        click.echo(f"error: {exc}", err=True)
        return 1


if __name__ == "__main__":
    sys.exit(main())
