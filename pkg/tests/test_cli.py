"""Command line interface: commands, exit codes, metric file format."""

import hashlib
import json
import pathlib

import numpy as np
import pytest

from manifold_forge import cli as cli_module
from manifold_forge.c1_pipeline import StageError
from manifold_forge.cli import main, read_metric_file
from manifold_forge.multicube_core import MulticubeStructure

DATA = pathlib.Path(__file__).parent / "data"


def run(*argv):
    return main([str(a) for a in argv])


# ---------------------------------------------------------------------------
# catalog and validate


def test_catalog_list(capsys):
    assert run("catalog", "list") == 0
    out = capsys.readouterr().out
    assert "three-torus" in out and "poincare" in out


def test_catalog_export_alias(tmp_path):
    dest = tmp_path / "e5.json"
    assert run("catalog", "export", "e5", "-o", dest) == 0
    doc = json.loads(dest.read_text())
    assert len(MulticubeStructure.from_json(json.dumps(doc)).region_ids) == 6


def test_catalog_export_unknown_name():
    assert run("catalog", "export", "no-such-space") == 1


def test_validate_catalog_entry(capsys):
    assert run("validate", "--catalog", "three-torus") == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["valid"] is True
    assert doc["regions"] == 1
    assert doc["structural"]["valid"] is True
    assert doc["compatibility"]["passed"] is True


def test_validate_requires_exactly_one_source(tmp_path):
    assert run("validate") == 1
    exported = tmp_path / "t.json"
    assert run("catalog", "export", "three-torus", "-o", exported) == 0
    assert run("validate", str(exported), "--catalog", "three-torus") == 1
    assert run("validate", str(exported)) == 0


# ---------------------------------------------------------------------------
# convert


def test_convert_lens_triangulation(tmp_path, capsys):
    dest = tmp_path / "lens.json"
    assert run("convert", DATA / "lens_5_2.json", "-o", dest) == 0
    structure = MulticubeStructure.from_json(dest.read_text())
    assert len(structure.region_ids) == 4
    assert structure.name == "lens_5_2"
    assert run("validate", dest) == 0


def test_convert_rejects_incompatible_angles(tmp_path, capsys):
    dest = tmp_path / "bad.json"
    assert run("convert", DATA / "theta_mismatch.json", "-o", dest) == 2
    assert not dest.exists()
    err = capsys.readouterr().err
    assert "compatibility" in err
    # --force still reports failure but writes the structure for inspection
    assert run("convert", DATA / "theta_mismatch.json", "-o", dest,
               "--force") == 2
    assert dest.exists()


def test_convert_rejects_non_manifold_input(tmp_path):
    assert run("convert", DATA / "pseudomanifold.json",
               "-o", tmp_path / "x.json") == 2


# ---------------------------------------------------------------------------
# build / diagnose / converge


@pytest.fixture(scope="module")
def torus_mcm(tmp_path_factory):
    dest = tmp_path_factory.mktemp("mcm") / "torus.mcm"
    assert main(["build", "--catalog", "three-torus", "-N", "8",
                 "-o", str(dest)]) == 0
    return dest


def test_build_writes_all_stages(torus_mcm):
    structure, manifest, fields = read_metric_file(torus_mcm)
    assert manifest["manifold"] == "three-torus"
    assert manifest["stages"] == ["c0", "conformal", "gauge", "flattened"]
    assert manifest["N"] == 8
    assert list(structure.region_ids) == manifest["region_ids"]
    for stage, field in fields.items():
        assert field.stage == stage
        assert field.data[structure.region_ids[0]].shape == (6, 8, 8, 8)
    # the flat torus metric is the identity at every stage
    flat = fields["flattened"].data[structure.region_ids[0]]
    assert np.max(np.abs(flat[0] - 1.0)) < 1e-12


def test_build_output_is_deterministic(tmp_path, torus_mcm):
    again = tmp_path / "again.mcm"
    assert main(["build", "--catalog", "three-torus", "-N", "8",
                 "-o", str(again)]) == 0
    assert (hashlib.sha256(again.read_bytes()).hexdigest()
            == hashlib.sha256(torus_mcm.read_bytes()).hexdigest())


def test_build_reports_cache_hits(tmp_path, torus_mcm, capsys):
    # the module fixture already populated the session cache
    assert main(["build", "--catalog", "three-torus", "-N", "8",
                 "-o", str(tmp_path / "b.mcm")]) == 0
    out = capsys.readouterr().out
    assert "factorization 2d: cache hit" in out
    assert "factorization 3d: cache hit" in out


def test_read_metric_file_detects_corruption(tmp_path, torus_mcm):
    blob = bytearray(torus_mcm.read_bytes())
    blob[-100] ^= 0xFF
    bad = tmp_path / "corrupt.mcm"
    bad.write_bytes(bytes(blob))
    with pytest.raises(ValueError, match="checksum"):
        read_metric_file(bad)
    with pytest.raises(ValueError, match="magic"):
        read_metric_file(DATA / "lens_5_2.json")


def test_diagnose_reads_metric_file(torus_mcm, capsys):
    assert run("diagnose", torus_mcm) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0].startswith("manifold,N,stage,")
    assert len(lines) == 5  # one row per stored stage
    last = lines[-1].split(",")
    assert last[0] == "three-torus" and last[2] == "flattened"
    assert float(last[3]) < 1e-13


def test_converge_csv(tmp_path, capsys):
    dest = tmp_path / "table.csv"
    assert main(["converge", "--catalog", "three-torus", "-N", "6,8",
                 "--stages", "gauge", "-o", str(dest)]) == 0
    lines = dest.read_text().strip().splitlines()
    assert len(lines) == 3
    assert [row.split(",")[1] for row in lines[1:]] == ["6", "8"]


# ---------------------------------------------------------------------------
# exit codes


def test_build_exit_codes(tmp_path, monkeypatch):
    out = str(tmp_path / "x.mcm")
    assert main(["build", "--catalog", "three-torus", "-N", "4",
                 "-o", out]) == 1
    assert main(["build", "--catalog", "three-torus", "-N", "24",
                 "-o", out]) == 1
    assert main(["build", "--catalog", "nope", "-N", "8", "-o", out]) == 1
    assert main(["build", "--catalog", "three-torus", "-N", "8",
                 "-o", out, "--k", "0"]) == 1

    def boom(*args, **kwargs):
        raise StageError("gauge", "synthetic")
    monkeypatch.setattr(cli_module, "build_c1_metric", boom)
    assert main(["build", "--catalog", "three-torus", "-N", "8",
                 "-o", out]) == 3


def test_stage_failure_message(tmp_path, monkeypatch, capsys):
    def boom(*args, **kwargs):
        raise StageError("flattened", "synthetic")
    monkeypatch.setattr(cli_module, "build_c1_metric", boom)
    assert main(["build", "--catalog", "three-torus", "-N", "8",
                 "-o", str(tmp_path / "x.mcm")]) == 3
    assert "numerical failure in stage flattened" in capsys.readouterr().err


def test_unknown_command_and_missing_file():
    assert run("frobnicate") == 1
    assert run("diagnose", "/no/such/file.mcm") == 1


# ---------------------------------------------------------------------------
# cache management


def test_cache_ls_and_clear(tmp_path, capsys):
    cache = tmp_path / "cache"
    cache.mkdir()
    assert run("cache", "ls", "--cache-dir", cache) == 0
    assert "(empty)" in capsys.readouterr().out
    (cache / "bihar_2d_N8_v1.lu").write_bytes(b"\0" * 64)
    (cache / "unrelated.txt").write_text("keep me")
    assert run("cache", "ls", "--cache-dir", cache) == 0
    assert "bihar_2d_N8_v1.lu" in capsys.readouterr().out
    assert run("cache", "clear", "--cache-dir", cache) == 0
    assert not (cache / "bihar_2d_N8_v1.lu").exists()
    assert (cache / "unrelated.txt").exists()
