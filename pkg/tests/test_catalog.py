"""Bundled structure catalog: pins, aliases, and round trips."""

import json

import pytest

from manifold_forge import catalog
from manifold_forge.multicube_core import MulticubeStructure
from manifold_forge.triangulation_ingest import check_compatibility

# content pin over every bundled structure file
DATA_CHECKSUM = "3baa52a8d217af1199c257fc579b6f5aefdb87eb710fea19152f945aa9763c59"

REGION_COUNTS = {
    "three-torus": 1,
    "third-turn": 3,
    "sixth-turn": 6,
    "hantzsche-wendt": 2,
    "g2xs1": 10,
    "poincare": 20,
    "seifert-weber": 20,
    "l52": 4,
    "sfs-s2": 8,
    "kb-s1": 24,
    "sfs-rp2": 24,
}

GEOMETRIES = {"E3", "H2xS1", "S3", "H3"}


def test_data_checksum_pinned():
    assert catalog.data_checksum() == DATA_CHECKSUM


def test_names_and_region_counts():
    assert catalog.list_names() == sorted(REGION_COUNTS)
    for name, count in REGION_COUNTS.items():
        entry = catalog.get(name)
        assert len(entry.structure.region_ids) == count, name
        assert entry.geometry in GEOMETRIES
        assert entry.name == name
        assert entry.note


def test_aliases_resolve_to_flat_entries():
    assert catalog.canonical_name("e1") == "three-torus"
    assert catalog.canonical_name("E4") == "third-turn"
    assert catalog.canonical_name("e5") == "sixth-turn"
    assert catalog.canonical_name(" e6 ") == "hantzsche-wendt"
    assert catalog.get("e5").structure is catalog.get("sixth-turn").structure


def test_unknown_name_lists_alternatives():
    with pytest.raises(LookupError, match="three-torus"):
        catalog.get("klein-bottle")


def test_export_round_trip():
    for name in ("l52", "sixth-turn"):
        text = catalog.export(name)
        doc = json.loads(text)
        rebuilt = MulticubeStructure.from_json(doc)
        assert rebuilt.to_json() == catalog.get(name).structure.to_json()
        assert sorted(rebuilt.faces) == sorted(catalog.get(name).structure.faces)


def test_every_entry_validates_and_is_compatible():
    for name in catalog.list_names():
        entry = catalog.get(name)  # get() already validates structurally
        report = check_compatibility(entry.structure)
        assert report.passed, f"{name}: {report.failures()[:3]}"
