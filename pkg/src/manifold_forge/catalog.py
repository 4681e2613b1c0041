"""Built-in multicube structures.

The entries ship as JSON data files under ``manifold_forge/data`` so that
transcription fixes are data edits rather than code changes; a checksum test
pins the files.  This module only loads, indexes, and re-exports them.
"""

from dataclasses import dataclass
import hashlib
import json
from importlib import resources

from .multicube_core import MulticubeStructure, StructuralInconsistencyError


@dataclass(frozen=True)
class CatalogEntry:
    """A named structure plus its geometry class and a short source note."""

    name: str
    geometry: str
    note: str
    structure: MulticubeStructure


# name -> (data file, Thurston geometry class, note, region count)
_ENTRIES = {
    "three-torus": ("three-torus.json", "E3", "hand built, single cube", 1),
    "third-turn": ("third-turn.json", "E3", "third-turn space (E4)", 3),
    "sixth-turn": ("sixth-turn.json", "E3", "sixth-turn space (E5)", 6),
    "hantzsche-wendt": ("hantzsche-wendt.json", "E3",
                        "Hantzsche-Wendt space (E6)", 2),
    "g2xs1": ("g2xs1.json", "H2xS1", "genus-2 surface times circle", 10),
    "poincare": ("poincare.json", "S3", "Poincare dodecahedral space", 20),
    "seifert-weber": ("seifert-weber.json", "H3", "Seifert-Weber space", 20),
    "l52": ("l52.json", "S3", "lens space L(5,2)", 4),
    "sfs-s2": ("sfs-s2.json", "S3", "SFS[S2:(2,1)(2,1)(2,-1)]", 8),
    "kb-s1": ("kb-s1.json", "E3", "KB/n2 x~ S1", 24),
    "sfs-rp2": ("sfs-rp2.json", "E3", "SFS[RP2/n2:(2,1)(2,-1)]", 24),
}

# common alternate names for the flat entries
_ALIASES = {
    "e1": "three-torus",
    "e4": "third-turn",
    "e5": "sixth-turn",
    "e6": "hantzsche-wendt",
}

_cache = {}


def list_names():
    """Sorted canonical entry names."""
    return sorted(_ENTRIES)


def canonical_name(name: str) -> str:
    key = name.strip().lower()
    key = _ALIASES.get(key, key)
    if key not in _ENTRIES:
        raise LookupError(
            f"unknown catalog entry {name!r}; available: {', '.join(list_names())}")
    return key


def _read_data(filename: str) -> bytes:
    return resources.files("manifold_forge.data").joinpath(filename).read_bytes()


def get(name: str) -> CatalogEntry:
    """Load a catalog entry, validating its structure on first access."""
    key = canonical_name(name)
    if key not in _cache:
        filename, geometry, note, nregions = _ENTRIES[key]
        structure = MulticubeStructure.from_json(_read_data(filename).decode())
        report = structure.validate()
        if not report.valid:
            raise StructuralInconsistencyError(
                f"catalog entry {key} failed validation: {report.findings}")
        if len(structure.regions) != nregions:
            raise StructuralInconsistencyError(
                f"catalog entry {key}: expected {nregions} regions, "
                f"found {len(structure.regions)}")
        _cache[key] = CatalogEntry(key, geometry, note, structure)
    return _cache[key]


def export(name: str) -> str:
    """Structure JSON text for an entry, parseable by MulticubeStructure."""
    return get(name).structure.to_json()


def data_checksum() -> str:
    """SHA-256 over all shipped data files, in filename order."""
    digest = hashlib.sha256()
    for key in list_names():
        filename = _ENTRIES[key][0]
        digest.update(filename.encode())
        digest.update(_read_data(filename))
    return digest.hexdigest()
