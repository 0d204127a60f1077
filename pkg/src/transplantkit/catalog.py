"""Declarative pointer catalog: which kernel functions to find, and how.

The catalog is data, not code.  Each record names one kernel pointer, the
kernel-version families it applies to, its primary filtering strategy class
(I lexical / II relational / III structural), and the signature body for
that class.  Signature bodies are artifact-supplied configuration derived
from mainline kernel source and validated against the test fixtures; they
are expected to be re-tuned when targeting a new kernel corpus.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .errors import CatalogError

ALL_VERSIONS = "ALL"

RELATION_KINDS = ("caller", "callee", "sibling")
STRATEGIES = ("I", "II", "III")
KINDS = ("function", "data_via_return")


@dataclass(frozen=True)
class Warning_:
    file: str
    line: int


@dataclass(frozen=True)
class Lexical:
    strings: tuple[str, ...] = ()
    warning: Warning_ | None = None


@dataclass(frozen=True)
class Relation:
    relation: str  # caller | callee | sibling
    other: str


@dataclass(frozen=True)
class Structural:
    constants: tuple[int, ...] = ()
    return_values: tuple[int, ...] = ()
    bb_count: int | None = None
    callee_count: int | None = None


@dataclass(frozen=True)
class PointerSpec:
    name: str
    kind: str
    strategy: str
    versions: tuple[str, ...]
    lexical: Lexical | None = None
    relational: tuple[Relation, ...] = ()
    structural: Structural | None = None
    slot: str | None = None  # data_via_return only

    def applies_to(self, family: str) -> bool:
        return ALL_VERSIONS in self.versions or family in self.versions


@dataclass(frozen=True)
class VersionProfile:
    machine_desc_offsets: dict[str, int] = field(default_factory=dict)


@dataclass(frozen=True)
class PointerCatalog:
    specs: tuple[PointerSpec, ...]
    version_profiles: dict[str, VersionProfile]

    @property
    def names(self) -> frozenset[str]:
        return frozenset(s.name for s in self.specs)

    def function_specs(self, family: str) -> list[PointerSpec]:
        return [
            s for s in self.specs if s.kind == "function" and s.applies_to(family)
        ]

    def data_specs(self, family: str) -> list[PointerSpec]:
        return [
            s
            for s in self.specs
            if s.kind == "data_via_return" and s.applies_to(family)
        ]

    def profile_for(self, family: str) -> VersionProfile | None:
        return self.version_profiles.get(family)

    def profileless_families(self) -> frozenset[str]:
        referenced = set()
        for s in self.specs:
            referenced.update(v for v in s.versions if v != ALL_VERSIONS)
        return frozenset(referenced - set(self.version_profiles))


def _parse_spec(record: dict) -> PointerSpec:
    name = record.get("name")
    if not name or not isinstance(name, str):
        raise CatalogError("pointer record without a name")
    kind = record.get("kind", "function")
    if kind not in KINDS:
        raise CatalogError(f"{name}: unknown kind {kind!r}")
    strategy = record.get("strategy")
    if strategy not in STRATEGIES:
        raise CatalogError(f"{name}: strategy must be one of {STRATEGIES}")
    versions = tuple(record.get("versions", ()))
    if not versions:
        raise CatalogError(f"{name}: empty version list")

    lexical = None
    if "lexical" in record:
        lex = record["lexical"]
        warning = None
        if "warning" in lex:
            warning = Warning_(file=lex["warning"]["file"], line=int(lex["warning"]["line"]))
        lexical = Lexical(strings=tuple(lex.get("strings", ())), warning=warning)

    relational = tuple(
        Relation(relation=r["relation"], other=r["other"])
        for r in record.get("relational", ())
    )
    for r in relational:
        if r.relation not in RELATION_KINDS:
            raise CatalogError(f"{name}: unknown relation {r.relation!r}")

    structural = None
    if "structural" in record:
        st = record["structural"]
        structural = Structural(
            constants=tuple(int(c) & 0xFFFFFFFF for c in st.get("constants", ())),
            return_values=tuple(
                int(v) & 0xFFFFFFFF for v in st.get("return_values", ())
            ),
            bb_count=st.get("bb_count"),
            callee_count=st.get("callee_count"),
        )

    spec = PointerSpec(
        name=name,
        kind=kind,
        strategy=strategy,
        versions=versions,
        lexical=lexical,
        relational=relational,
        structural=structural,
        slot=record.get("slot"),
    )
    if kind == "function" and not (lexical or relational or structural):
        raise CatalogError(f"{name}: needs at least one signature body")
    if kind == "data_via_return" and not spec.slot:
        raise CatalogError(f"{name}: data pointer needs a slot name")
    return spec


def parse_catalog(doc: dict) -> PointerCatalog:
    records = doc.get("pointers")
    if not isinstance(records, list):
        raise CatalogError("catalog document lacks a 'pointers' list")
    specs = tuple(_parse_spec(r) for r in records)
    names = [s.name for s in specs]
    if len(set(names)) != len(names):
        dupes = sorted({n for n in names if names.count(n) > 1})
        raise CatalogError(f"duplicate pointer names: {dupes}")
    known = set(names)
    for s in specs:
        for rel in s.relational:
            if rel.other not in known:
                raise CatalogError(
                    f"{s.name}: relation references unknown pointer {rel.other!r}"
                )
    profiles = {
        fam: VersionProfile(
            machine_desc_offsets={
                k: int(v) for k, v in p.get("machine_desc_offsets", {}).items()
            }
        )
        for fam, p in doc.get("version_profiles", {}).items()
    }
    return PointerCatalog(specs=specs, version_profiles=profiles)


def load_catalog(path: str | Path) -> PointerCatalog:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise CatalogError(f"cannot read catalog {path}: {exc}") from exc
    return parse_catalog(doc)


def default_catalog() -> PointerCatalog:
    """The catalog shipped with the package."""
    text = resources.files("transplantkit").joinpath("data/catalog.json").read_text()
    return parse_catalog(json.loads(text))
