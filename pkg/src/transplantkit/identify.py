"""Resolve catalog pointers in a stripped kernel to unique addresses.

Each catalog record is filtered against every recovered function candidate:
lexical (referenced strings, warning file/line pairs), relational
(caller/callee/sibling against already-resolved anchors), and structural
(operand constants, return values, block and callee counts).  A record
resolves only when exactly one candidate survives every applicable filter.
Relational records whose anchors are still unresolved are deferred and
retried; rounds repeat to a fixed point, committing resolutions only at
round boundaries so the outcome is independent of catalog order.
"""

from __future__ import annotations

from dataclasses import dataclass

from .catalog import PointerCatalog, PointerSpec, VersionProfile
from .decompress import KernelImage, version_family
from .errors import MissingAnchor
from .functions import CallGraph, FunctionCandidate, analyze

_MASK = 0xFFFFFFFF

# the machine-description structure is produced by one of these providers,
# depending on kernel generation (flattened device tree vs. machine number)
MACHINE_DESC_PROVIDERS = ("setup_machine_fdt", "lookup_machine_type")


@dataclass(frozen=True)
class Resolution:
    address: int
    strategy_used: str
    candidates_considered: int


@dataclass(frozen=True)
class ResolvedCatalog:
    family: str
    resolutions: dict[str, Resolution]
    unresolved: tuple[tuple[str, str], ...]  # (name, reason)

    def address_of(self, name: str) -> int | None:
        res = self.resolutions.get(name)
        return res.address if res else None


@dataclass(frozen=True)
class SlotRecipe:
    name: str
    base_function: str
    slot_offset: int


def _constant_matches(value: int, cand: FunctionCandidate) -> bool:
    """Equivalence-aware constant membership.

    The extractor already folds MVN-encoded complements and literal-pool
    words into ``immediates``; the subtract-from-zero shape is covered by
    checking the negated constant against SUB/RSB immediates.
    """
    value &= _MASK
    if value in cand.immediates:
        return True
    return ((-value) & _MASK) in cand.sub_imms


def filter_lexical(
    spec: PointerSpec, cand: FunctionCandidate, strings: dict[int, str]
) -> bool:
    lex = spec.lexical
    if lex is None:
        return True
    referenced = [
        strings[addr] for _, addr in cand.string_refs if addr in strings
    ]
    for needle in lex.strings:
        if not any(needle in text for text in referenced):
            return False
    if lex.warning is not None:
        if not _warning_site_present(lex.warning.file, lex.warning.line, cand, strings):
            return False
    return True


def _warning_site_present(
    file_substr: str, line: int, cand: FunctionCandidate, strings: dict[int, str]
) -> bool:
    """A call site passing a file-name string plus the matching line number.

    Argument registers are whatever constant propagation recovered at the
    call; the file name may sit in any of r0-r3 and the line in any other.
    """
    line &= _MASK
    for _site, args in cand.call_args:
        file_regs = set()
        line_regs = set()
        for reg, value in args:
            text = strings.get(value)
            if text is not None and file_substr in text:
                file_regs.add(reg)
            if value == line:
                line_regs.add(reg)
        if any(lr_ != fr for fr in file_regs for lr_ in line_regs):
            return True
    return False


def filter_relational(
    spec: PointerSpec,
    cand: FunctionCandidate,
    resolved: dict[str, int],
    graph: CallGraph,
) -> bool | None:
    """True/False when every relation is decidable, None to defer.

    A relation whose anchor has no resolution yet is indeterminate; one
    failed determinate relation rejects the candidate outright.
    """
    verdict: bool | None = True
    for rel in spec.relational:
        anchor = resolved.get(rel.other)
        if anchor is None:
            verdict = None
            continue
        if rel.relation == "caller":
            holds = graph.calls_directly(cand.entry, anchor)
        elif rel.relation == "callee":
            holds = graph.calls_directly(anchor, cand.entry)
        else:  # sibling
            holds = graph.common_caller(cand.entry, anchor)
        if not holds:
            return False
    return verdict


def filter_structural(spec: PointerSpec, cand: FunctionCandidate) -> bool:
    st = spec.structural
    if st is None:
        return True
    for value in st.constants:
        if not _constant_matches(value, cand):
            return False
    for value in st.return_values:
        if (value & _MASK) not in cand.return_imms:
            return False
    if st.bb_count is not None and cand.bb_count != st.bb_count:
        return False
    if st.callee_count is not None and cand.callee_count != st.callee_count:
        return False
    return True


def identify_from_candidates(
    candidates: list[FunctionCandidate],
    strings: dict[int, str],
    catalog: PointerCatalog,
    family: str,
) -> ResolvedCatalog:
    specs = catalog.function_specs(family)
    graph = CallGraph.build(candidates)

    pools: dict[str, list[FunctionCandidate]] = {}
    considered: dict[str, int] = {}
    for spec in specs:
        pool = [
            c
            for c in candidates
            if filter_lexical(spec, c, strings) and filter_structural(spec, c)
        ]
        pools[spec.name] = pool
        considered[spec.name] = len(pool)

    resolved: dict[str, int] = {}
    while True:
        snapshot = dict(resolved)
        newly: dict[str, int] = {}
        for spec in specs:
            if spec.name in resolved:
                continue
            survivors = []
            deferred = False
            for cand in pools[spec.name]:
                if spec.relational:
                    verdict = filter_relational(spec, cand, snapshot, graph)
                    if verdict is False:
                        continue
                    if verdict is None:
                        deferred = True
                survivors.append(cand)
            pools[spec.name] = survivors
            if not deferred and len(survivors) == 1:
                newly[spec.name] = survivors[0].entry
        if not newly:
            break
        resolved.update(newly)

    resolutions = {
        name: Resolution(
            address=addr,
            strategy_used=next(s.strategy for s in specs if s.name == name),
            candidates_considered=considered[name],
        )
        for name, addr in resolved.items()
    }
    unresolved = []
    for spec in specs:
        if spec.name in resolved:
            continue
        count = len(pools[spec.name])
        reason = "no_candidate" if count == 0 else f"ambiguous({count})"
        unresolved.append((spec.name, reason))
    return ResolvedCatalog(
        family=family,
        resolutions=resolutions,
        unresolved=tuple(unresolved),
    )


def identify_pointers(
    kernel: KernelImage,
    catalog: PointerCatalog,
    family: str | None = None,
) -> ResolvedCatalog:
    """Run recovery plus the full filter pipeline on a decompressed kernel."""
    if family is None:
        if kernel.version is None:
            raise ValueError(
                "kernel version undetected; pass an explicit version family"
            )
        family = version_family(kernel.version)
    candidates, strings, _cfg, _instrs = analyze(kernel.bytes, kernel.load_base)
    return identify_from_candidates(candidates, strings, catalog, family)


def derive_data_slots(
    resolved: ResolvedCatalog,
    profile: VersionProfile,
    catalog: PointerCatalog,
) -> list[SlotRecipe]:
    """Recipes locating the driver-init slots relative to the machine
    description address, which is the post-return r0 of its provider.
    """
    base_fn = None
    for name in MACHINE_DESC_PROVIDERS:
        if resolved.address_of(name) is not None:
            base_fn = name
            break
    if base_fn is None:
        raise MissingAnchor(
            "neither machine-description provider resolved: "
            + ", ".join(MACHINE_DESC_PROVIDERS)
        )
    recipes = []
    for spec in catalog.data_specs(resolved.family):
        offset = profile.machine_desc_offsets.get(spec.slot)
        if offset is None:
            raise MissingAnchor(
                f"version profile lacks a machine_desc offset for {spec.slot!r}"
            )
        recipes.append(
            SlotRecipe(name=spec.name, base_function=base_fn, slot_offset=offset)
        )
    return recipes
