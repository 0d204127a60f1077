"""Catalog-driven pointer identification: filters, fixed point, gating."""

import json
import random

import pytest

from kernelgen import FAMILY_VERSIONS
from conftest import kernel_fixture
from toolchain import link
from transplantkit.catalog import (
    Lexical,
    PointerCatalog,
    PointerSpec,
    Relation,
    Structural,
    VersionProfile,
    Warning_,
    default_catalog,
    load_catalog,
    parse_catalog,
)
from transplantkit.decompress import KernelImage
from transplantkit.errors import CatalogError, MissingAnchor
from transplantkit.functions import CallGraph, analyze
from transplantkit.identify import (
    ResolvedCatalog,
    derive_data_slots,
    filter_lexical,
    filter_relational,
    filter_structural,
    identify_from_candidates,
    identify_pointers,
)

BASE = 0xC0008000


def _spec(**kw):
    base = dict(name="x", kind="function", strategy="III", versions=("ALL",))
    base.update(kw)
    return PointerSpec(**base)


def _cands(source):
    flat, syms = link(source, base=BASE)
    cands, strings, _, _ = analyze(flat, BASE)
    return cands, strings, syms


# -- structural filter ----------------------------------------------------------

ORR_RET_SRC = (
    "f:\n\tpush {r4, lr}\n\tcmp r0, #0\n\tbeq 1f\n"
    "\torr r0, r0, #0x300\n\tpop {r4, pc}\n"
    "1:\n\tmvn r0, #0x15\n\tpop {r4, pc}\n"
)


def test_structural_constant_from_orr():
    cands, _, syms = _cands(ORR_RET_SRC)
    cand = next(c for c in cands if c.entry == syms["f"])
    assert filter_structural(_spec(structural=Structural(constants=(0x300,))), cand)
    assert not filter_structural(
        _spec(structural=Structural(constants=(0x301,))), cand
    )


def test_structural_negative_return_via_mvn():
    cands, _, syms = _cands(ORR_RET_SRC)
    cand = next(c for c in cands if c.entry == syms["f"])
    minus_22 = -22 & 0xFFFFFFFF
    assert filter_structural(
        _spec(structural=Structural(return_values=(minus_22,))), cand
    )


def test_structural_negative_constant_via_sub():
    cands, _, syms = _cands("f:\n\tpush {r4, lr}\n\tsub r0, r1, #22\n\tpop {r4, pc}\n")
    cand = next(c for c in cands if c.entry == syms["f"])
    assert filter_structural(
        _spec(structural=Structural(constants=(-22 & 0xFFFFFFFF,))), cand
    )


def test_structural_counts():
    cands, _, syms = _cands(
        "f:\n\tpush {r4, lr}\n\tbl a\n\tbl b\n\tpop {r4, pc}\n"
        "a:\n\tbx lr\nb:\n\tbx lr\n"
    )
    cand = next(c for c in cands if c.entry == syms["f"])
    assert filter_structural(
        _spec(structural=Structural(bb_count=3, callee_count=2)), cand
    )
    assert not filter_structural(_spec(structural=Structural(callee_count=3)), cand)
    assert not filter_structural(_spec(structural=Structural(bb_count=1)), cand)


# -- lexical filter --------------------------------------------------------------

def test_lexical_string_requirement(v414_kernel):
    cands, strings, _, _ = analyze(v414_kernel.flat, v414_kernel.load_base)
    fdt = next(
        c for c in cands if c.entry == v414_kernel.symbols["setup_machine_fdt"]
    )
    spec = _spec(lexical=Lexical(strings=("Machine model: %s",)))
    assert filter_lexical(spec, fdt, strings)
    other = next(
        c for c in cands if c.entry == v414_kernel.symbols["handle_level_irq"]
    )
    assert not filter_lexical(spec, other, strings)


def test_lexical_warning_needs_matching_line(v414_kernel):
    cands, strings, _, _ = analyze(v414_kernel.flat, v414_kernel.load_base)
    setup = next(c for c in cands if c.entry == v414_kernel.symbols["setup_irq"])
    decoy = next(
        c for c in cands if c.entry == v414_kernel.symbols["decoy_warn_user"]
    )
    spec = _spec(
        lexical=Lexical(warning=Warning_(file="kernel/irq/manage.c", line=1452))
    )
    assert filter_lexical(spec, setup, strings)
    assert not filter_lexical(spec, decoy, strings)  # same file, line 77


# -- relational filter -----------------------------------------------------------

def test_relational_verdicts(v26_kernel):
    cands, _, _, _ = analyze(v26_kernel.flat, v26_kernel.load_base)
    graph = CallGraph.build(cands)
    syms = v26_kernel.symbols
    to_desc = next(c for c in cands if c.entry == syms["irq_to_desc"])
    spec = _spec(relational=(Relation("callee", "set_irq_chip"),))

    resolved = {"set_irq_chip": syms["set_irq_chip"]}
    assert filter_relational(spec, to_desc, resolved, graph) is True

    helper = next(c for c in cands if c.entry == syms["helper_clk_notify"])
    assert filter_relational(spec, helper, resolved, graph) is False

    # unresolved anchor defers
    assert filter_relational(spec, to_desc, {}, graph) is None


def test_sibling_requires_common_caller(v26_kernel):
    cands, _, _, _ = analyze(v26_kernel.flat, v26_kernel.load_base)
    graph = CallGraph.build(cands)
    syms = v26_kernel.symbols
    reg_dev = next(
        c for c in cands if c.entry == syms["clockevents_register_device"]
    )
    spec = _spec(relational=(Relation("sibling", "clockevent_delta2ns"),))
    resolved = {"clockevent_delta2ns": syms["clockevent_delta2ns"]}
    assert filter_relational(spec, reg_dev, resolved, graph) is True
    loner = next(c for c in cands if c.entry == syms["lookup_machine_type"])
    assert filter_relational(spec, loner, resolved, graph) is False


# -- full identification ----------------------------------------------------------

@pytest.mark.parametrize("family", sorted(FAMILY_VERSIONS))
def test_fixture_identification_complete(family):
    fx = kernel_fixture(family)
    cat = default_catalog()
    cands, strings, _, _ = analyze(fx.flat, fx.load_base)
    res = identify_from_candidates(cands, strings, cat, family)
    applicable = {s.name for s in cat.function_specs(family)}
    assert set(res.resolutions) == applicable
    assert res.unresolved == ()
    for name, resolution in res.resolutions.items():
        assert resolution.address == fx.symbols[name], name
        assert resolution.strategy_used in ("I", "II", "III")


def test_identify_pointers_end_to_end(v414_kernel):
    kernel = KernelImage(
        bytes=v414_kernel.flat, load_base=v414_kernel.load_base
    )
    # version comes from the image itself
    kernel = KernelImage(
        bytes=v414_kernel.flat,
        load_base=v414_kernel.load_base,
        version="4.14.95",
    )
    res = identify_pointers(kernel, default_catalog())
    assert res.family == "4.14.x"
    assert res.address_of("setup_irq") == v414_kernel.symbols["setup_irq"]


def test_twin_functions_stay_ambiguous():
    # two byte-identical functions referencing the same string
    src = (
        "f1:\n\tpush {r4, lr}\n\tldr r0, =msg\n\tpop {r4, pc}\n\t.ltorg\n"
        "f2:\n\tpush {r4, lr}\n\tldr r0, =msg\n\tpop {r4, pc}\n\t.ltorg\n"
        '\t.section .rodata\nmsg:\n\t.asciz "twin marker string"\n'
    )
    cands, strings, _ = _cands(src)
    cat = PointerCatalog(
        specs=(
            _spec(
                name="twin",
                strategy="I",
                lexical=Lexical(strings=("twin marker string",)),
            ),
        ),
        version_profiles={},
    )
    res = identify_from_candidates(cands, strings, cat, "4.14.x")
    assert res.resolutions == {}
    assert res.unresolved == (("twin", "ambiguous(2)"),)


def test_no_candidate_reason():
    cands, strings, _ = _cands("f:\n\tbx lr\n")
    cat = PointerCatalog(
        specs=(
            _spec(name="ghost", strategy="I", lexical=Lexical(strings=("absent",))),
        ),
        version_profiles={},
    )
    res = identify_from_candidates(cands, strings, cat, "ALLX")
    assert res.unresolved == (("ghost", "no_candidate"),)


def test_version_gating_skips_other_families(v414_kernel):
    cat = default_catalog()
    cands, strings, _, _ = analyze(v414_kernel.flat, v414_kernel.load_base)
    res = identify_from_candidates(cands, strings, cat, "4.14.x")
    mentioned = set(res.resolutions) | {n for n, _ in res.unresolved}
    assert "irq_to_desc" not in mentioned  # 2.6.x-only record
    assert "set_irq_flags" not in mentioned  # 2.6.x/3.18.x record


def test_determinism_under_catalog_permutation(v414_kernel):
    from importlib import resources

    cands, strings, _, _ = analyze(v414_kernel.flat, v414_kernel.load_base)
    doc = json.loads(
        resources.files("transplantkit").joinpath("data/catalog.json").read_text()
    )
    rng = random.Random(5)
    baseline = None
    for _ in range(10):
        rng.shuffle(doc["pointers"])
        cat = parse_catalog(doc)
        res = identify_from_candidates(cands, strings, cat, "4.14.x")
        snapshot = (
            sorted((n, r.address, r.strategy_used) for n, r in res.resolutions.items()),
            sorted(res.unresolved),
        )
        if baseline is None:
            baseline = snapshot
        assert snapshot == baseline


# -- data slots -------------------------------------------------------------------

def _resolved(family, **addrs):
    from transplantkit.identify import Resolution

    return ResolvedCatalog(
        family=family,
        resolutions={
            name: Resolution(address=a, strategy_used="I", candidates_considered=1)
            for name, a in addrs.items()
        },
        unresolved=(),
    )


def test_data_slots_anchor_on_fdt_provider():
    cat = default_catalog()
    res = _resolved("4.14.x", setup_machine_fdt=0xC0010000)
    recipes = derive_data_slots(res, cat.profile_for("4.14.x"), cat)
    by_name = {r.name: r for r in recipes}
    assert by_name["init_irq"].base_function == "setup_machine_fdt"
    assert by_name["init_irq"].slot_offset == 44
    assert by_name["init_time"].slot_offset == 48


def test_data_slots_anchor_on_machine_lookup_for_26():
    cat = default_catalog()
    res = _resolved("2.6.x", lookup_machine_type=0xC0010000)
    recipes = derive_data_slots(res, cat.profile_for("2.6.x"), cat)
    assert all(r.base_function == "lookup_machine_type" for r in recipes)
    offsets = {r.name: r.slot_offset for r in recipes}
    assert offsets == {"init_irq": 48, "init_time": 52}


def test_data_slots_missing_anchor():
    cat = default_catalog()
    res = _resolved("4.14.x", setup_irq=0xC0010000)
    with pytest.raises(MissingAnchor):
        derive_data_slots(res, cat.profile_for("4.14.x"), cat)


# -- catalog validation -----------------------------------------------------------

def test_default_catalog_shape():
    cat = default_catalog()
    assert len(cat.specs) == 24
    data = [s for s in cat.specs if s.kind == "data_via_return"]
    assert {s.name for s in data} == {"init_irq", "init_time"}
    assert cat.profileless_families() == frozenset()


def test_catalog_rejects_duplicate_names():
    doc = {
        "pointers": [
            {"name": "a", "strategy": "I", "versions": ["ALL"], "lexical": {"strings": ["x"]}},
            {"name": "a", "strategy": "I", "versions": ["ALL"], "lexical": {"strings": ["y"]}},
        ]
    }
    with pytest.raises(CatalogError):
        parse_catalog(doc)


def test_catalog_rejects_unknown_relation_target():
    doc = {
        "pointers": [
            {
                "name": "a",
                "strategy": "II",
                "versions": ["ALL"],
                "relational": [{"relation": "caller", "other": "nope"}],
            }
        ]
    }
    with pytest.raises(CatalogError):
        parse_catalog(doc)


def test_catalog_requires_signature_body():
    doc = {"pointers": [{"name": "a", "strategy": "I", "versions": ["ALL"]}]}
    with pytest.raises(CatalogError):
        parse_catalog(doc)


def test_load_catalog_from_file(tmp_path):
    path = tmp_path / "cat.json"
    path.write_text(
        json.dumps(
            {
                "version_profiles": {"9.9.x": {"machine_desc_offsets": {"init_irq": 4}}},
                "pointers": [
                    {
                        "name": "only",
                        "strategy": "III",
                        "versions": ["9.9.x"],
                        "structural": {"constants": [768]},
                    }
                ],
            }
        )
    )
    cat = load_catalog(path)
    assert cat.specs[0].structural.constants == (768,)
    assert cat.profile_for("9.9.x").machine_desc_offsets == {"init_irq": 4}
