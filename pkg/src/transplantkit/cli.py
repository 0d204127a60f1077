"""Command-line front end wiring the pipeline end to end.

Every command validates its inputs, writes outputs atomically, and reports
failures as a single machine-readable JSON record on stderr with a nonzero
exit status.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

from . import catalog as catalog_mod
from . import container, decompress, driver as driver_mod, identify as identify_mod
from .errors import ToolError, Unrecoverable, PatternNotFound
from .functions import analyze
from .reporting import canonical_json, hexaddr, write_atomic
from .scenario import run_scenario


def _hex(value: str) -> int:
    return int(value, 16 if not value.startswith("0x") else 0)


def _err(code: str, message: str) -> int:
    sys.stderr.write(json.dumps({"error": {"code": code, "message": message}}) + "\n")
    return 1


def _out_dir(args) -> Path:
    return Path(args.out) if args.out else Path.cwd()


# --- commands ----------------------------------------------------------------

def cmd_unpack(args) -> int:
    image = container.FirmwareImage(Path(args.image).read_bytes(), origin=args.image)
    regions = container.scan_signatures(image)
    out = _out_dir(args)
    listing = {
        "format": "region-listing/1",
        "origin": args.image,
        "regions": [
            {
                "offset": r.offset,
                "kind": r.kind.value,
                "confidence": r.confidence.value,
            }
            for r in regions
        ],
    }
    write_atomic(out / "regions.json", canonical_json(listing))
    for r in regions:
        if r.confidence is not container.Confidence.HEADER_VALIDATED:
            continue
        blob = container.extract_kernel(image, r)
        write_atomic(out / f"region_{r.offset:08x}_{r.kind.value}.bin", blob.bytes)
    print(f"{len(regions)} region(s) -> {out / 'regions.json'}")
    return 0


def cmd_decompress(args) -> int:
    raw = Path(args.blob).read_bytes()
    region = container.EmbeddedRegion(
        0, container.RegionKind.RAW, container.Confidence.HEADER_VALIDATED
    )
    blob = container.KernelBlob(raw, region)

    load_base = _hex(args.load_base) if args.load_base else None
    load_base_source = "flag" if load_base is not None else "default"
    if load_base is None:
        # try the static route: stub shape match plus r0 recovery
        try:
            from .disasm import linear_sweep

            instrs = linear_sweep(raw[: len(raw) & ~3], 0)
            call = decompress.locate_decompress_call(instrs)
            load_base = decompress.recover_output_start(instrs, call, raw, 0)
            load_base_source = "recovered"
        except (PatternNotFound, Unrecoverable, ToolError):
            load_base = None

    kernel = decompress.decompress_payload(blob, load_base)
    out = _out_dir(args)
    write_atomic(out / "kernel.bin", kernel.bytes)
    sidecar = {
        "format": "kernel-sidecar/1",
        "load_base": hexaddr(kernel.load_base),
        "load_base_source": load_base_source,
        "version": kernel.version,
        "source_offsets": {"blob": 0},
        "size": len(kernel.bytes),
    }
    write_atomic(out / "kernel.json", canonical_json(sidecar))
    print(f"{len(kernel.bytes)} bytes -> {out / 'kernel.bin'}")
    return 0


def _load_kernel(args) -> decompress.KernelImage:
    data = Path(args.kernel).read_bytes()
    load_base = _hex(args.load_base) if args.load_base else decompress.DEFAULT_LOAD_BASE
    version = args.version or decompress.detect_kernel_version(data)
    return decompress.KernelImage(bytes=data, load_base=load_base, version=version)


def _function_report(kernel: decompress.KernelImage) -> dict:
    candidates, _strings, _cfg, _instrs = analyze(kernel.bytes, kernel.load_base)
    return {
        "format": "function-report/1",
        "load_base": hexaddr(kernel.load_base),
        "function_count": len(candidates),
        "functions": [
            {
                "entry": hexaddr(c.entry),
                "size": c.end - c.entry,
                "bb_count": c.bb_count,
                "callee_count": c.callee_count,
                "string_refs": len(c.string_refs),
            }
            for c in candidates
        ],
    }


def cmd_functions(args) -> int:
    kernel = _load_kernel(args)
    report = _function_report(kernel)
    out = _out_dir(args)
    write_atomic(out / "functions.json", canonical_json(report))
    print(f"{report['function_count']} function(s) -> {out / 'functions.json'}")
    return 0


def _resolution_report(resolved: identify_mod.ResolvedCatalog, cat) -> dict:
    report = {
        "format": "resolution-report/1",
        "family": resolved.family,
        "resolutions": {
            name: {
                "address": hexaddr(res.address),
                "strategy": res.strategy_used,
                "candidates_considered": res.candidates_considered,
            }
            for name, res in resolved.resolutions.items()
        },
        "unresolved": [
            {"name": name, "reason": reason} for name, reason in resolved.unresolved
        ],
    }
    profile = cat.profile_for(resolved.family)
    recipes = []
    if profile is not None:
        try:
            recipes = [
                {
                    "name": r.name,
                    "base_function": r.base_function,
                    "slot_offset": r.slot_offset,
                }
                for r in identify_mod.derive_data_slots(resolved, profile, cat)
            ]
        except ToolError:
            recipes = []
    report["slot_recipes"] = recipes
    return report


def cmd_identify(args) -> int:
    kernel = _load_kernel(args)
    cat = (
        catalog_mod.load_catalog(args.catalog)
        if args.catalog
        else catalog_mod.default_catalog()
    )
    if kernel.version is None and not args.version:
        return _err("version-undetected", "no version marker; pass --version")
    resolved = identify_mod.identify_pointers(kernel, cat)
    report = _resolution_report(resolved, cat)
    out = _out_dir(args)
    write_atomic(out / "resolution.json", canonical_json(report))
    print(
        f"{len(resolved.resolutions)} resolved, "
        f"{len(resolved.unresolved)} unresolved -> {out / 'resolution.json'}"
    )
    return 0


class _ReportResolutions:
    """address_of view over a resolution report document."""

    def __init__(self, doc: dict):
        self._addresses = {
            name: int(rec["address"], 16)
            for name, rec in doc.get("resolutions", {}).items()
        }

    def address_of(self, name: str):
        return self._addresses.get(name)


def cmd_fixup(args) -> int:
    drv = driver_mod.parse_driver(Path(args.driver).read_bytes())
    doc = json.loads(Path(args.resolution).read_text())
    resolutions = _ReportResolutions(doc)
    load_addr = _hex(args.load_addr)
    opaque_base = _hex(args.opaque_base) if args.opaque_base else None
    opaque_len = _hex(args.opaque_len) if args.opaque_len else None
    pool_limit = None
    if opaque_base is not None:
        pool_limit = opaque_base + (
            opaque_len if opaque_len is not None else 0x10000
        )

    patched = driver_mod.rebase(drv, load_addr)
    patched = driver_mod.bind_backward(patched, resolutions, drv.imports)
    targets = _parse_call_targets(args.call_targets, resolutions)
    if targets is None:
        return _err("unresolved-import", "call-target file names an unresolved pointer")
    patched = driver_mod.rewrite_out_of_range_calls(patched, targets, pool_limit)

    out = _out_dir(args)
    write_atomic(out / "driver_patched.bin", patched.image)
    entry_doc = {
        "format": "driver-entry-map/1",
        "load_addr": hexaddr(patched.load_addr),
        "entries": {k: hexaddr(v) for k, v in sorted(patched.entry_map.items())},
    }
    write_atomic(out / "driver_entry_map.json", canonical_json(entry_doc))

    if args.machine_desc_addr:
        recipes = [
            identify_mod.SlotRecipe(
                name=r["name"],
                base_function=r["base_function"],
                slot_offset=r["slot_offset"],
            )
            for r in doc.get("slot_recipes", [])
        ]
        ps = driver_mod.plan_forward_install(
            recipes, _hex(args.machine_desc_addr), patched.entry_map
        )
        write_atomic(out / "patchset.txt", ps.serialize())
        print(f"{len(ps.patches)} forward patch(es) -> {out / 'patchset.txt'}")
    print(f"{len(patched.image)} bytes -> {out / 'driver_patched.bin'}")
    return 0


def cmd_simulate_mmu(args) -> int:
    transcript = run_scenario(Path(args.scenario).read_text())
    out = _out_dir(args)
    write_atomic(out / "transcript.txt", transcript)
    sys.stdout.write(transcript)
    return 0


def cmd_pipeline(args) -> int:
    t0 = time.monotonic()
    image = container.FirmwareImage(Path(args.image).read_bytes(), origin=args.image)
    regions = container.scan_signatures(image)
    usable = [
        r
        for r in regions
        if r.confidence is container.Confidence.HEADER_VALIDATED
    ]
    if not usable:
        return _err("no-kernel-region", "no validated container region in image")
    blob = container.extract_kernel(image, usable[0])

    load_base = _hex(args.load_base) if args.load_base else None
    kernel = decompress.decompress_payload(blob, load_base)
    if args.version:
        kernel = decompress.KernelImage(
            bytes=kernel.bytes, load_base=kernel.load_base, version=args.version
        )
    if kernel.version is None:
        return _err("version-undetected", "no version marker; pass --version")

    cat = (
        catalog_mod.load_catalog(args.catalog)
        if args.catalog
        else catalog_mod.default_catalog()
    )
    candidates, strings, _cfg, _instrs = analyze(kernel.bytes, kernel.load_base)
    family = decompress.version_family(kernel.version)
    resolved = identify_mod.identify_from_candidates(candidates, strings, cat, family)

    out = _out_dir(args)
    write_atomic(out / "kernel.bin", kernel.bytes)
    resolution_report = _resolution_report(resolved, cat)
    write_atomic(out / "resolution.json", canonical_json(resolution_report))

    patch_summary = {"bound_imports": 0, "rewritten_calls": 0, "forward_patches": 0}
    if args.driver:
        drv = driver_mod.parse_driver(Path(args.driver).read_bytes())
        opaque_base = _hex(args.opaque_base) if args.opaque_base else 0xD0000000
        opaque_len = _hex(args.opaque_len) if args.opaque_len else 0x10000
        load_addr = opaque_base
        patched = driver_mod.rebase(drv, load_addr)
        patched = driver_mod.bind_backward(patched, resolved, drv.imports)
        targets = _parse_call_targets(args.call_targets, resolved)
        if targets is None:
            return _err(
                "unresolved-import", "call-target file names an unresolved pointer"
            )
        patched = driver_mod.rewrite_out_of_range_calls(
            patched, targets, opaque_base + opaque_len
        )
        patch_summary["bound_imports"] = len(drv.imports)
        patch_summary["rewritten_calls"] = len(targets)
        write_atomic(out / "driver_patched.bin", patched.image)
        if args.machine_desc_addr:
            profile = cat.profile_for(family)
            if profile is not None:
                recipes = identify_mod.derive_data_slots(resolved, profile, cat)
                ps = driver_mod.plan_forward_install(
                    recipes, _hex(args.machine_desc_addr), patched.entry_map
                )
                patch_summary["forward_patches"] = len(ps.patches)
                write_atomic(out / "patchset.txt", ps.serialize())

    report = {
        "format": "pipeline-report/1",
        "image_stats": {
            "decompressed_size": len(kernel.bytes),
            "function_count": len(candidates),
            "version": kernel.version,
        },
        "resolution_summary": {
            "family": family,
            "resolved": len(resolved.resolutions),
            "unresolved": len(resolved.unresolved),
            "applicable": len(cat.function_specs(family)),
        },
        "patch_summary": patch_summary,
        "timing": {"seconds": round(time.monotonic() - t0, 3)},
    }
    write_atomic(out / "pipeline.json", canonical_json(report))
    print(f"pipeline report -> {out / 'pipeline.json'}")
    return 0


def _parse_call_targets(path: str | None, resolutions) -> dict[int, int] | None:
    """Call-binding file: '<call24 offset hex> <pointer name>' per line.

    Returns None when a named pointer has no resolved address.
    """
    targets: dict[int, int] = {}
    if not path:
        return targets
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        off_s, name = line.split()
        addr = resolutions.address_of(name)
        if addr is None:
            return None
        targets[int(off_s, 16)] = addr
    return targets


# --- argument wiring -----------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="transplantkit",
        description="Prepare stripped embedded Linux kernels for driver transplantation",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_out(p):
        p.add_argument("--out", help="output directory (default: cwd)")

    p = sub.add_parser("unpack", help="scan a firmware image for containers")
    p.add_argument("image")
    add_out(p)
    p.set_defaults(func=cmd_unpack)

    p = sub.add_parser("decompress", help="decompress an extracted kernel blob")
    p.add_argument("blob")
    p.add_argument("--load-base", help="override the recovered load base (hex)")
    add_out(p)
    p.set_defaults(func=cmd_decompress)

    p = sub.add_parser("functions", help="recover function boundaries")
    p.add_argument("kernel")
    p.add_argument("--load-base", help="kernel load base (hex)")
    p.add_argument("--version", help="override version detection")
    add_out(p)
    p.set_defaults(func=cmd_functions)

    p = sub.add_parser("identify", help="resolve catalog pointers")
    p.add_argument("kernel")
    p.add_argument("--catalog", help="pointer catalog (default: built-in)")
    p.add_argument("--load-base", help="kernel load base (hex)")
    p.add_argument("--version", help="override version detection")
    add_out(p)
    p.set_defaults(func=cmd_identify)

    p = sub.add_parser("fixup", help="rebase and patch a driver container")
    p.add_argument("driver")
    p.add_argument("--load-addr", required=True, help="driver load address (hex)")
    p.add_argument("--resolution", required=True, help="resolution report path")
    p.add_argument("--machine-desc-addr", help="machine description address (hex)")
    p.add_argument("--call-targets", help="file of '<offset> <name>' call bindings")
    p.add_argument("--opaque-base", help="opaque window base (hex)")
    p.add_argument("--opaque-len", help="opaque window length (hex)")
    add_out(p)
    p.set_defaults(func=cmd_fixup)

    p = sub.add_parser("simulate-mmu", help="run a page-walk scenario file")
    p.add_argument("scenario")
    add_out(p)
    p.set_defaults(func=cmd_simulate_mmu)

    p = sub.add_parser("pipeline", help="firmware image to patched driver, end to end")
    p.add_argument("image")
    p.add_argument("--catalog", help="pointer catalog (default: built-in)")
    p.add_argument("--driver", help="driver container to patch")
    p.add_argument("--call-targets", help="file of '<offset> <name>' call bindings")
    p.add_argument("--load-base", help="kernel load base override (hex)")
    p.add_argument("--version", help="version override")
    p.add_argument("--machine-desc-addr", help="machine description address (hex)")
    p.add_argument("--opaque-base", help="opaque window base (hex)")
    p.add_argument("--opaque-len", help="opaque window length (hex)")
    add_out(p)
    p.set_defaults(func=cmd_pipeline)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ToolError as exc:
        return _err(exc.code, str(exc))
    except FileNotFoundError as exc:
        return _err("missing-input", str(exc))


if __name__ == "__main__":
    sys.exit(main())
