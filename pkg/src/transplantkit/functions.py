"""Function boundary recovery and per-function signature features.

Entry points are seeded two ways: every direct-call target, and every
store-multiple prologue that pushes the link register.  A function is then
the set of blocks reachable from its seed without crossing another seed.
Alongside the boundaries we collect the features the identification
strategies consume: block counts, callees/callers, referenced strings,
operand constants, return values, and recovered call-site arguments.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

from .constprop import ImageReader, RegisterState, run_block
from .disasm import CFG, LR, PC, SP, BasicBlock, Instruction, Klass

_PRINTABLE = frozenset(range(0x20, 0x7F)) | {0x09, 0x0A, 0x0D}
MIN_STRING_LEN = 4


@dataclass(frozen=True)
class FunctionCandidate:
    entry: int
    end: int  # exclusive
    bb_count: int
    blocks: tuple[tuple[int, int], ...]  # (start, end) per owned block, sorted
    callees: tuple[int, ...]  # direct-call targets, in site order
    call_sites: tuple[int, ...]  # BL addresses matching ``callees``
    callers: tuple[int, ...] = ()  # BL sites elsewhere that target ``entry``
    string_refs: tuple[tuple[int, int], ...] = ()  # (site, string addr)
    immediates: tuple[int, ...] = ()  # effective operand constants
    sub_imms: tuple[int, ...] = ()  # immediates of SUB/RSB sites
    return_imms: tuple[int, ...] = ()  # r0 values in return-ending blocks
    call_args: tuple[tuple[int, tuple[tuple[int, int], ...]], ...] = ()

    @property
    def callee_count(self) -> int:
        return len(set(self.callees))


def seed_entries(cfg: CFG, instrs: list[Instruction]) -> set[int]:
    """Union of direct-call targets and LR-pushing prologues."""
    seeds = set()
    for _, target in cfg.call_edges:
        if cfg.base <= target < cfg.end:
            seeds.add(target)
    for ins in instrs:
        if (
            ins.op == "stm"
            and ins.writeback
            and ins.rn == SP
            and ins.pre_index
            and not ins.up
            and ins.reglist & (1 << LR)
        ):
            seeds.add(ins.addr)
    return seeds


def extract_string_table(blob: bytes, base: int) -> dict[int, str]:
    """All NUL-terminated printable-ASCII runs of length >= 4, by address."""
    table = {}
    start = None
    for i, b in enumerate(blob):
        if b in _PRINTABLE:
            if start is None:
                start = i
        else:
            if b == 0 and start is not None and i - start >= MIN_STRING_LEN:
                table[base + start] = blob[start:i].decode("ascii")
            start = None
    return table


def _movw_movt_pairs(block_instrs: list[Instruction]) -> list[int]:
    """Combined 32-bit constants from movw/movt pairs on the same register."""
    lows: dict[int, int] = {}
    combined = []
    for ins in block_instrs:
        if ins.op == "movw":
            lows[ins.rd] = ins.imm
        elif ins.op == "movt" and ins.rd in lows:
            combined.append((ins.imm << 16) | lows[ins.rd])
    return combined


def _is_return(ins: Instruction) -> bool:
    if ins.op == "bx" and ins.rm == LR:
        return True
    if ins.op == "ldm" and ins.reglist & (1 << PC):
        return True
    if ins.op == "mov" and ins.rd == PC and ins.rm == LR and ins.imm is None:
        return True
    return False


def delimit_functions(
    cfg: CFG,
    seeds: set[int],
    instrs: list[Instruction],
    image: ImageReader | None = None,
) -> list[FunctionCandidate]:
    """Carve the CFG into per-seed regions and aggregate their features.

    Every seed is a hard function start: seeds that fall mid-block split
    their containing block, so pool words or padding that decode as
    fall-through instructions never absorb the entry of the function behind
    them.  Reachability follows intra-procedural successor edges only (call
    edges excluded) and stops at any other seed.
    """
    if not cfg.blocks:
        return []

    # split blocks at in-block seed addresses; the tail keeps the original
    # terminator and successors, the head falls through into the seed
    split_points: dict[int, list[int]] = {}
    entries = set()
    for s in seeds:
        blk = cfg.block_at(s)
        if blk is None:
            continue
        entries.add(s)
        if s != blk.start and s % 4 == 0:
            split_points.setdefault(blk.start, []).append(s)

    blocks = []
    for blk in cfg.blocks:
        points = sorted(split_points.get(blk.start, ()))
        if not points:
            blocks.append(blk)
            continue
        bounds = [blk.start] + points + [blk.end]
        for lo, hi in zip(bounds, bounds[1:]):
            if hi == blk.end:
                blocks.append(BasicBlock(lo, hi, blk.succs))
            else:
                blocks.append(BasicBlock(lo, hi, (hi,)))

    block_by_start = {b.start: b for b in blocks}
    snapped = entries

    instr_index = {ins.addr: ins for ins in instrs}

    def block_instrs(start: int, end: int) -> list[Instruction]:
        return [instr_index[a] for a in range(start, end, 4) if a in instr_index]

    call_target_by_site = dict(cfg.call_edges)

    candidates = []
    for entry in sorted(snapped):
        todo = [entry]
        owned: set[int] = set()
        while todo:
            bs = todo.pop()
            if bs in owned:
                continue
            owned.add(bs)
            for succ in block_by_start[bs].succs:
                if succ in block_by_start and succ not in snapped and succ not in owned:
                    todo.append(succ)

        blocks = tuple((b, block_by_start[b].end) for b in sorted(owned))
        end = max(e for _, e in blocks)

        callees: list[int] = []
        call_sites: list[int] = []
        imms: list[int] = []
        sub_imms: list[int] = []
        return_imms: list[int] = []
        call_args: list[tuple[int, tuple[tuple[int, int], ...]]] = []

        for bs, be in blocks:
            body = block_instrs(bs, be)
            for ins in body:
                if ins.klass is Klass.DATAPROC and ins.imm is not None:
                    if ins.op == "mvn":
                        imms.append(~ins.imm & 0xFFFFFFFF)
                    elif ins.op == "movt":
                        pass  # counted via the pair scan below
                    else:
                        imms.append(ins.imm)
                    if ins.op in ("sub", "rsb"):
                        sub_imms.append(ins.imm)
                if ins.literal_ref is not None and image is not None:
                    word = image.word(ins.literal_ref)
                    if word is not None:
                        imms.append(word)
            imms.extend(_movw_movt_pairs(body))

            last = body[-1] if body else None
            if last is None:
                continue
            if last.addr in call_target_by_site:
                call_sites.append(last.addr)
                callees.append(call_target_by_site[last.addr])
            if last.is_call:
                args_state = run_block(body[:-1], RegisterState(), image)
                known = tuple(
                    (r, args_state.get(r)) for r in range(4) if args_state.get(r) is not None
                )
                call_args.append((last.addr, known))
            if _is_return(last):
                ret_state = run_block(body[:-1], RegisterState(), image)
                r0 = ret_state.get(0)
                if r0 is not None:
                    return_imms.append(r0)

        candidates.append(
            FunctionCandidate(
                entry=entry,
                end=end,
                bb_count=len(blocks),
                blocks=blocks,
                callees=tuple(callees),
                call_sites=tuple(call_sites),
                immediates=tuple(imms),
                sub_imms=tuple(sub_imms),
                return_imms=tuple(return_imms),
                call_args=tuple(call_args),
            )
        )

    # fill callers now that ownership is known
    callers: dict[int, list[int]] = {c.entry: [] for c in candidates}
    for site, target in cfg.call_edges:
        if target in callers:
            callers[target].append(site)
    candidates = [
        replace(c, callers=tuple(sorted(callers[c.entry]))) for c in candidates
    ]
    return candidates


def resolve_string_xrefs(
    candidates: list[FunctionCandidate],
    instrs: list[Instruction],
    blob: bytes,
    base: int,
    strings: dict[int, str] | None = None,
) -> list[FunctionCandidate]:
    """Fill ``string_refs`` via the two-level dereference: a PC-relative load
    reads a literal slot whose 32-bit value is a string address.
    """
    import bisect

    if strings is None:
        strings = extract_string_table(blob, base)
    image = ImageReader(blob, base)

    refs_by_func: dict[int, list[tuple[int, int]]] = {c.entry: [] for c in candidates}
    intervals = sorted(
        (start, end, c.entry) for c in candidates for start, end in c.blocks
    )
    starts = [iv[0] for iv in intervals]

    def owner_of(addr: int) -> int | None:
        i = bisect.bisect_right(starts, addr) - 1
        if i >= 0 and intervals[i][0] <= addr < intervals[i][1]:
            return intervals[i][2]
        return None

    for ins in instrs:
        if ins.literal_ref is None:
            continue
        slot = image.word(ins.literal_ref)
        if slot is None or slot not in strings:
            continue
        entry = owner_of(ins.addr)
        if entry is None:
            continue
        refs_by_func[entry].append((ins.addr, slot))

    return [
        replace(c, string_refs=tuple(sorted(refs_by_func[c.entry])))
        for c in candidates
    ]


@dataclass(frozen=True)
class CallGraph:
    """Function-level call relations derived from candidate features."""

    calls: frozenset[tuple[int, int]]  # (caller entry, callee entry)
    entries: frozenset[int]

    @classmethod
    def build(cls, candidates: list[FunctionCandidate]) -> "CallGraph":
        entries = frozenset(c.entry for c in candidates)
        calls = set()
        for c in candidates:
            for target in c.callees:
                if target in entries:
                    calls.add((c.entry, target))
        return cls(calls=frozenset(calls), entries=entries)

    def calls_directly(self, caller: int, callee: int) -> bool:
        return (caller, callee) in self.calls

    def common_caller(self, a: int, b: int) -> bool:
        if a == b:
            return False
        callers_a = {f for (f, t) in self.calls if t == a}
        return any((f, b) in self.calls for f in callers_a)


def analyze(blob: bytes, base: int):
    """Convenience pipeline: sweep, CFG, seeds, candidates, strings, xrefs.

    Returns ``(candidates, strings, cfg, instrs)``.
    """
    from .disasm import build_cfg, linear_sweep

    instrs = linear_sweep(blob, base)
    cfg = build_cfg(instrs)
    strings = extract_string_table(blob, base)
    seeds = seed_entries(cfg, instrs)
    image = ImageReader(blob, base)
    candidates = delimit_functions(cfg, seeds, instrs, image)
    candidates = resolve_string_xrefs(candidates, instrs, blob, base, strings)
    return candidates, strings, cfg, instrs
