"""Conservative A32 linear-sweep disassembly and basic-block recovery.

The decoder never refuses a word: anything outside the supported subset
comes back as ``undecodable`` and is treated as potential inline data by the
callers.  The supported subset (see docs/FORMATS.md) is:

* data-processing, immediate and register-shifted forms (AND EOR SUB RSB ADD
  ADC SBC RSC TST TEQ CMP CMN ORR MOV BIC MVN), plus MOVW/MOVT
* single word/byte load/store, immediate, register and PC-literal forms
* load/store multiple (LDM/STM and the PUSH/POP encodings)
* B, BL, BX, BLX (register form)
* MRS/MSR, recognized but classified ``other``

Words are assumed little-endian; big-endian ARM images are out of scope.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from enum import Enum

from .errors import MisalignedInput

COND_AL = 0xE

SP = 13
LR = 14
PC = 15


class Klass(str, Enum):
    BRANCH_IMM = "branch_imm"
    BRANCH_REG = "branch_reg"
    LOADSTORE = "loadstore"
    DATAPROC = "dataproc"
    OTHER = "other"
    UNDECODABLE = "undecodable"


_DP_OPS = (
    "and", "eor", "sub", "rsb", "add", "adc", "sbc", "rsc",
    "tst", "teq", "cmp", "cmn", "orr", "mov", "bic", "mvn",
)
_DP_NO_RD = frozenset(("tst", "teq", "cmp", "cmn"))
_DP_NO_RN = frozenset(("mov", "mvn"))


@dataclass(frozen=True)
class Instruction:
    addr: int
    word: int
    klass: Klass
    cond: int
    op: str = ""
    is_call: bool = False
    writes_pc: bool = False
    branch_targets: tuple[int, ...] = ()
    literal_ref: int | None = None
    immediates: tuple[int, ...] = ()
    # operand detail for the evaluators; None/0 when not applicable
    rd: int | None = None
    rn: int | None = None
    rm: int | None = None
    imm: int | None = None
    shift_type: int = 0
    shift_amt: int = 0
    shift_reg: int | None = None
    set_flags: bool = False
    is_load: bool = False
    byte_access: bool = False
    pre_index: bool = True
    up: bool = True
    writeback: bool = False
    reglist: int = 0


def _ror32(value: int, amount: int) -> int:
    amount &= 31
    if amount == 0:
        return value & 0xFFFFFFFF
    return ((value >> amount) | (value << (32 - amount))) & 0xFFFFFFFF


def _sign_extend_24(value: int) -> int:
    return (value ^ 0x800000) - 0x800000


def _undecodable(word: int, addr: int, cond: int = COND_AL) -> Instruction:
    return Instruction(addr=addr, word=word, klass=Klass.UNDECODABLE, cond=cond)


def _decode_branch(word: int, addr: int, cond: int) -> Instruction:
    link = bool(word & 0x01000000)
    target = (addr + 8 + _sign_extend_24(word & 0xFFFFFF) * 4) & 0xFFFFFFFF
    return Instruction(
        addr=addr,
        word=word,
        klass=Klass.BRANCH_IMM,
        cond=cond,
        op="bl" if link else "b",
        is_call=link,
        writes_pc=True,
        branch_targets=(target,),
        imm=target,
    )


def _decode_dataproc(word: int, addr: int, cond: int) -> Instruction:
    imm_form = bool(word & 0x02000000)
    opcode = (word >> 21) & 0xF
    set_flags = bool(word & 0x00100000)
    rn = (word >> 16) & 0xF
    rd = (word >> 12) & 0xF

    if imm_form and not set_flags and (word & 0x0FB00000) in (0x03000000, 0x03400000):
        # MOVW / MOVT: imm16 split across the Rn and imm12 fields
        op = "movw" if (word & 0x00400000) == 0 else "movt"
        imm16 = ((word >> 4) & 0xF000) | (word & 0xFFF)
        writes_pc = rd == PC
        return Instruction(
            addr=addr,
            word=word,
            klass=Klass.BRANCH_REG if writes_pc else Klass.DATAPROC,
            cond=cond,
            op=op,
            writes_pc=writes_pc,
            immediates=(imm16,),
            rd=rd,
            imm=imm16,
        )

    op = _DP_OPS[opcode]
    if op in _DP_NO_RD and not set_flags:
        return _undecodable(word, addr, cond)  # misc space not matched earlier

    kwargs: dict = {
        "addr": addr,
        "word": word,
        "cond": cond,
        "op": op,
        "set_flags": set_flags,
        "rd": None if op in _DP_NO_RD else rd,
        "rn": None if op in _DP_NO_RN else rn,
    }
    if imm_form:
        imm = _ror32(word & 0xFF, 2 * ((word >> 8) & 0xF))
        kwargs["imm"] = imm
        kwargs["immediates"] = (imm,)
    else:
        kwargs["rm"] = word & 0xF
        kwargs["shift_type"] = (word >> 5) & 3
        if word & 0x10:
            if word & 0x80:
                return _undecodable(word, addr, cond)
            kwargs["shift_reg"] = (word >> 8) & 0xF
        else:
            kwargs["shift_amt"] = (word >> 7) & 0x1F

    writes_pc = kwargs["rd"] == PC
    kwargs["writes_pc"] = writes_pc
    kwargs["klass"] = Klass.BRANCH_REG if writes_pc else Klass.DATAPROC
    return Instruction(**kwargs)


def _decode_loadstore(word: int, addr: int, cond: int) -> Instruction:
    reg_offset = bool(word & 0x02000000)
    if reg_offset and (word & 0x10):
        return _undecodable(word, addr, cond)  # media space
    pre = bool(word & 0x01000000)
    up = bool(word & 0x00800000)
    byte_access = bool(word & 0x00400000)
    wbit = bool(word & 0x00200000)
    is_load = bool(word & 0x00100000)
    rn = (word >> 16) & 0xF
    rd = (word >> 12) & 0xF

    if not pre and wbit:
        return _undecodable(word, addr, cond)  # LDRT/STRT family
    writeback = wbit or not pre

    kwargs: dict = {
        "addr": addr,
        "word": word,
        "cond": cond,
        "op": "ldr" if is_load else "str",
        "is_load": is_load,
        "byte_access": byte_access,
        "pre_index": pre,
        "up": up,
        "writeback": writeback,
        "rd": rd,
        "rn": rn,
    }
    if reg_offset:
        kwargs["rm"] = word & 0xF
        kwargs["shift_type"] = (word >> 5) & 3
        kwargs["shift_amt"] = (word >> 7) & 0x1F
    else:
        kwargs["imm"] = word & 0xFFF
        if is_load and not byte_access and rn == PC and pre and not wbit:
            offset = word & 0xFFF
            kwargs["literal_ref"] = (addr + 8 + offset if up else addr + 8 - offset) & 0xFFFFFFFF

    writes_pc = is_load and rd == PC
    kwargs["writes_pc"] = writes_pc
    kwargs["klass"] = Klass.BRANCH_REG if writes_pc else Klass.LOADSTORE
    return Instruction(**kwargs)


def _decode_block_transfer(word: int, addr: int, cond: int) -> Instruction:
    if word & 0x00400000:  # S bit: user-bank / exception-return forms
        return _undecodable(word, addr, cond)
    is_load = bool(word & 0x00100000)
    reglist = word & 0xFFFF
    writes_pc = is_load and bool(reglist & 0x8000)
    return Instruction(
        addr=addr,
        word=word,
        klass=Klass.BRANCH_REG if writes_pc else Klass.LOADSTORE,
        cond=cond,
        op="ldm" if is_load else "stm",
        is_load=is_load,
        writes_pc=writes_pc,
        pre_index=bool(word & 0x01000000),
        up=bool(word & 0x00800000),
        writeback=bool(word & 0x00200000),
        rn=(word >> 16) & 0xF,
        reglist=reglist,
    )


def decode_word(word: int, addr: int) -> Instruction:
    """Classify one 32-bit word at ``addr``.

    Never raises on strange encodings; those classify as ``undecodable``.
    """
    if addr % 4:
        raise ValueError(f"instruction address {addr:#x} is not 4-aligned")
    word &= 0xFFFFFFFF
    cond = word >> 28
    if cond == 0xF:
        return _undecodable(word, addr, COND_AL)

    op1 = (word >> 25) & 7

    if op1 in (0, 1):
        # misc space (bits 24-23 = 10, S = 0) hides BX/BLX/MRS/MSR
        if (word & 0x0FFFFFD0) == 0x012FFF10:
            blx = bool(word & 0x20)
            return Instruction(
                addr=addr,
                word=word,
                klass=Klass.BRANCH_REG,
                cond=cond,
                op="blx" if blx else "bx",
                is_call=blx,
                writes_pc=True,
                rm=word & 0xF,
            )
        if (word & 0x0FBF0FFF) == 0x010F0000:
            return Instruction(
                addr=addr, word=word, klass=Klass.OTHER, cond=cond, op="mrs",
                rd=(word >> 12) & 0xF,
            )
        if (word & 0x0FB0FFF0) == 0x0120F000 or (word & 0x0FB0F000) == 0x0320F000:
            return Instruction(
                addr=addr, word=word, klass=Klass.OTHER, cond=cond, op="msr",
            )
        if op1 == 0:
            if (word & 0x90) == 0x90:
                # multiplies, swaps, extra (halfword/dual) loads
                return _undecodable(word, addr, cond)
            if (word & 0x01900000) == 0x01000000:
                # remaining misc space (CLZ, BKPT, QADD, ...)
                return _undecodable(word, addr, cond)
        return _decode_dataproc(word, addr, cond)

    if op1 in (2, 3):
        return _decode_loadstore(word, addr, cond)
    if op1 == 4:
        return _decode_block_transfer(word, addr, cond)
    if op1 == 5:
        return _decode_branch(word, addr, cond)
    return _undecodable(word, addr, cond)  # coprocessor / SVC space


def linear_sweep(blob: bytes, base: int) -> list[Instruction]:
    """Decode every 4-byte word in order; exactly len(blob)/4 results.

    Inline data decodes as whatever it happens to encode.  That keeps the
    sweep free of false negatives, which downstream filtering relies on.
    """
    if len(blob) % 4:
        raise MisalignedInput(f"blob length {len(blob)} is not a multiple of 4")
    out = []
    addr = base
    for (word,) in struct.iter_unpack("<I", blob):
        out.append(decode_word(word, addr))
        addr += 4
    return out


_BRANCH_KLASSES = (Klass.BRANCH_IMM, Klass.BRANCH_REG)


@dataclass(frozen=True)
class BasicBlock:
    start: int
    end: int  # exclusive
    succs: tuple[int, ...]


@dataclass(frozen=True)
class CFG:
    blocks: tuple[BasicBlock, ...]
    call_edges: tuple[tuple[int, int], ...]
    base: int
    end: int
    external: frozenset[int] = field(default_factory=frozenset)

    def block_at(self, addr: int) -> BasicBlock | None:
        """Block containing ``addr``, by binary search over sorted blocks."""
        lo, hi = 0, len(self.blocks) - 1
        while lo <= hi:
            mid = (lo + hi) // 2
            blk = self.blocks[mid]
            if addr < blk.start:
                hi = mid - 1
            elif addr >= blk.end:
                lo = mid + 1
            else:
                return blk
        return None


def build_cfg(instrs: list[Instruction]) -> CFG:
    """Form basic blocks: splits after PC-affecting instructions and at every
    statically known branch target; conditional branches keep a fall-through
    successor.  Direct BL sites populate ``call_edges``.
    """
    if not instrs:
        return CFG(blocks=(), call_edges=(), base=0, end=0)

    base = instrs[0].addr
    end = instrs[-1].addr + 4
    in_range = lambda a: base <= a < end

    starts = {base}
    external = set()
    for ins in instrs:
        if ins.klass in _BRANCH_KLASSES or ins.writes_pc:
            nxt = ins.addr + 4
            if nxt < end:
                starts.add(nxt)
        for tgt in ins.branch_targets:
            if in_range(tgt):
                starts.add(tgt)
            else:
                external.add(tgt)

    blocks = []
    call_edges = []

    def close_block(start: int, last: Instruction):
        block_end = last.addr + 4
        succs: list[int] = []
        if last.klass is Klass.BRANCH_IMM:
            target = last.branch_targets[0]
            if last.is_call:
                call_edges.append((last.addr, target))
                if block_end < end:
                    succs.append(block_end)
            else:
                if in_range(target):
                    succs.append(target)
                if last.cond != COND_AL and block_end < end:
                    succs.append(block_end)
        elif last.klass is Klass.BRANCH_REG or last.writes_pc:
            # target not statically known; conditional forms and register
            # calls still fall through
            if (last.is_call or last.cond != COND_AL) and block_end < end:
                succs.append(block_end)
        else:
            if block_end < end:
                succs.append(block_end)
        blocks.append(BasicBlock(start, block_end, tuple(succs)))

    cur_start = base
    pending: Instruction | None = None
    for ins in instrs:
        if pending is not None and ins.addr in starts:
            close_block(cur_start, pending)
            cur_start = ins.addr
        pending = ins
        if ins.klass in _BRANCH_KLASSES or ins.writes_pc:
            close_block(cur_start, ins)
            cur_start = ins.addr + 4
            pending = None

    if pending is not None:
        close_block(cur_start, pending)

    return CFG(
        blocks=tuple(blocks),
        call_edges=tuple(call_edges),
        base=base,
        end=end,
        external=frozenset(external),
    )


def dump_listing(instrs: list[Instruction]) -> str:
    """Debug dump: one line per instruction (addr, word, klass, targets)."""
    lines = []
    for ins in instrs:
        tgt = ",".join(f"{t:#x}" for t in ins.branch_targets)
        lines.append(
            f"{ins.addr:#010x} {ins.word:08x} {ins.klass.value:<12}"
            f" {ins.op:<5} {tgt}"
        )
    return "\n".join(lines) + ("\n" if lines else "")
