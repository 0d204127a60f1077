"""Constant propagation over straight-line A32 code.

Tracks sixteen registers as Known(value)/Unknown plus an optional NZCV
snapshot.  Values become Known only through immediate operands, Known-operand
arithmetic, or literal-pool loads from the image bytes; everything else
degrades to Unknown.  Memory stores never affect the state, which keeps the
propagation sound (a Known result always matches concrete execution).
"""

from __future__ import annotations

from dataclasses import dataclass, replace

from .disasm import COND_AL, PC, Instruction, Klass

UNKNOWN = None

_MASK = 0xFFFFFFFF


@dataclass(frozen=True)
class Flags:
    n: bool
    z: bool
    c: bool
    v: bool


@dataclass(frozen=True)
class RegisterState:
    regs: tuple[int | None, ...] = (UNKNOWN,) * 16
    flags: Flags | None = None

    def get(self, index: int) -> int | None:
        return self.regs[index]

    def set(self, index: int, value: int | None) -> "RegisterState":
        regs = list(self.regs)
        regs[index] = value if value is None else value & _MASK
        return replace(self, regs=tuple(regs))

    def with_flags(self, flags: Flags | None) -> "RegisterState":
        return replace(self, flags=flags)

    @classmethod
    def seeded(cls, **regs: int) -> "RegisterState":
        """State with named registers known, e.g. ``seeded(r4=0x8000, sp=0x100)``."""
        names = {f"r{i}": i for i in range(16)}
        names.update(sp=13, lr=14, pc=15)
        vals: list[int | None] = [UNKNOWN] * 16
        for name, value in regs.items():
            vals[names[name]] = value & _MASK
        return cls(regs=tuple(vals))


class ImageReader:
    """Read-only little-endian word access into the image bytes."""

    def __init__(self, blob: bytes, base: int):
        self.blob = blob
        self.base = base

    def word(self, addr: int) -> int | None:
        off = addr - self.base
        if 0 <= off and off + 4 <= len(self.blob):
            return int.from_bytes(self.blob[off : off + 4], "little")
        return None


def _read_reg(state: RegisterState, index: int, instr_addr: int) -> int | None:
    if index == PC:
        return (instr_addr + 8) & _MASK
    return state.get(index)


def _shifted_operand(state: RegisterState, ins: Instruction) -> int | None:
    if ins.imm is not None:
        return ins.imm
    value = _read_reg(state, ins.rm, ins.addr)
    if value is None:
        return None
    if ins.shift_reg is not None:
        return None  # register-specified shifts stay out of scope
    amt = ins.shift_amt
    if amt == 0 and ins.shift_type == 0:
        return value
    if ins.shift_type == 0:  # LSL
        return (value << amt) & _MASK
    if ins.shift_type == 1:  # LSR (amt 0 encodes 32)
        return 0 if amt == 0 else value >> amt
    if ins.shift_type == 2:  # ASR
        amt = 32 if amt == 0 else amt
        signed = value - (1 << 32) if value & 0x80000000 else value
        return (signed >> amt) & _MASK
    if amt == 0:
        return None  # RRX needs the carry flag; not worth modelling
    return ((value >> amt) | (value << (32 - amt))) & _MASK


_ALU = {
    "and": lambda a, b: a & b,
    "eor": lambda a, b: a ^ b,
    "sub": lambda a, b: a - b,
    "rsb": lambda a, b: b - a,
    "add": lambda a, b: a + b,
    "orr": lambda a, b: a | b,
    "bic": lambda a, b: a & ~b,
}


def _cond_passes(cond: int, flags: Flags | None) -> bool | None:
    """True/False when decidable, None when flags are Unknown."""
    if cond == COND_AL:
        return True
    if flags is None:
        return None
    n, z, c, v = flags.n, flags.z, flags.c, flags.v
    table = {
        0x0: z,
        0x1: not z,
        0x2: c,
        0x3: not c,
        0x4: n,
        0x5: not n,
        0x6: v,
        0x7: not v,
        0x8: c and not z,
        0x9: not c or z,
        0xA: n == v,
        0xB: n != v,
        0xC: not z and n == v,
        0xD: z or n != v,
    }
    return table[cond]


def step(
    state: RegisterState, ins: Instruction, image: ImageReader | None = None
) -> RegisterState:
    """Advance the state over one instruction; never raises.

    Unsupported instructions and Unknown operands clobber their destination
    to Unknown rather than guessing.
    """
    passes = _cond_passes(ins.cond, state.flags)
    if passes is False:
        return state
    conditional_unknown = passes is None

    def put(index: int | None, value: int | None) -> RegisterState:
        if index is None or index == PC:
            return state
        return state.set(index, None if conditional_unknown else value)

    if ins.klass is Klass.DATAPROC:
        if ins.op == "movw":
            return put(ins.rd, ins.imm)
        if ins.op == "movt":
            low = state.get(ins.rd)
            if low is None:
                return put(ins.rd, None)
            return put(ins.rd, (low & 0xFFFF) | (ins.imm << 16))
        operand = _shifted_operand(state, ins)
        if ins.op == "mov":
            return put(ins.rd, operand)
        if ins.op == "mvn":
            return put(ins.rd, None if operand is None else ~operand & _MASK)
        if ins.op in ("cmp", "cmn", "tst", "teq"):
            if conditional_unknown:
                return state.with_flags(None)
            left = _read_reg(state, ins.rn, ins.addr)
            if ins.op == "cmp" and left is not None and operand is not None:
                result = (left - operand) & _MASK
                flags = Flags(
                    n=bool(result & 0x80000000),
                    z=result == 0,
                    c=left >= operand,
                    v=bool((left ^ operand) & (left ^ result) & 0x80000000),
                )
                return state.with_flags(flags)
            return state.with_flags(None)
        fn = _ALU.get(ins.op)
        if fn is None:  # adc/sbc/rsc depend on carry; drop to Unknown
            return put(ins.rd, None)
        left = _read_reg(state, ins.rn, ins.addr)
        if left is None or operand is None:
            value = None
        else:
            value = fn(left, operand) & _MASK
        new = put(ins.rd, value)
        if ins.set_flags:
            new = new.with_flags(None)
        return new

    if ins.klass is Klass.LOADSTORE and ins.op in ("ldr", "str"):
        new = state
        if ins.op == "ldr":
            # only literal-pool words are trusted: anything else may have
            # been stored to at runtime and would poison the propagation
            value = None
            if ins.literal_ref is not None and image is not None:
                value = image.word(ins.literal_ref)
            new = put(ins.rd, value)
        if ins.writeback and ins.rn is not None and ins.rn != PC:
            base_val = _read_reg(state, ins.rn, ins.addr)
            if base_val is None or ins.imm is None:
                new = new.set(ins.rn, None)
            else:
                delta = ins.imm if ins.up else -ins.imm
                new = new.set(
                    ins.rn, None if conditional_unknown else (base_val + delta) & _MASK
                )
        return new

    if ins.klass is Klass.LOADSTORE and ins.op == "ldm":
        new = state
        for i in range(16):
            if ins.reglist & (1 << i) and i != PC:
                new = new.set(i, None)
        if ins.writeback and ins.rn is not None:
            new = new.set(ins.rn, None)
        return new

    if ins.klass is Klass.LOADSTORE and ins.op == "stm":
        if ins.writeback and ins.rn is not None:
            return state.set(ins.rn, None)
        return state

    if ins.is_call:
        # BL/BLX write the return address; a Known link register is what the
        # warning-site argument recovery keys on, so model it exactly
        value = (ins.addr + 4) & _MASK
        return state.set(14, None if conditional_unknown else value)

    if ins.klass in (Klass.BRANCH_IMM, Klass.BRANCH_REG, Klass.OTHER):
        if ins.op == "mrs" and ins.rd is not None:
            return state.set(ins.rd, None)
        return state

    return state  # undecodable: no modelled effect


def run_block(
    instrs: list[Instruction],
    init: RegisterState | None = None,
    image: ImageReader | None = None,
) -> RegisterState:
    """Left fold of ``step`` over a straight-line window."""
    state = init if init is not None else RegisterState()
    for ins in instrs:
        state = step(state, ins, image)
    return state
