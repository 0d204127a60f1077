"""Concrete A32 micro-interpreter used to check rewritten code.

Executes the decoder's supported subset over any memory object exposing
``read_word(addr)`` / ``write_word(addr, value)`` / ``fetch_exec(addr, n)``
(both the MMU address space and a flat adapter qualify).  This exists for
verification harnesses, not emulation: it runs small code windows and stops
at an address or a step budget.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

from .disasm import COND_AL, LR, PC, Instruction, Klass, decode_word

_MASK = 0xFFFFFFFF


class ExecError(RuntimeError):
    pass


class FlatMemory:
    """Flat adapter so the interpreter can run over plain bytes."""

    def __init__(self, blob: bytes | bytearray, base: int):
        self.data = bytearray(blob)
        self.base = base

    def read_word(self, addr: int) -> int:
        off = addr - self.base
        if not (0 <= off and off + 4 <= len(self.data)):
            raise ExecError(f"read outside flat memory at {addr:#010x}")
        return struct.unpack_from("<I", self.data, off)[0]

    def write_word(self, addr: int, value: int):
        off = addr - self.base
        if not (0 <= off and off + 4 <= len(self.data)):
            raise ExecError(f"write outside flat memory at {addr:#010x}")
        struct.pack_into("<I", self.data, off, value & _MASK)

    def fetch_exec(self, addr: int, count: int) -> bytes:
        off = addr - self.base
        if not (0 <= off and off + count <= len(self.data)):
            raise ExecError(f"fetch outside flat memory at {addr:#010x}")
        return bytes(self.data[off : off + count])


@dataclass
class Cpu:
    regs: list[int] = field(default_factory=lambda: [0] * 16)
    n: bool = False
    z: bool = False
    c: bool = False
    v: bool = False

    def get(self, index: int) -> int:
        if index == PC:
            # reads of PC observe the two-instruction pipeline bias
            return (self.regs[PC] + 8) & _MASK
        return self.regs[index]

    def set(self, index: int, value: int):
        self.regs[index] = value & _MASK


def _cond_true(cpu: Cpu, cond: int) -> bool:
    n, z, c, v = cpu.n, cpu.z, cpu.c, cpu.v
    return {
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
        0xE: True,
    }[cond]


def _operand(cpu: Cpu, ins: Instruction) -> int:
    if ins.imm is not None:
        return ins.imm
    value = cpu.get(ins.rm)
    if ins.shift_reg is not None:
        amount = cpu.get(ins.shift_reg) & 0xFF
    else:
        amount = ins.shift_amt
        if amount == 0 and ins.shift_type in (1, 2):
            amount = 32
        elif amount == 0 and ins.shift_type == 3:
            raise ExecError("RRX not supported")
    if amount == 0:
        return value
    if ins.shift_type == 0:
        return (value << amount) & _MASK
    if ins.shift_type == 1:
        return (value >> amount) & _MASK if amount < 32 else 0
    if ins.shift_type == 2:
        signed = value - (1 << 32) if value & 0x80000000 else value
        return (signed >> min(amount, 31)) & _MASK
    amount &= 31
    return ((value >> amount) | (value << (32 - amount))) & _MASK


_ALU = {
    "and": lambda a, b: a & b,
    "eor": lambda a, b: a ^ b,
    "sub": lambda a, b: a - b,
    "rsb": lambda a, b: b - a,
    "add": lambda a, b: a + b,
    "orr": lambda a, b: a | b,
    "bic": lambda a, b: a & ~b,
    "mov": lambda a, b: b,
    "mvn": lambda a, b: ~b,
}


def step(cpu: Cpu, ins: Instruction, mem) -> None:
    """Execute one decoded instruction; advances PC."""
    pc_next = (ins.addr + 4) & _MASK
    if ins.klass is Klass.UNDECODABLE:
        raise ExecError(f"undecodable word {ins.word:08x} at {ins.addr:#010x}")
    if not _cond_true(cpu, ins.cond):
        cpu.regs[PC] = pc_next
        return

    if ins.klass is Klass.BRANCH_IMM:
        if ins.is_call:
            cpu.set(LR, ins.addr + 4)
        cpu.regs[PC] = ins.branch_targets[0]
        return

    if ins.op in ("bx", "blx"):
        target = cpu.get(ins.rm)
        if ins.op == "blx":
            cpu.set(LR, ins.addr + 4)
        if target & 1:
            raise ExecError("interworking branch to Thumb is out of scope")
        cpu.regs[PC] = target & ~3
        return

    if ins.klass is Klass.DATAPROC or (
        ins.klass is Klass.BRANCH_REG and ins.op in _ALU or ins.op in ("movw", "movt")
    ):
        if ins.op == "movw":
            cpu.set(ins.rd, ins.imm)
        elif ins.op == "movt":
            cpu.set(ins.rd, (cpu.get(ins.rd) & 0xFFFF) | (ins.imm << 16))
        elif ins.op in ("cmp", "cmn", "tst", "teq"):
            left = cpu.get(ins.rn)
            right = _operand(cpu, ins)
            if ins.op == "cmp":
                result = (left - right) & _MASK
                cpu.n = bool(result & 0x80000000)
                cpu.z = result == 0
                cpu.c = left >= right
                cpu.v = bool((left ^ right) & (left ^ result) & 0x80000000)
            elif ins.op == "cmn":
                result = (left + right) & _MASK
                cpu.n = bool(result & 0x80000000)
                cpu.z = result == 0
                cpu.c = left + right > _MASK
                cpu.v = bool(~(left ^ right) & (left ^ result) & 0x80000000)
            else:
                result = (left & right if ins.op == "tst" else left ^ right) & _MASK
                cpu.n = bool(result & 0x80000000)
                cpu.z = result == 0
        else:
            fn = _ALU.get(ins.op)
            if fn is None:
                raise ExecError(f"unsupported data op {ins.op}")
            left = cpu.get(ins.rn) if ins.rn is not None else 0
            value = fn(left, _operand(cpu, ins)) & _MASK
            if ins.set_flags and ins.rd != PC:
                cpu.n = bool(value & 0x80000000)
                cpu.z = value == 0
                # C/V left unmodelled for the S-suffixed ALU forms
            if ins.rd == PC:
                cpu.regs[PC] = value & ~3
                return
            cpu.set(ins.rd, value)
        cpu.regs[PC] = pc_next
        return

    if ins.op in ("ldr", "str"):
        base_reg = cpu.regs[ins.rn] if ins.rn != PC else (ins.addr + 8)
        offset = ins.imm if ins.imm is not None else _operand(cpu, ins)
        target = (base_reg + offset if ins.up else base_reg - offset) & _MASK
        addr = target if ins.pre_index else base_reg & _MASK
        if ins.byte_access:
            raise ExecError("byte loads/stores not needed by the harness")
        if ins.op == "ldr":
            value = mem.read_word(addr)
            if ins.rd == PC:
                if ins.writeback:
                    cpu.set(ins.rn, target)
                cpu.regs[PC] = value & ~3
                return
            cpu.set(ins.rd, value)
        else:
            mem.write_word(addr, cpu.get(ins.rd))
        if ins.writeback:
            cpu.set(ins.rn, target)
        cpu.regs[PC] = pc_next
        return

    if ins.op in ("ldm", "stm"):
        regs = [i for i in range(16) if ins.reglist & (1 << i)]
        count = len(regs)
        base = cpu.regs[ins.rn]
        lowest = base + 4 * (1 if ins.pre_index else 0) if ins.up else (
            base - 4 * count + 4 * (0 if ins.pre_index else 1)
        )
        addr = lowest & _MASK
        loaded_pc = None
        for reg in regs:
            if ins.op == "ldm":
                value = mem.read_word(addr)
                if reg == PC:
                    loaded_pc = value
                else:
                    cpu.set(reg, value)
            else:
                mem.write_word(addr, cpu.get(reg))
            addr = (addr + 4) & _MASK
        if ins.writeback:
            delta = 4 * count
            cpu.set(ins.rn, base + delta if ins.up else base - delta)
        if loaded_pc is not None:
            cpu.regs[PC] = loaded_pc & ~3
            return
        cpu.regs[PC] = pc_next
        return

    if ins.klass is Klass.OTHER:
        cpu.regs[PC] = pc_next  # MRS/MSR treated as no-ops
        return

    raise ExecError(f"unhandled instruction {ins.op} at {ins.addr:#010x}")


def run(
    mem,
    start: int,
    stop_addrs: set[int] | None = None,
    cpu: Cpu | None = None,
    max_steps: int = 10_000,
) -> Cpu:
    """Run until PC hits a stop address or the budget is exhausted."""
    cpu = cpu if cpu is not None else Cpu()
    cpu.regs[PC] = start & _MASK
    stop_addrs = stop_addrs or set()
    for _ in range(max_steps):
        pc = cpu.regs[PC]
        if pc in stop_addrs:
            return cpu
        word = struct.unpack("<I", mem.fetch_exec(pc, 4))[0]
        ins = decode_word(word, pc)
        step(cpu, ins, mem)
    raise ExecError(f"step budget exhausted at {cpu.regs[PC]:#010x}")
