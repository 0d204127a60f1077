"""Toolkit for making stripped embedded Linux kernels transplant-ready.

Pipeline stages: firmware container scanning, kernel decompression, A32
linear-sweep disassembly, function recovery, catalog-driven pointer
identification, driver blob patching, and an opaque-memory MMU simulator.
"""

__version__ = "0.1.0"
