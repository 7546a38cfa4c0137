"""Rewrite Dalvik bytecode to strip ad libraries and weave permission checks."""

from .dex import DexFile, parse_dex, write_dex
from .microasm import assemble, disassemble

__version__ = "0.1.0"

__all__ = ["DexFile", "assemble", "disassemble", "parse_dex", "write_dex"]
