"""DEX container model, parser, serializer and scans."""

from .model import (
    CATCH_ALL, ClassDef, CodeItem, DexFile, DexHeader, EncodedField, EncodedMethod, FieldId,
    Handler, MethodId, ProtoId, TryItem, format_signature, package_of, parse_signature,
)
from .opcodes import SUBSET, Instruction
from .reader import parse_dex
from .scan import CallSite, find_protected_invocations, find_try_blocks
from .values import NO_INDEX
from .writer import write_dex

__all__ = [
    "CATCH_ALL", "NO_INDEX", "SUBSET", "CallSite", "ClassDef", "CodeItem", "DexFile", "DexHeader",
    "EncodedField", "EncodedMethod", "FieldId", "Handler", "Instruction", "MethodId", "ProtoId",
    "TryItem", "find_protected_invocations", "find_try_blocks", "format_signature", "package_of",
    "parse_dex", "parse_signature", "write_dex",
]
