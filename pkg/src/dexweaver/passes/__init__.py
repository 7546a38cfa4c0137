"""Bytecode transformations and the relocation engine they share."""

from .adremove import AdConfig, neutralize_ads
from .relocate import Insertion, relocate, splice
from .report import InstrumentationReport, SkippedMethod
from .weave import MONITOR_CLASS, STUB_CLASS, WeaveConfig, weave_permissions

__all__ = [
    "MONITOR_CLASS", "STUB_CLASS", "AdConfig", "Insertion", "InstrumentationReport", "SkippedMethod",
    "WeaveConfig", "neutralize_ads", "relocate", "splice", "weave_permissions",
]
