"""Exception hierarchy shared by every dexweaver module."""


class DexWeaverError(Exception):
    """Base class for all toolchain errors."""


# -- container format -------------------------------------------------------

class DexFormatError(DexWeaverError):
    """The byte stream is not a DEX file this toolchain can model."""


class TruncatedFile(DexFormatError):
    pass


class BadMagic(DexFormatError):
    pass


class DigestMismatch(DexFormatError):
    """Header checksum or signature disagrees with the file content."""


class MalformedIndex(DexFormatError):
    """A pool reference points outside its pool."""


class MalformedCode(DexFormatError):
    """Bytecode that cannot be decoded or whose targets miss instruction boundaries."""


class BudgetExceeded(DexWeaverError):
    """The tracked working set outgrew the configured memory ceiling."""

    def __init__(self, used: int, ceiling: int, what: str = ""):
        self.used = used
        self.ceiling = ceiling
        self.what = what
        super().__init__(
            f"working set {used} bytes exceeds ceiling {ceiling} bytes"
            + (f" while {what}" if what else "")
        )


# -- rewriting --------------------------------------------------------------

class RegisterPressure(DexWeaverError):
    """A register operand no longer fits the encoding width of its format."""


class LayoutOverflow(DexWeaverError):
    """A section, offset, index or literal exceeds what the format can encode."""


class UnsupportedRegion(DexWeaverError):
    """Relocation cannot safely move code in this method."""


# -- assembler --------------------------------------------------------------

class AsmError(DexWeaverError):
    def __init__(self, message: str, line: int | None = None, column: int | None = None):
        self.line = line
        self.column = column
        where = ""
        if line is not None:
            where = f"line {line}" + (f", column {column}" if column is not None else "") + ": "
        super().__init__(where + message)


class AsmSyntaxError(AsmError):
    pass


class UnknownOpcode(AsmError):
    pass


class UndefinedLabel(AsmError):
    pass


class DuplicateLabel(AsmError):
    pass


class OpaqueRegion(DexWeaverError):
    """A method body holds instructions outside the supported subset."""


# -- interpreter ------------------------------------------------------------

class InterpError(DexWeaverError):
    pass


class UnknownEntry(InterpError):
    pass


class ArityMismatch(InterpError):
    pass


class UnsupportedOpcode(InterpError):
    pass


# -- packaging / signing ----------------------------------------------------

class PackageError(DexWeaverError):
    pass


class BadZip(PackageError):
    pass


class MissingClassesDex(PackageError):
    pass


class EntryTooLarge(PackageError):
    pass


class CryptoFailure(PackageError):
    pass


# -- configuration ----------------------------------------------------------

class ConfigError(DexWeaverError):
    """Malformed policy, permission map, keystore or pass configuration."""


class DegenerateSamples(DexWeaverError):
    """Too few samples, or no spread in x, to fit a line."""
