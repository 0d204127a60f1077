"""Exception hierarchy shared across the toolkit.

Every error carries a stable ``code`` so the CLI can emit machine-readable
error records without string matching on messages.
"""


class ToolError(Exception):
    """Base class for all toolkit errors."""

    code = "error"


class TruncatedContainer(ToolError):
    """A container header declares more payload bytes than remain."""

    code = "truncated-container"


class MisalignedInput(ToolError):
    """Input length is not a multiple of the 4-byte instruction width."""

    code = "misaligned-input"


class PatternNotFound(ToolError):
    """The decompressor-stub shape does not occur in the instruction stream."""

    code = "pattern-not-found"


class Unrecoverable(ToolError):
    """A register value could not be recovered by constant propagation."""

    code = "unrecoverable-register"


class NoCompressedStream(ToolError):
    """No known compressed-stream magic occurs in the payload."""

    code = "no-compressed-stream"


class CorruptStream(ToolError):
    """A compressed stream was found but failed to decode."""

    code = "corrupt-stream"


class MissingAnchor(ToolError):
    """Neither machine-description provider function was resolved."""

    code = "missing-anchor"


class CatalogError(ToolError):
    """The pointer catalog file is malformed."""

    code = "catalog-error"


class DriverFormatError(ToolError):
    """The driver container file is malformed."""

    code = "driver-format-error"


class UnresolvedImport(ToolError):
    """One or more driver imports have no resolved kernel address."""

    code = "unresolved-import"

    def __init__(self, names):
        self.names = tuple(names)
        super().__init__("unresolved imports: " + ", ".join(self.names))


class ThunkPoolOverflow(ToolError):
    """The indirect-call pool would grow past the opaque-region budget."""

    code = "thunk-pool-overflow"


class MissingExport(ToolError):
    """The driver does not export a required entry point."""

    code = "missing-export"


class UnmappedAddress(ToolError):
    """A patch address falls outside the writable byte store."""

    code = "unmapped-address"


class GuestFault(ToolError):
    """A guest page-table walk hit an invalid descriptor or denied access.

    ``level`` is the table level (1 or 2) where the walk stopped, ``vaddr``
    the faulting virtual address, ``reason`` one of ``invalid`` / ``perm``.
    """

    code = "guest-fault"

    def __init__(self, level, vaddr, reason="invalid"):
        self.level = level
        self.vaddr = vaddr
        self.reason = reason
        super().__init__(f"guest fault level {level} at {vaddr:#010x} ({reason})")


class OutOfOpaqueRange(ToolError):
    """A mapping request does not fit inside the opaque window."""

    code = "out-of-opaque-range"


class ImageTooLarge(ToolError):
    """A driver image does not fit in the opaque region."""

    code = "image-too-large"
