"""Exception hierarchy shared across the package."""


class FlowforgeError(Exception):
    """Base class for all errors raised by this package."""


class CaptureFormatError(FlowforgeError):
    """The capture file is not a readable classic pcap."""


class TruncatedCaptureError(CaptureFormatError):
    """A record is cut short; ``offset`` is the byte position of the partial record."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class UnsupportedLinkTypeError(CaptureFormatError):
    """The capture's link type is not one this package decodes."""


class FrameDecodeError(FlowforgeError):
    """A frame is malformed, e.g. shorter than its declared header lengths."""


class NotIPv4Error(FlowforgeError):
    """Signal that a frame carries a non-IPv4 ethertype; skippable, not fatal."""

    def __init__(self, ethertype: int):
        super().__init__(f"not an IPv4 frame (ethertype 0x{ethertype:04x})")
        self.ethertype = ethertype


class ConfigError(FlowforgeError):
    """A scenario configuration violates its schema or invariants."""


class LabellingError(FlowforgeError):
    """Ground-truth inputs are inconsistent (orphan owner, unmapped device IP)."""


class DataFormatError(FlowforgeError):
    """A dataset or log file cannot be parsed as specified."""


class SchemaMismatchError(DataFormatError):
    """Train and test datasets disagree on feature columns."""

    def __init__(self, missing: list, extra: list):
        self.missing = list(missing)
        self.extra = list(extra)
        super().__init__(
            "feature schema mismatch: missing columns "
            f"{self.missing or 'none'}, unexpected columns {self.extra or 'none'}"
        )
