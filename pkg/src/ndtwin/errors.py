"""Exception hierarchy. Every error carries a stable ``code`` used by the CLI and server."""

from __future__ import annotations


class NDTError(Exception):
    code = "NDT_ERROR"


class MalformedHeader(NDTError):
    code = "MALFORMED_HEADER"


class UnsupportedDatatype(NDTError):
    code = "UNSUPPORTED_DATATYPE"


class TruncatedPayload(NDTError):
    code = "TRUNCATED_PAYLOAD"


class InvariantViolation(NDTError):
    code = "INVARIANT_VIOLATION"


class SpecMismatch(NDTError):
    code = "SPEC_MISMATCH"


class NonPositiveDistance(NDTError):
    code = "NON_POSITIVE_DISTANCE"


class DegenerateScene(NDTError):
    code = "DEGENERATE_SCENE"


class EmptyPathList(NDTError):
    code = "EMPTY_PATH_LIST"


class OutOfBounds(NDTError):
    code = "OUT_OF_BOUNDS"


class UnsupportedNumerology(NDTError):
    code = "UNSUPPORTED_NUMEROLOGY"


class OutOfRange(NDTError):
    code = "OUT_OF_RANGE"


class InsufficientObservations(NDTError):
    code = "INSUFFICIENT_OBSERVATIONS"


class DegenerateGeometry(NDTError):
    code = "DEGENERATE_GEOMETRY"


class Unreachable(NDTError):
    code = "UNREACHABLE"


class BlockedEndpoint(NDTError):
    code = "BLOCKED_ENDPOINT"


class ConfigError(NDTError):
    code = "CONFIG_ERROR"
