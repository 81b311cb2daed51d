"""Exception hierarchy.

Every error raised by the package derives from ThermodetError so CLI
subcommands can map failures to stable exit codes.
"""


class ThermodetError(Exception):
    """Base class for all package errors."""

    category = "error"


class ConfigError(ThermodetError):
    """Invalid configuration value or combination."""

    category = "config"


class DimensionError(ThermodetError):
    """Array/tensor shape does not match what the operation requires."""

    category = "dimension"


class ValidationError(ThermodetError):
    """Data fails a domain invariant (bad box, out-of-range temperature)."""

    category = "validation"


class FormatError(ThermodetError):
    """Malformed file: bad magic, unparseable structure."""

    category = "format"


class UnsupportedVersionError(FormatError):
    """Container version newer than this reader understands."""

    category = "version"


class CorruptionError(ThermodetError):
    """File structurally recognized but payload truncated/inconsistent."""

    category = "corruption"


class StructureError(ThermodetError):
    """Model graph violates a structural requirement."""

    category = "structure"


class CoverageError(ThermodetError):
    """Quantization ranges do not cover every tensor."""

    category = "coverage"


class MetricError(ThermodetError):
    """Metric undefined for the given inputs (e.g. zero ground truth)."""

    category = "metric"


class TrainingDivergedError(ThermodetError):
    """Loss became non-finite during optimization."""

    category = "diverged"


class PruneError(ThermodetError):
    """Requested pruning step cannot be satisfied."""

    category = "prune"
