"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid architecture text, run configuration, or layer wiring."""


class QuantizationError(ValueError):
    """Invalid quantizer spec or non-finite quantizer input."""


class DataFormatError(ValueError):
    """Malformed dataset file (bad magic, truncated payload, bad labels)."""


class BatchAccountingError(ValueError):
    """Accumulated micro-batch examples disagree with the declared batch."""


class BudgetError(RuntimeError):
    """Privacy budget exhausted before any training could be recorded."""
