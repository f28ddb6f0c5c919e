"""Exception hierarchy shared across the toolkit."""


class MMEventError(Exception):
    """Base class for all toolkit errors."""


class ManifestFormatError(MMEventError):
    """Manifest header is missing, duplicated, or otherwise malformed."""


class ManifestRowError(MMEventError):
    def __init__(self, row: int, message: str):
        super().__init__(f"row {row}: {message}")
        self.row = row


class IntegrityError(MMEventError):
    """Dataset-level constraint violated (e.g. duplicate ids)."""


class ConfigurationError(MMEventError):
    pass


class ShapeError(MMEventError, ValueError):
    pass


class NumericError(MMEventError, ArithmeticError):
    def __init__(self, message: str, **diagnostics):
        detail = ", ".join(f"{k}={v}" for k, v in diagnostics.items())
        super().__init__(f"{message} ({detail})" if detail else message)
        self.diagnostics = diagnostics


class BackendError(MMEventError):
    """A pretrained encoder backend could not be loaded or run."""


class InputError(MMEventError):
    pass


class ContractError(MMEventError, ValueError):
    pass


class TransportError(MMEventError):
    """A single request attempt failed; the client may retry."""

    def __init__(self, message: str, attempt: int = 0, retryable: bool = True):
        super().__init__(message)
        self.attempt = attempt
        self.retryable = retryable


class RateLimitError(TransportError):
    def __init__(self, message: str = "rate limited", retry_after: float = 0.0, attempt: int = 0):
        super().__init__(message, attempt=attempt)
        self.retry_after = retry_after


class DeliveryError(MMEventError):
    """Retries exhausted without a response."""

    def __init__(self, message: str, attempts: int):
        super().__init__(f"{message} after {attempts} attempts")
        self.attempts = attempts
