"""Exception types shared across the package."""


class ContractError(ValueError):
    """An operation was called with inputs violating its contract."""


class ConfigError(ValueError):
    """Invalid configuration (unknown key, bad value, inconsistent combination)."""


class NumericsError(RuntimeError):
    """Non-finite values encountered where finiteness is required."""


class OracleAccessError(RuntimeError):
    """Ground-truth distractor information requested from a non-oracle environment."""


class BufferNotReady(RuntimeError):
    """Replay buffer cannot yet serve the requested sample; the trainer should wait."""


class StaleAnnotationError(ValueError):
    """Attempt to annotate an episode with an implicit-action version older than stored."""
