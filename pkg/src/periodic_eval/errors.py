"""Exception types shared across the package."""


class DomainError(ValueError):
    """An argument lies outside the mathematical domain of a formula."""


class UsageError(ValueError):
    """An operation was called with an unsupported combination of inputs."""


class NumericalFailure(RuntimeError):
    """A numerical routine could not reach its stated tolerance."""
