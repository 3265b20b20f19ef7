"""Exception taxonomy shared by all alignlab modules."""


class AlignlabError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(AlignlabError):
    """Tensor dimensions incompatible with the requested operation."""


class NumericError(AlignlabError):
    """A non-finite value (NaN or inf) was produced or encountered."""


class ContractError(AlignlabError):
    """A documented precondition was violated by the caller."""


class ConfigError(AlignlabError):
    """Invalid, unknown, or inconsistent configuration."""


class TokenizerError(AlignlabError):
    """Text contains characters outside the model vocabulary."""


class DataError(AlignlabError):
    """Synthetic data generation or manifest handling failed."""


class ScoringError(AlignlabError):
    """Decode output and reference manifest do not line up."""


class ReportError(AlignlabError):
    """Report inputs are mutually inconsistent."""
