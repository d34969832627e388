"""
Exception hierarchy for the band-reinsurance toolkit.

Report-style checks never raise; these are reserved for inputs the
toolkit cannot work with.
"""


class BandReinsuranceError(Exception):
    """Base class for all toolkit errors"""


class ModelError(BandReinsuranceError):
    """Malformed thinning model or severity law"""


class LatticeError(BandReinsuranceError):
    """Invalid lattice distribution or step mismatch"""


class ContractError(BandReinsuranceError):
    """Invalid retained-loss parameters or candidate set"""


class InfeasibleCandidatesError(ContractError):
    """No reinsurance candidate keeps the net premium positive"""


class SolverError(BandReinsuranceError):
    """Finite-difference scheme could not produce a solution"""


class PartitionStructureError(BandReinsuranceError):
    """Classified grid does not form a band partition"""

    def __init__(self, message: str, diagnostics: dict = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class ConfigError(BandReinsuranceError):
    """Configuration file could not be parsed or validated"""

    def __init__(self, message: str, key: str = None):
        super().__init__(message)
        self.key = key


class ArtifactError(BandReinsuranceError):
    """Missing or inconsistent run artifacts"""
