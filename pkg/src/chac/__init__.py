"""Spectral solver and coefficient-recovery toolkit for a coupled
conserved/non-conserved phase-field system on the periodic box [-1, 1]^d."""

from .grid import (
    AsymmetricSpectrumError,
    MeanViolationError,
    PeriodicGrid,
    ScalarField,
    Spectrum,
    biharmonic,
    dealias,
    gradient,
    inner_product,
    laplacian,
    norm,
    read_field_csv,
    solve_poisson_periodic,
    to_physical,
    to_spectrum,
    write_field_csv,
)
from .potentials import (
    CoefficientField,
    CouplingSeries,
    EvaluationOverflowError,
    PotentialSeries,
    SystemParams,
    double_well_potential,
    load_potential_manifest,
    validate_admissible,
)
from .forward import (
    BlowUpError,
    SolverConfig,
    StateVec,
    Trajectory,
    diagnostics,
    solve_forward,
    solve_linear_ch,
    zero_uniqueness_check,
)
from .jets import JetField, jet_compose

__version__ = "1.0.0"

__all__ = [
    "AsymmetricSpectrumError",
    "BlowUpError",
    "CoefficientField",
    "CouplingSeries",
    "EvaluationOverflowError",
    "JetField",
    "MeanViolationError",
    "PeriodicGrid",
    "PotentialSeries",
    "ScalarField",
    "SolverConfig",
    "Spectrum",
    "StateVec",
    "SystemParams",
    "Trajectory",
    "biharmonic",
    "dealias",
    "diagnostics",
    "double_well_potential",
    "gradient",
    "inner_product",
    "jet_compose",
    "laplacian",
    "load_potential_manifest",
    "norm",
    "read_field_csv",
    "solve_forward",
    "solve_linear_ch",
    "solve_poisson_periodic",
    "to_physical",
    "to_spectrum",
    "validate_admissible",
    "write_field_csv",
    "zero_uniqueness_check",
]
