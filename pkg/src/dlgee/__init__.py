"""Regression with one explanatory variable left-censored at a detection limit.

The package couples a mean-only (semiparametric GLM) primary regression with
an auxiliary model for the censored covariate -- parametric truncated-normal
or semiparametric AFT with a Kaplan-Meier residual distribution -- and solves
generalized estimating equations for the primary coefficients.  Inference uses
a plain sandwich, a nuisance-corrected sandwich, or sample-splitting with
cross-fitting; a Monte Carlo harness reproduces the accompanying simulation
studies.
"""

__version__ = "0.1.0"

from .auxiliary import (
    ParametricAuxFit,
    SemiparAuxFit,
    StepCDF,
    Transform,
    fit_aft_gehan,
    fit_auxiliary,
    fit_truncated_normal,
    gehan_loss,
    km_residual_cdf,
)
from .data import ColumnSpec, Dataset, FitConfig, load_csv, split_two_folds, validate, write_csv
from .errors import ConvergenceError, DlgeeError, InputError, ModelError, ValidationError
from .numerics import (
    RootSolveOptions,
    finite_diff_jacobian,
    invert_spd,
    is_psd,
    newton_solve,
    normal_pdf_cdf,
    solve_spd,
    truncated_mean_above,
    truncated_mean_below,
)
from .primary import (
    MeanModel,
    PrimaryFit,
    WaldResult,
    complete_case_fit,
    conditional_mean,
    fit_primary,
    gee_fit,
    variance_known_eta,
    variance_sscf,
    variance_theorem1,
    wald_test,
)
from .simulation import MCReport, MethodSummary, ScenarioConfig, full_data_fit, generate, run_mc

__all__ = [name for name in dir() if not name.startswith("_")]
