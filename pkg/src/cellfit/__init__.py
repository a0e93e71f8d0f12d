"""Identification of a coupled electro-thermal battery cell model.

The package simulates a double-capacitor equivalent circuit coupled to a
two-node thermal circuit, evaluates the Gaussian log-likelihood of measured
voltage/temperature records under it, and recovers the ten physical
parameters by Gaussian-process Bayesian optimization with round-based
ellipsoidal search-space reduction.
"""

from .model import (
    NOMINAL,
    PARAM_NAMES,
    SEARCH_BOX,
    T_REF,
    CellParams,
    OcvCurve,
    arrhenius_resistance,
    heat_generation,
    output,
    search_box_array,
    soc,
    state_derivative,
)
from .simulate import (
    CurrentProfile,
    Dataset,
    SimulationDivergedError,
    generate_dataset,
    integrate,
    load_dataset,
    load_profile,
    noiseless_outputs,
    save_dataset,
    synth_profile,
)
from .likelihood import DEFAULT_FLOOR, LikelihoodConfig, log_likelihood, standardize
from .gp import GPHypers, GPModel, SingularKernelError, fit, kernel_matrix, posterior
from .bayesopt import (
    DegenerateRegionError,
    Ellipsoid,
    OptRun,
    Schedule,
    expected_improvement,
    full_box_region,
    latin_hypercube,
    mvee,
    propose_next,
    run_identification,
    sample_region,
)

__all__ = [name for name in dir() if not name.startswith("_")]
