from cpmcmc.auxiliary import AuxBlock, AuxLayout, CorrelationParam
from cpmcmc.diagnostics import (
    DiagnosticsSummary,
    clt_moment_checks,
    iact,
    loglik_error_samples,
    loglik_ratio_samples,
    measure_loglik_errors,
    summarize_chain,
)
from cpmcmc.estimators import ISEstimator, LoglikEstimate, PFEstimator, estimator_for
from cpmcmc.models import GaussianREModel, HestonEulerModel, LinearGaussianSSM
from cpmcmc.samplers import (
    ChainState,
    ChainTrace,
    Kernel,
    KernelConfig,
    run_chain,
    run_chains,
)
from cpmcmc.streams import RandomStreams
from cpmcmc.theory import arct, minimize_arct, rho_pm, rho_u, rif_qstar
from cpmcmc.tuning import ScalingPlan, calibrate_psi, fit_ct_curve, tune_beta
