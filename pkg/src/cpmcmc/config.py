from typing import Final, Tuple

# names of environment variables

# log level for the cpm command line, e.g. DEBUG or 10
CPM_LOG: Final = "CPM_LOG"


# random streams. Each (chain, iteration, purpose) triple gets its own generator
STREAM_PROPOSAL: Final = 0
STREAM_AUXILIARY: Final = 1
STREAM_ACCEPT: Final = 2
# synthetic data, drawn once per seed
STREAM_SIMULATION: Final = 3
# the iteration number used for the initial state's auxiliary block
INITIAL_ITERATION: Final = -1


# Hilbert sort
DEFAULT_HILBERT_ORDER: Final = 16
MAX_HILBERT_ORDER: Final = 31
# keys are packed into unsigned 64 bit integers
HILBERT_KEY_BITS: Final = 64
# logistic projection: scale = this multiple of the pilot interquartile range
LOGISTIC_IQR_MULTIPLE: Final = 3.0
PILOT_PROJECTION_LENGTH: Final = 1000


# importance sampling evaluates this many observations at a time to bound memory
DEFAULT_IS_CHUNK_ROWS: Final = 512


# observations round-trip exactly through CSV
OBSERVATION_FLOAT_FORMAT: Final = "%.17g"


# samplers
RANDOM_WALK_SCALE: Final = 2.38
DEFAULT_PROGRESS_EVERY: Final = 10_000


# diagnostics
MIN_IACT_LENGTH: Final = 100
MIN_MOMENT_CHECK_SAMPLES: Final = 1000
MOMENT_CHECK_THRESHOLD: Final = 3.0
# stationary U-only chains are burned in for this many multiples of 1/delta
STATIONARY_BURN_IN_MULTIPLE: Final = 10.0
MIN_STATIONARY_BURN_IN: Final = 500


# theory
ARCT_SEARCH_BRACKET: Final[Tuple[float, float, float]] = (0.1, 1.4, 5.0)
ARCT_SEARCH_TOL: Final = 1e-4


# tuning
DEFAULT_TARGET_KAPPA: Final = 1.4
DEFAULT_KAPPA_TOL: Final = 0.05
PSI_RANGE: Final[Tuple[float, float]] = (1e-4, 1e2)
MAX_CALIBRATION_STEPS: Final = 40
DEFAULT_CALIBRATION_SAMPLES: Final = 20_000
DEFAULT_SUBSET_FRACTION: Final = 0.25
DEFAULT_PILOT_PARTICLES: Final = 20
DEFAULT_BETA_GRID: Final[Tuple[float, ...]] = (0.1, 0.15, 0.2, 0.3, 0.4, 0.6, 0.8)
# random effects scale N with sqrt(T)
DEFAULT_ALPHA: Final = 0.5


# harness defaults. These are desk-scale choices, not the published run lengths
DEFAULT_N_ITERS_RE: Final = 100_000
DEFAULT_N_ITERS_SSM: Final = 20_000
DEFAULT_BURN_IN: Final = 1000
DEFAULT_MEASURE_ITERS: Final = 1000
MAX_DESK_T_RE: Final = 8192
MAX_DESK_T_SSM: Final = 400


# model defaults
DEFAULT_RE_THETA: Final = 0.5
DEFAULT_RE_PRIOR_SD: Final = 100.0
DEFAULT_SSM_THETA: Final = 0.4
DEFAULT_HESTON_SUBSTEPS: Final = 10
DEFAULT_HESTON_DELTA_OBS: Final = 1.0
# (mu, upsilon, omega, chi). upsilon = -log(0.981)
DEFAULT_HESTON_THETA: Final[Tuple[float, float, float, float]] = (
    1.25,
    0.0192,
    0.142,
    -0.67,
)
DEFAULT_HESTON_LOG_PRIOR_SD: Final = 2.0


# table presets. SSM plans are (alpha, beta, psi)
TABLE_RE_SCALING: Final = "re_scaling"
TABLE_SSM_K2: Final = "ssm_k2"
TABLE_SSM_K3: Final = "ssm_k3"
TABLE_IDS: Final = (TABLE_RE_SCALING, TABLE_SSM_K2, TABLE_SSM_K3)

RE_SCALING_T_VALUES: Final = (1024, 2048, 4096, 8192)
RE_SCALING_BETA: Final = 0.59
# rho = exp(-psi * N / T) = 0.9894 at T=1024, N=19
RE_SCALING_PSI: Final = 0.574
SSM_K2_PLAN: Final = (2.0 / 3.0, 0.854, 0.12)
SSM_K3_PLAN: Final = (3.0 / 4.0, 1.57, 0.042)
SSM_T_VALUES: Final = (100, 400)
# desk-scale Heston runs: T observations, plan (alpha, beta, psi)
DEFAULT_HESTON_T: Final = 500
HESTON_PLAN: Final = (0.5, 1.0, 0.5)
# a model kind with no preset uses this (beta, psi)
FALLBACK_PLAN: Final = (1.0, 0.5)
DEFAULT_CT_ITERS: Final = 10_000
DEFAULT_IF_ITERS_TABLE: Final = 20_000
# each of the two pilot rounds for models without an exact likelihood
DEFAULT_PILOT_ITERS: Final = 2000

# output keys under out_dir
DATA_KEY: Final = "data.csv"
TRACE_KEY: Final = "trace.ndjson"
SUMMARY_KEY: Final = "summary.csv"
TUNING_REPORT_KEY: Final = "tuning_report.csv"
CURVES_KEY: Final = "curves.csv"
