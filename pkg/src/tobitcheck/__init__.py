"""tobitcheck: censored-outcome model estimation, validity testing, and bounds."""

__version__ = "0.1.0"

from .data import Sample, SampleSummary, load_csv, summarize, write_csv
from .equalities import (
    Cell,
    ClassicIndex,
    IvIndex,
    Partition,
    Type2Params,
    build_partition,
    classic_implied_prob,
    iv_implied_prob,
    simulate_from_model,
    type2_implied_prob,
)
from .errors import (
    BandwidthError,
    ConvergenceError,
    DegenerateMomentError,
    InputError,
    PartitionError,
    SingularSystemError,
    TobitcheckError,
)
from .estimate import (
    ClassicTobitFit,
    IvTobitFit,
    fit_classic_tobit,
    fit_iv_tobit,
    moment_identify_classic,
    moment_identify_iv_firststage,
    recover_sigma_system,
)
from .bounds import (
    MtsBound,
    bound_confidence,
    binned_levels,
    mts_bound_continuous,
    mts_bound_discrete,
)
from .momtest import (
    DEFAULT_SEED,
    MomentPanel,
    TestResult,
    build_moments_classic,
    build_moments_iv,
    conditional_mean_curve,
    critical_value,
    run_test,
    run_test_levels,
)
from .montecarlo import DgpConfig, StudyReport, draw_dgp, load_config_file, run_study
from .numcore import (
    Correlation,
    bivnorm_cdf,
    bivnorm_pdf,
    inverse_mills,
    std_normal_cdf,
    std_normal_pdf,
    std_normal_quantile,
)
