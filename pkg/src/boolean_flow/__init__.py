"""Linear Boolean model of particle flow through a type-II optical counter.

Simulation of the clumped blocking process, estimation of the flow intensity
(moment, maximum-likelihood, and singleton estimators with asymptotic
standard errors), and estimation of total particle flow (count-based and
clumpwise Bayes estimators), plus ingestion of raw counter records and a
reproducible experiment harness.
"""

__version__ = "0.1.0"

from .errors import (BooleanFlowError, BracketError, ConvergenceError,
                     DataError, NumericsError, QuadratureError)
from .estimate import (BooleanMLE, ClumpSample, EstimateReport, MEstimator,
                       SingletonMoment, m_estimate, mle_dsl,
                       sandwich_components, se_m_dsl, se_m_general,
                       singleton_mom, wald_interval)
from .flow import (ConditionalOrderDist, FlowReport, a_hat_1, a_hat_bayes,
                   conditional_order_mean, conditional_order_mean_interp,
                   conditional_order_pmf, expected_total_flow,
                   flow_from_lengths, largest_division_prob, relative_bias,
                   rrmse)
from .ingest import (CounterRecord, RunSummary, build_sample, clean_records,
                     parse_counter_csv, rate_to_time_domain,
                     to_physical_domain, to_time_domain)
from .model import (ClumpLengthDist, ModelParams, SegmentLaw, clump_cdf,
                    clump_density, clump_length_tail_bound,
                    clump_length_truncation, clump_order_pmf,
                    laplace_transform_clump, mean_clump_length,
                    renewal_moments, singleton_mass, var_clump_length_dsl,
                    var_clump_length_rsl)
from .numerics import (CompensatedSum, RandomStream, RootBracket,
                       adaptive_quadrature, chi2_quantile_1df,
                       compensated_sum, expand_bracket, find_root, ks_pvalue,
                       ks_statistic, normal_quantile)
from .simulate import (CellParams, CellReplicate, ExperimentDesign, SimRun,
                       clumps_from_arrivals, poisson_arrivals, run_design,
                       simulate_run)

__all__ = [name for name in dir() if not name.startswith("_")]
