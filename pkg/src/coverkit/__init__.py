"""Policy covers for layered tabular MDPs under the L1-Coverage objective."""

from .coverage import (CoverageParams, CoverCertificate, DivisionByUncovered, PolicyClass,
                       change_of_measure_bound, compute_c1, compute_cinf, compute_cpush,
                       cov_opt_upper, l1_coverage, linf_admissible_coverage,
                       lq_admissible_coverage, psi_mu, psi_push, relaxation_objectives)
from .envs import (BlockMdp, counterexample_linf, counterexample_lq, gen_blockmdp,
                   gen_model_class, gen_random_mdp)
from .explore_mb import (CodexConfig, ExplorationReport, FiniteModelClass, InteractionLog,
                         codex_reward_driven, codex_reward_free, hellinger_sq, mle_estimate)
from .explore_mf import (FiniteValueClass, FiniteWeightClass, MfConfig, MfReport, NoFiniteScore,
                         ProductValueClass, ProductWeightClass, SamplingEnv, WeightFunction,
                         estimate_weight, fit_weight_logloss, induce_strong_class, mf_explore,
                         psdp)
from .mdp import (OccupancyTable, Policy, PolicyMixture, TabularMdp, Trajectory, dp_plan,
                  exact_occupancy, mixture_occupancy, policy_value, sample_trajectory)
from .mountaincar import (CountOccupancy, cover_reward_epsreg, maxent_reward,
                          mountaincar_discretized, reinforce_tabular)
from .offline import OfflineDataset, fqi, offline_mle_policy
from .plan import (PlanConfig, PlanTrace, PotentialPreconditionError, RelaxationWeight,
                   elliptic_potential_check, plan_generic, plan_linf_relaxation,
                   plan_pushforward_relaxation)

__version__ = "0.1.0"
