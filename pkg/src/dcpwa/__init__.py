"""Stabilizing PWA policies and PWQ Lyapunov certificates for uncertain
difference-of-convex PWA systems."""

from .errors import (BadMultiplier, BadWeights, DCPWAError, DimensionMismatch,
                     Infeasible, MatchingViolation, NotSymmetric,
                     NumericalFailure, ParseError)
from .model import (DCSystem, MaxAffineLayer, UncertaintySample,
                    UncertaintyVertex, check_matching, eval_convex_part,
                    load_system, norm_bounds, redefine_dc, sample_uncertainty,
                    save_system, step, system_hash)
from .lifting import (GraphMatrices, LiftedLayout, build_chi, build_chi_plus,
                      build_graph_matrices, build_layout, check_membership,
                      check_sprocedure)
from .conic import (ConicFeasibility, SolveReport, SolveSettings, eig_sym,
                    psd_project, solve)
from .sdpa import export_sdpa, import_sdpa
from .synthesis import (ControllerArtifact, SynthesisProblem, alternate_bmi,
                        assemble_decrease, assemble_decrease_coupled,
                        assemble_input, assemble_posdef, certify_gain,
                        eval_V, eval_policy, grid_search, init_gain,
                        load_artifact, make_problem, save_artifact, synthesize)
from .simulate import (AuditReport, TrajectoryRecord, audit, envelope_bound,
                       export_csv, read_csv, rollout)
from . import benchmarks

__version__ = "0.1.0"
