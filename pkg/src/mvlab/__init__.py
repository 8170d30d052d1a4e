"""Numerical laboratory for multivalued McKean-Vlasov SDEs."""
from .asymptotics import (ContractionFamily, LilSpec, RareEvent, fit_rate, ldp_sweep, lil_harness, lil_transform,
                          limit_set_distance, mdp_sweep)
from .coeffs import (AffineDrift, CallbackDiffusion, CallbackDrift, LinearDiffusion, MeanFieldCoefficients, Modulus,
                     PerturbationFamily, check_hypotheses, eval_modulus)
from .measure import EmpiricalMeasure, second_moment, w2_coupling_bound_check, wasserstein2
from .monotone import (AbsNorm, Ball, Box, Graph1D, HalfSpace, Indicator, NormalCone, Polyhedron, Quadratic, Scaled,
                       SubdiffConvex, SumFn, Translated, Zero, halfline, minimal_section, moreau_envelope, resolvent,
                       yosida)
from .rng import RngSpec
from .sde import (PathEnsemble, SchemeSpec, SdeProblem, SimulationAborted, k_monotonicity_diag, simulate,
                  simulate_controlled, simulate_mdp)
from .variational import (ControlGrid, EndpointHalfSpace, EndpointPoint, PathMatch, RateProblem, TubeExit, energy,
                          minimize_rate, solve_limit_ode, solve_mdp_skeleton, solve_skeleton)

__version__ = "0.1.0"
