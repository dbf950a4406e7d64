"""Position-feedback tracking control of Euler-Lagrange systems."""

from .certify import (AssumptionError, CertEntry, CertReport, DependencyError, EtaBounds, build_AB,
                      check_corollary, check_prop1, check_thm1, check_thm2, check_thm3,
                      estimate_eta, gain_search, recursion_constants, validate_eta)
from .controller import (ConfigurationError, ControllerState, GainSet, cascade_control,
                         rd2_control, xi1_star, xi1_star_dot)
from .kernels import COMPILED
from .models import (ELModel, FlexJointModel, ModelBounds, ParameterError, flexjoint_to_chain,
                     make_flexjoint, make_model, make_pendulum, make_two_link)
from .reference import (Reference, ReferenceInvalidError, make_sinusoid_ref, make_static_ref,
                        make_unforced_ref)
from .simulate import (ClosedLoop, Trajectory, empirical_ugas, form_equivalence, passivity_balance,
                       run_closed_loop, simulate_flexjoint)

__version__ = "0.1.0"
