"""Method of characteristics for first-order PDEs, with closure diagnostics
for the 1-form p_i dx^i built from the solution's derivatives."""

from charform.charsolve import (
    CharacteristicSystem,
    InitialData,
    PdeProblem,
    RayFan,
    canonical_system,
    derive_characteristic_system,
    detect_caustics,
    initialize_strips,
    integrate,
    solve,
)
from charform.diagnose import (
    ClosureReport,
    ReconstructedField,
    closure_report,
    discontinuity_scan,
    poincare_check,
    reconstruct_field,
)
from charform.expr import Expression, eval_with_gradient, evaluate, parse
from charform.forms import DifferentialForm, Grid, commutator, exterior_derivative, line_integral, wedge

__version__ = "0.1.0"
