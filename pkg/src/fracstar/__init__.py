"""Space-time fractional parabolic equations on star graphs with low-regret
and no-regret boundary control."""

from .fractional_kernels import Endpoint, OpKind, Side, UniformGrid1D, build_frac_op, endpoint_trace
from .mittag_leffler import MLParams, ml, ml_array
from .star_graph import (
    BoundaryControl,
    GraphField,
    GraphGrid,
    StarGraph,
    TimeGrid,
    ValidationError,
    control_norm2,
    space_time_inner,
)
from .operator_assembly import assemble, eigensolve
from .evolution_solvers import (
    BackwardScheme,
    make_context,
    make_controlled_system,
    solve_backward,
    solve_caputo_forward,
    solve_controlled,
    solve_rl_forward,
)
from .regret_control import (
    RegretConfig,
    cost_J,
    cost_Jtau,
    gradient_Jtau,
    make_problem,
    minimize_low_regret,
    tau_sweep,
)

__version__ = "0.1.0"
