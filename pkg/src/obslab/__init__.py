"""obslab: sampled-data observer simulation lab.

Numerical validation of inter-sample output predictors for delay systems:
a generic sampled-data observer framework with certified error envelopes,
a transport-PDE/ODE chemical reactor loop with a constructively designed
observer and stabilizing output feedback, and a high-gain observer for
triangular globally Lipschitz delay systems.
"""

from .history import (
    HistoryBuffer,
    HistoryView,
    OutOfHistoryError,
    history_from,
    sup_norm_window,
)
from .integrate import IntegrationError, integrate_interval, solve_dde
from .signals import (
    SamplingSchedule,
    SignalSpec,
    jittered_schedule,
    uniform_schedule,
    validate_schedule,
)
from .trace import SimTrace
from .observer import (
    EnvelopeParams,
    ObservedSystem,
    ReoSpec,
    choose_omega,
    error_envelope,
    estimate_decay_rate,
    max_sampling_diameter,
    run_closed_loop,
    run_continuous_reo,
    run_sampled_observer,
)
from .reactor import (
    ReactorDelayState,
    ReactorField,
    ReactorGains,
    ReactorParams,
    ReactorReoConstants,
    check_compatibility,
    delay_output_identity,
    design_reactor_gains,
    lift_initial_condition,
    lyapunov_V_reactor,
    reactor_delay_system,
    reactor_feedback,
    reactor_reo,
    reactor_reo_constants,
    reconstruct_profile,
    run_reactor_closed_loop,
    run_reactor_observer,
    solve_pde_reactor,
    upwind_transport,
)
from .highgain import (
    HighGainDesign,
    ThetaSelection,
    TriangularSystem,
    companion_pair,
    design_highgain,
    example_triangular_system,
    highgain_reo,
    place_K,
    run_highgain_observer,
    select_theta,
    solve_lyapunov_P,
    spectral_norm,
    triangular_observed_system,
)

__version__ = "0.1.0"
