"""Single-atom photon statistics in thermal atomic beams.

Simulate photon time tags from quantum trajectories of atoms crossing a probe
beam, correlate them into g2 and g3, reconstruct velocity distributions and
fit the transit-corrected g2 model.
"""

__version__ = "0.1.0"

from .config import ExperimentConfig, load_config, load_preset
from .correlator import (
    CoincidenceHistogram,
    G3Histogram,
    brute_force_coincidences,
    cross_correlate,
    g3_partial,
    normalize_g2,
    normalize_g3,
)
from .detection import (
    DetectorParameters,
    FiberLayout,
    TimeTagStream,
    apply_detector,
    detect,
    gate_by_fov,
    thin_and_split,
)
from .errors import BeamcorrError, ConvergenceError, CorruptionError, ValidationError
from .fitting import FitResult, G2Fitter, fit_g2, profile_objective
from .mcwf import (
    AtomTransit,
    EmissionEvents,
    EngineOptions,
    SimulationPlan,
    evolve_atom,
    sample_atom_arrivals,
    sample_velocity,
    selection_probability,
    simulate_beam,
)
from .physics import (
    BeamParameters,
    GeometryParameters,
    OpticalParameters,
    RabiDistribution,
    SelectionParameters,
    flux_velocity_pdf,
    g2_single,
    g2_single_averaged,
    g2_theory,
    mean_atom_number,
    transit_correction,
    two_fiber_theory,
    velocity_center,
)
from .tagio import read_tags, write_tags
from .velocimetry import (
    VelocityDensity,
    correlated_excess,
    subtract_background,
    tau_to_velocity,
    to_atom_pdf,
)
