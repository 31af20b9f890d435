"""Quantum Zeno dynamics of a collective atomic spin under cavity measurement.

Submodules
----------
spin
    Dicke basis, spin operators, rotations, Husimi-Q.
dynamics
    Master-equation integration, ideal Zeno limit, drive trajectories.
tomography
    Measurement model and maximum-likelihood reconstruction.
entanglement
    Quantum Fisher information and entanglement depth.
bootstrap
    Parametric bootstrap intervals.
pipeline, cli
    Config-driven scenarios and the ``qzdlab`` command.
"""

from importlib.metadata import PackageNotFoundError, version

try:
    __version__ = version("artifact")
except PackageNotFoundError:  # running from a source tree
    __version__ = "0.0.0"

from .spin import DickeBasis, DickeState, named_state, husimi_q  # noqa: E402
from .dynamics import ZenoConfig, LossModel, TrajectorySpec, evolve, run_trajectory  # noqa: E402
from .tomography import MLETomography, TomographyDataset, TomographyGrid, mle_reconstruct  # noqa: E402
from .entanglement import entanglement_depth, optimize_fisher_axis  # noqa: E402
from .bootstrap import BootstrapConfig, bootstrap  # noqa: E402

__all__ = [
    "DickeBasis", "DickeState", "named_state", "husimi_q",
    "ZenoConfig", "LossModel", "TrajectorySpec", "evolve", "run_trajectory",
    "MLETomography", "TomographyDataset", "TomographyGrid", "mle_reconstruct",
    "entanglement_depth", "optimize_fisher_axis",
    "BootstrapConfig", "bootstrap",
]
