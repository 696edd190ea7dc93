"""Bayesian mediation analysis with image mediators and soft-thresholded GP priors."""

from .errors import (BimaError, DegenerateKernelError, DivergenceError, IdentifiabilityError,
                     InitializationFailed, InvalidArgumentError, InvalidStateError,
                     NumericalRankError)
from .kernel_basis import KernelSpec, RegionBasis, VoxelGrid, build_bases
from .mediation import MediationReport, build_report
from .sampler import ChainTrace, SamplerConfig, run_mediator_chain, run_outcome_chain
from .sem_model import MediationDataset, MediatorState, OutcomeState, Priors
from .simgen import SimDesign, generate, score_replication
from .stgp import soft_threshold

__version__ = "0.1.0"
