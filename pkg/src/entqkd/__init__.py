"""Entangled-photon quantum key distribution: simulation and protocol library."""
from .entangle import IDEAL, JointProbabilities, NoiseModel, joint_probabilities, sample_pair, sample_pairs
from .errors import QKDError

__version__ = "0.1.0"
