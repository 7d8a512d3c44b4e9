"""Lipschitz-bound reduction of pre-trained networks by proximal splitting."""

from .numerics import gelu_lipschitz_constant, soft_threshold, spectral_norm
from .layers import Network, layer_lipschitz, network_lipschitz
from .constrain import ConstrainConfig, certvit_network, constrain_layer, project_accuracy_set
from .certify import CertReport, certify_sample, evaluate, pgd_attack

__version__ = "0.1.0"
