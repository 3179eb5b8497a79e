"""Integer-spike neural detection networks in numpy, with a compiled kernel core."""
from ._backend import BACKEND
from .autograd import GradTape, Parameter, Tensor
from .codec import EncodingConfig, EventRecord, direct_encode, event_bin, parse_event_csv
from .layers import LCB, ILIF, Conv2d, TdBN, activity, fold_tdbn_into_conv
from .metrics import LFSIConfig, MetricsReport, count_flops, count_sops, energy, firing_rate, lfsi_layer
from .network import MDSNet, NetworkSpec, build_network, mdsnet_spec
from .neuron import ILIFParams, LIFParams, SpikeTensor, ilif_run, ilif_step
from .serialize import load_model, save_model

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "GradTape", "Parameter", "Tensor", "EncodingConfig", "EventRecord",
    "direct_encode", "event_bin", "parse_event_csv", "LCB", "ILIF", "Conv2d", "TdBN", "activity",
    "fold_tdbn_into_conv", "LFSIConfig", "MetricsReport", "count_flops", "count_sops", "energy",
    "firing_rate", "lfsi_layer", "MDSNet", "NetworkSpec", "build_network", "mdsnet_spec",
    "ILIFParams", "LIFParams", "SpikeTensor", "ilif_run", "ilif_step", "load_model", "save_model",
]
