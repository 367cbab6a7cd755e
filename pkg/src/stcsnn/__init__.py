"""Event-stream compression and hybrid spiking networks trained with eligibility traces."""

from .compress import FrameTensor, compress, compress_oracle, compression_ratio
from .config import RunConfig
from .errors import (ConfigError, CorruptRecordError, DataError, EventValueError, FormatError,
                     NumericalError, ParseError, ShapeError, StcsnnError)
from .events import Event, EventStream, encode_nmnist_bin, load_aer_csv, load_nmnist_bin, synth_two_class
from .network import Model, NetworkConfig, forward, load_checkpoint, parse_arch, predict, save_checkpoint
from .neuron import NeuronParams, PMLIFState, pmlif_step, surrogate_grad, synaptic_step
from .train import AdamState, FitConfig, evaluate, fit, init_model

__version__ = "0.1.0"
