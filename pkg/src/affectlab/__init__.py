"""Multi-task facial affect analysis and masked co-training on vision transformers."""
from .backbone import EncoderConfig, MaskedAutoencoder, ViTEncoder, preset
from .cotex import TwinViT, make_twin
from .data import FaceSample, Labels, synth_dataset
from .emma import EmmaModel
from .engine import TrainConfig, fit_cotex, fit_emma, fit_mae
from .metrics import MetricReport, eval_lsd, eval_mtl

__version__ = "0.1.0"
