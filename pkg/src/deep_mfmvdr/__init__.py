"""Deep multi-frame MVDR single-channel speech enhancement."""

from .audio import MixtureSpec, Waveform, make_mixture, mix_at_snr, read_wav, write_wav
from .filters import RegularizationConfig, enhance, mfmvdr_weights
from .metrics import EvalReport, benchmark_rtf, evaluate, si_sdr
from .pipeline import PipelineConfig, enhance_waveform, load_config
from .stft import StftConfig, analyze, synthesize
from .tcn import TcnArch, TcnModel, load_model, save_model

__version__ = "0.1.0"

__all__ = [
    "MixtureSpec", "Waveform", "make_mixture", "mix_at_snr", "read_wav", "write_wav",
    "RegularizationConfig", "enhance", "mfmvdr_weights", "EvalReport", "benchmark_rtf",
    "evaluate", "si_sdr", "PipelineConfig", "enhance_waveform", "load_config",
    "StftConfig", "analyze", "synthesize", "TcnArch", "TcnModel", "load_model", "save_model",
]
