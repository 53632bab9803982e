"""Raw-waveform spoofing countermeasure (fixed sinc front-end, FMS residual
blocks, GRU) with an LFCC-GMM baseline, EER / min t-DCF scoring and score
fusion, built on a small numpy autodiff engine."""

from .model import ModelConfig, model_forward, model_init, predict_score
from .sinc import ScaleKind, build_filterbank

__version__ = "0.1.0"

__all__ = ["ModelConfig", "ScaleKind", "build_filterbank", "model_forward", "model_init", "predict_score"]
