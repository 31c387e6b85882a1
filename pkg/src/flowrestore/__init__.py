"""Speech restoration with conditional flow matching on log-mel spectrograms."""

from .backbone import ModelConfig, VectorFieldTransformer, count_params, init_model
from .cfm import FlowSchedule, SamplerConfig, cfg_combine, cfm_loss, interpolate, sample_ode, target_field
from .degrade import DegradationChain, DegradationSpec, NoiseKind, RandomDegradationPolicy, apply_chain, sample_chain
from .dsp import MelConfig, MelSpectrogram, Waveform, invert_mel, load_wav, mel_spectrogram, save_wav
from .evalkit import evaluate_set, log_spectral_distance, stoi, waveform_snr
from .restore import chunk_plan, crossfade_merge, restore_waveform
from .train import Checkpoint, Trainer, TrainingConfig, load_checkpoint, save_checkpoint

__version__ = "0.1.0"
