"""One-shot instrument recognition from time-frequency images with Siamese networks."""
from .audio import AudioClip, DatasetManifest, build_manifest, load_wav, synth_corpus, write_wav
from .episodes import ClassSplit, TrainConfig, split_classes, train
from .evaluation import EvalRow, OneShotTask, protocol_max_mean, report_table
from .siamese import ConvSiameseConfig, ResidualSiameseConfig, SiameseModel, build_model, param_count
from .tfr import MorseParams, TfrConfig, cwt_scalogram, render_image, stft_spectrogram

__version__ = "0.1.0"
