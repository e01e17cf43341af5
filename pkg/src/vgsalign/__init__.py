"""Speech-image semantic alignment trained from scratch: MFCC + Bi-GRU/attention audio embedder,
DenseNet image embedder, batch hinge loss, recall@K evaluation."""

from .audio import AudioEmbedder, AudioEmbedderConfig, audio_param_count, embed_audio
from .config import PRESETS, ModelConfig, RunConfig
from .dataset import PairDataset, SyntheticSpec, generate_synthetic
from .dsp import MfccParams, MfccSequence, RawAudio, mfcc, within_length_limit
from .evaluation import RecallReport, evaluate, recall_at_k, similarity_matrix
from .image import ImageEmbedder, ImageEmbedderConfig, embed_image, image_param_count
from .objective import HingeConfig, hinge_loss, similarity
from .training import ScheduleConfig, TrainConfig, load_checkpoint, train, warm_restart_run

__version__ = "0.1.0"
