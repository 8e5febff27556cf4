"""Audio watermarking with a differentiable noise-to-mask perceptual loss."""

from .audio import (DEFAULT_STFT, SAMPLE_RATE, SEGMENT_SAMPLES, StftConfig,
                    istft, load_wav, segment_signal, snr_db, stft, write_wav)
from .losses import LossWeights, bce, combined_loss, mse_spec
from .models import (NetworkConfig, build_params, desk_config, embed_forward,
                     extract_forward, load_model, round_message, save_model)
from .psycho import (EarModelTables, build_ear_tables, masking_patterns,
                     nmr, nmr_db, nmr_gradient, noise_patterns, pitch_patterns)
from .training import (Corpus, MetricsReport, TrainingConfig, ber, evaluate,
                       make_desk_corpus, select_model, train)

__version__ = "0.1.0"
