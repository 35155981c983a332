"""flowconvert: flow-based accent conversion on a synthetic corpus.

The conversion model encodes a mel-spectrogram into latents under
source-accent conditioning and decodes under target-accent conditioning
(remap), optionally resampling the latents to target durations with an
explicit warping matrix (warp) or aligning them with a denoising
attention block (attend).
"""

from .config import CorpusConfig, EvalConfig, ModelConfig, RunConfig, StageConfig
from .corpus import (AccentSpec, Corpus, MelSpectrogram, PhonemeSequence, SpeakerSpec,
                     Utterance, assign_durations, g2p, generate_corpus, load_corpus,
                     render_mel, save_corpus)
from .duration import (DurationModel, WarpMatrix, build_warp_matrix, predict_durations,
                       predict_durations_for_accent, train_duration_model, warp)
from .attention import (AttentionBlock, TimeDropoutConfig, attend, time_dropout,
                        train_attention)
from .errors import (ConfigurationError, ContractError, FlowConvertError,
                     ModeUnsupportedError, NumericError, StageOrderingError,
                     TrainingDivergedError, UnknownIdError)
from .features import (ConditioningStack, EmbeddingTable, FrameConditioning,
                       build_conditioning, phoneme_encoder, upsample)
from .flow import FlowModel, LatentSequence, forward, inverse, nll, train_flow
from .metrics import collapse_runs, edit_distance, holm_bonferroni, paired_t_test, \
    score_ratio_matrix, wer
from .evaluation import (EvalReport, ProxyClassifier, classify, evaluate_systems,
                         phoneme_decode, similarity_score, train_classifiers, write_report)
from .pipeline import (CONVERSION_MODES, ConversionRequest, ConversionResult, ModelBundle,
                       convert, convert_remap, convert_remap_warp, convert_remap_warp_attend,
                       make_request, run_requests)

__version__ = "0.1.0"
