"""Accompaniment-conditioned rapping-voice generation stack.

The package covers the full desk-scale chain: dataset construction from
song manifests, k-means semantic tokenization of SSL features, a
lyrics-to-semantic language model with future-shifted accompaniment
conditioning and random masking, zero-shot timbre via a reference
encoder, conditional flow-matching spectrogram generation, phase
recovery or an external vocoder, objective metrics, and a synthetic
benchmark with a planted rhythm coupling.
"""

from .bench import (
    AblationTable,
    ToySpec,
    TrainBudget,
    alignment_score,
    energy_distance,
    gen_toy_pair,
    run_shift_ablation,
    toy_beats_and_onsets,
)
from .cfm import (
    CFMConfig,
    SpectrogramFlow,
    cfm_loss,
    euler_sample,
    load_cfm_checkpoint,
    ot_path_sample,
    save_cfm_checkpoint,
    train_cfm_step,
)
from .config import RunConfig, load_run_config
from .errors import (
    EXIT_EXTERNAL_TOOL,
    EXIT_INVALID_INPUT,
    EXIT_NUMERICAL,
    EXIT_OK,
    ExternalToolError,
    InvalidInputError,
    NumericalError,
)
from .features import (
    MEL_FRAME_RATE_HZ,
    SSL_FRAME_RATE_HZ,
    Codebook,
    FeatureMatrix,
    TokenSequence,
    fit_kmeans,
    interpolate_tokens,
    load_codebook,
    load_features,
    save_codebook,
    save_features,
    tokenize,
)
from .lm import (
    LMConfig,
    LyricsTokens,
    SamplingConfig,
    SemanticLM,
    apply_accomp_mask,
    build_mixed_sequence,
    encode_lyrics,
    generate_semantic,
    generate_semantic_batch,
    lm_forward,
    lm_loss,
    load_lm_checkpoint,
    parameter_count,
    save_lm_checkpoint,
    shift_accompaniment,
    train_lm_step,
)
from .metrics import (
    EmbeddingSet,
    beat_alignment_report,
    fad,
    kld,
    load_embeddings,
    secs,
    wer,
)
from .pipeline import (
    Segment,
    SongRecord,
    Subset,
    SubsetThresholds,
    assign_subset,
    dataset_stats,
    process_song,
    run_pipeline,
    segment_vad,
)
from .refenc import ReferenceEncoder, SpeakerEmbedding, encode_reference
from .spectral import (
    AudioClip,
    MelSpectrogram,
    griffin_lim_invert,
    mel_analyze,
    mel_filterbank,
    vocoder_ingest,
)

__version__ = "0.1.0"
