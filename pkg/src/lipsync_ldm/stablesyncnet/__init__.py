"""Audio-visual sync network: architecture, pair sampling, training and diagnostics."""

from .data import SyncBatch, SyncClip, SyncCorpus, draw_pair_specs, frames_to_tensor, normalize_mel, sample_pairs
from .model import (
    EPS,
    SyncNet,
    SyncNetConfig,
    build_audio_encoder,
    build_visual_encoder,
    normalize_embedding,
    similarity_prob,
)
from .train import (
    CONVERGING,
    DIVERGED,
    STUCK,
    Curves,
    SyncNetScorer,
    bce,
    contrastive_loss,
    detect_loss_floor,
    dump_probability_scatter,
    evaluate_accuracy,
    evaluate_loss,
    load_checkpoint,
    make_val_set,
    save_checkpoint,
    trailing_mean,
    train_syncnet,
    write_scatter_csv,
)
