"""Conditional inpainting latent diffusion core."""

from .audio import CONTEXT_DIM, AudioExtractor, MelFrameEncoder, audio_context, build_audio_window, mel_to_frames, window_indices
from .autoencoder import PatchProjectionAutoencoder, PretrainedVAEAdapter
from .sampling import (
    DEFAULT_DDIM_STEPS,
    Conditions,
    ancestral_loop,
    assemble_unet_input,
    ddim_loop,
    ddim_sample,
    downsample_mask,
    gaussian_eps_fn,
    initial_noise,
    split_unet_input,
    timestep_sequence,
)
from .schedule import NoiseSchedule, estimate_z0, forward_diffuse, make_schedule
from .unet import IN_CHANNELS, LATENT_CHANNELS, PARAM_GROUPS, InpaintingUNet, UNetConfig, init_model, predict_noise
from .pipeline import generate_crops, lipsync_video, to_uint8
