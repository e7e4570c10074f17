from .decoder import VolumeDecoder, decode, decode_latent, to_grid
from .embedding import EmbeddingLibrary, hash_index, multiplier
from .losses import IdentityExtractor, RandomPyramidExtractor, loss_foreground, loss_reconstruction
from .training import AutoDecoder, Trainer, TrainingError, load_autodecoder, object_latents, train_autodecoder

__all__ = [
    "AutoDecoder",
    "EmbeddingLibrary",
    "IdentityExtractor",
    "RandomPyramidExtractor",
    "Trainer",
    "TrainingError",
    "VolumeDecoder",
    "decode",
    "decode_latent",
    "hash_index",
    "load_autodecoder",
    "loss_foreground",
    "loss_reconstruction",
    "multiplier",
    "object_latents",
    "to_grid",
    "train_autodecoder",
]
