import numpy as np
import pytest

from seqkd.model import ModelConfig, Seq2SeqModel


def tiny_config(vocab_size=6, enc_cells=8, dec_cells=8, enc_layers=1,
                dec_layers=1, input_dim=5, variant="conv-mlp"):
    """Small model with the conv attention shrunk to match."""
    return ModelConfig(
        input_dim=input_dim,
        encoder_layers=enc_layers, encoder_cells=enc_cells,
        decoder_layers=dec_layers, decoder_cells=dec_cells,
        embedding_size=4, vocab_size=vocab_size,
        attention_variant=variant, attention_dim=6,
        attention_conv_channels=3, attention_conv_kernel=5,
        attention_conv_padding=2,
        frontend="none", dropout=0.0)


def tiny_model(seed=0, dtype=np.float64, **kwargs):
    return Seq2SeqModel.build(tiny_config(**kwargs), seed=seed, dtype=dtype)


def random_features(rng, frames=6, dim=5, dtype=np.float64):
    return rng.standard_normal((frames, dim)).astype(dtype)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
