"""Reference-encoder invariances.

The pooling stack must be blind to frame order (the property the speaker
conditioning relies on) while remaining sensitive to content, seeds, and
channel layout.
"""

import numpy as np
import pytest
import torch

from rapvox.errors import InvalidInputError
from rapvox.refenc import (
    SPEAKER_EMBED_DIM,
    ReferenceEncoder,
    SpeakerEmbedding,
    encode_reference,
)


@pytest.fixture
def enc64():
    return ReferenceEncoder(input_dim=16, widths=(24, 64), init_seed=0, dtype=torch.float64)


def test_permutation_invariance_100_perms(enc64):
    gen = np.random.default_rng(0)
    mel = torch.tensor(gen.normal(size=(40, 16)))
    with torch.no_grad():
        base = enc64(mel)
        for _ in range(100):
            perm = torch.tensor(gen.permutation(40))
            out = enc64(mel[perm])
            assert torch.max(torch.abs(out - base)).item() < 1e-6


def test_channel_permutation_is_not_ignored(enc64):
    # negative control: the invariance is over frames, not channels
    gen = np.random.default_rng(1)
    mel = torch.tensor(gen.normal(size=(10, 16)))
    with torch.no_grad():
        base = enc64(mel)
        out = enc64(mel[:, torch.tensor(gen.permutation(16))])
    assert torch.max(torch.abs(out - base)).item() > 1e-3


def test_single_frame_passes_attention_unchanged(enc64):
    # with one frame the softmax weight is 1, so pooling returns ff(frame)
    mel = torch.tensor(np.random.default_rng(2).normal(size=(1, 16)))
    with torch.no_grad():
        out = enc64(mel)
        ff = enc64.ff(mel)[0]
    assert torch.equal(out, ff)


def test_batched_matches_per_item(enc64):
    gen = np.random.default_rng(3)
    batch = torch.tensor(gen.normal(size=(4, 12, 16)))
    with torch.no_grad():
        stacked = enc64(batch)
        singles = torch.stack([enc64(batch[i]) for i in range(4)])
    assert torch.allclose(stacked, singles, atol=1e-12, rtol=0)


def test_same_seed_same_embedding_different_seed_differs():
    mel = torch.tensor(np.random.default_rng(4).normal(size=(20, 16)), dtype=torch.float32)
    a = ReferenceEncoder(input_dim=16, widths=(24, 64), init_seed=7)
    b = ReferenceEncoder(input_dim=16, widths=(24, 64), init_seed=7)
    c = ReferenceEncoder(input_dim=16, widths=(24, 64), init_seed=8)
    with torch.no_grad():
        ea, eb, ec = a(mel), b(mel), c(mel)
    assert torch.equal(ea, eb)
    assert not torch.equal(ea, ec)


def test_default_shape_is_mel_to_64():
    enc = ReferenceEncoder()
    assert enc.input_dim == 128
    assert enc.embed_dim == SPEAKER_EMBED_DIM
    mel = torch.zeros(5, 128)
    with torch.no_grad():
        out = enc(mel)
    assert out.shape == (64,)


def test_forward_rejects_bad_inputs(enc64):
    with pytest.raises(InvalidInputError):
        enc64(torch.zeros(3, 9, dtype=torch.float64))  # wrong channel count
    with pytest.raises(InvalidInputError):
        enc64(torch.zeros(0, 16, dtype=torch.float64))  # no frames
    with pytest.raises(InvalidInputError):
        ReferenceEncoder(widths=())


def test_encode_reference_from_numpy(enc64):
    mel = np.random.default_rng(5).normal(size=(30, 16))
    emb = encode_reference(mel, enc64)
    assert isinstance(emb, SpeakerEmbedding)
    assert emb.values.shape == (SPEAKER_EMBED_DIM,)
    # matches the module applied directly
    with torch.no_grad():
        direct = enc64(torch.tensor(mel)).numpy()
    np.testing.assert_allclose(emb.values, direct, atol=0, rtol=0)


def test_encode_reference_rejects_batched_input(enc64):
    with pytest.raises(InvalidInputError):
        encode_reference(np.zeros((2, 30, 16)), enc64)


def test_speaker_embedding_validation():
    SpeakerEmbedding(values=np.zeros(64))
    with pytest.raises(InvalidInputError):
        SpeakerEmbedding(values=np.zeros(63))
    with pytest.raises(InvalidInputError):
        SpeakerEmbedding(values=np.full(64, np.nan))
