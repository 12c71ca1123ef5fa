"""Flow-matching tests: path algebra, solver order, gradients, toy flows.

The Euler convergence study uses a rotation field whose flow has a closed
form, so solver error is measured against an exact solution rather than a
finer numerical one.
"""

import math

import numpy as np
import pytest
import torch

from oracles import central_diff_grad_check
from rapvox.cfm import (
    CFMConfig,
    FlowState,
    SpectrogramFlow,
    ToyVectorField,
    cfm_loss,
    euler_sample,
    fit_mel_length,
    load_cfm_checkpoint,
    ot_path_sample,
    save_cfm_checkpoint,
    train_cfm_step,
)
from rapvox.errors import InvalidInputError
from rapvox.features import TokenSequence
from rapvox.spectral import LOG_MEL_FLOOR


def tiny_flow_cfg(**kw):
    base = dict(sigma_min=1e-4, sample_steps=4, input_dim=72, intermediate_dim=16,
                mel_dim=4, down_blocks=1, mid_blocks=1, up_blocks=1, attn_heads=2)
    base.update(kw)
    return CFMConfig(**base)


def tiny_flow(dtype=torch.float32, vocab=9, seed=0):
    return SpectrogramFlow(tiny_flow_cfg(), vocab, init_seed=seed, dtype=dtype)


def mel128_flow(seed=0):
    # generate() emits real [T x 128] spectrograms, so its tests need the
    # full mel width; the network stays narrow
    cfg = tiny_flow_cfg(mel_dim=128, input_dim=2 * 128 + 64)
    return SpectrogramFlow(cfg, 9, init_seed=seed)


def flow_batch(vocab=9, *, bsz=2, T=6, seed=0, speaker="vector", mel_dim=4):
    gen = np.random.default_rng(seed)
    batch = {
        "mel": gen.normal(size=(bsz, T, mel_dim)),
        "tokens": gen.integers(0, vocab, size=(bsz, T)),
    }
    if speaker == "vector":
        batch["speaker"] = gen.normal(size=(bsz, 64))
    elif speaker == "ref_mel":
        batch["ref_mel"] = gen.normal(size=(bsz, 3, 128))
    return batch


class ConstantField(torch.nn.Module):
    def __init__(self, c):
        super().__init__()
        self.c = torch.as_tensor(c)
        self.mel_dim = self.c.shape[-1]

    def forward(self, x, t, mu=None, spk=None):
        return self.c.to(x.dtype).expand_as(x)


class RotationField(torch.nn.Module):
    """x' = A x with A = [[0, -1], [1, 0]]; exact flow is a rotation by t."""

    def forward(self, x, t, mu=None, spk=None):
        return torch.stack((-x[..., 1], x[..., 0]), dim=-1)


# --- OT path ---


def test_path_scalar_fixture():
    x_t, u_t = ot_path_sample(2.0, 5.0, 0.5, sigma_min=0.1)
    assert float(x_t) == pytest.approx(3.6, abs=1e-12)
    assert float(u_t) == pytest.approx(3.2, abs=1e-12)


def test_path_endpoint_identities_exact():
    gen = torch.Generator().manual_seed(0)
    x0 = torch.randn(50, 3, generator=gen, dtype=torch.float64)
    x1 = torch.randn(50, 3, generator=gen, dtype=torch.float64)
    at0, _ = ot_path_sample(x0, x1, 0.0, sigma_min=1e-4)
    assert torch.equal(at0, x0)
    at1, u_disp = ot_path_sample(x0, x1, 1.0, sigma_min=0.0)
    assert torch.equal(at1, x1)
    assert torch.equal(u_disp, x1 - x0)  # sigma_min = 0 gives the displacement
    at1s, _ = ot_path_sample(x0, x1, 1.0, sigma_min=1e-4)
    torch.testing.assert_close(at1s, 1e-4 * x0 + x1, atol=1e-12, rtol=0)


def test_path_field_is_time_independent():
    gen = torch.Generator().manual_seed(1)
    x0 = torch.randn(4, 2, generator=gen, dtype=torch.float64)
    x1 = torch.randn(4, 2, generator=gen, dtype=torch.float64)
    _, ua = ot_path_sample(x0, x1, 0.25, sigma_min=0.05)
    _, ub = ot_path_sample(x0, x1, 0.75, sigma_min=0.05)
    assert torch.equal(ua, ub)


def test_path_per_sample_times_broadcast():
    gen = torch.Generator().manual_seed(2)
    x0 = torch.randn(3, 2, generator=gen, dtype=torch.float64)
    x1 = torch.randn(3, 2, generator=gen, dtype=torch.float64)
    t = torch.tensor([[0.0], [0.5], [1.0]], dtype=torch.float64)
    x_t, _ = ot_path_sample(x0, x1, t, sigma_min=0.0)
    assert torch.equal(x_t[0], x0[0])
    assert torch.equal(x_t[2], x1[2])
    row, _ = ot_path_sample(x0[1:2], x1[1:2], 0.5, sigma_min=0.0)
    assert torch.equal(x_t[1], row[0])


def test_path_validation():
    with pytest.raises(InvalidInputError):
        ot_path_sample(torch.zeros(2), torch.zeros(3), 0.5)
    with pytest.raises(InvalidInputError):
        ot_path_sample(0.0, 1.0, 1.5)
    with pytest.raises(InvalidInputError):
        ot_path_sample(0.0, 1.0, 0.5, sigma_min=1.0)
    with pytest.raises(InvalidInputError):
        FlowState(x=np.array([np.nan]), t=0.5)
    with pytest.raises(InvalidInputError):
        FlowState(x=np.zeros(2), t=1.5)


# --- Euler solver ---


def test_constant_field_returns_x0_plus_c():
    c = torch.tensor([1.5, -2.0, 0.25], dtype=torch.float64)
    net = ConstantField(c)
    out = euler_sample(net, steps=1, seed=7, shape=(5, 3), dtype=torch.float64)
    gen = torch.Generator().manual_seed(7)
    x0 = torch.randn(5, 3, generator=gen, dtype=torch.float64)
    assert torch.equal(out, x0 + c)
    # multi-step integration of a constant stays exact to accumulation error
    out16 = euler_sample(net, steps=16, seed=7, shape=(5, 3), dtype=torch.float64)
    torch.testing.assert_close(out16, x0 + c, atol=1e-12, rtol=0)


def test_shape_inferred_from_condition_frames():
    net = ConstantField(torch.zeros(3, dtype=torch.float64))
    out = euler_sample(net, mu=torch.zeros(5, 3), steps=1, seed=0, dtype=torch.float64)
    assert out.shape == (5, 3)
    with pytest.raises(InvalidInputError):
        euler_sample(net, steps=0, shape=(2, 3))
    with pytest.raises(InvalidInputError):
        euler_sample(net, steps=4)  # neither shape nor mu


def test_euler_error_halves_per_step_doubling():
    net = RotationField()
    gen = torch.Generator().manual_seed(3)
    x0 = torch.randn(16, 2, generator=gen, dtype=torch.float64)
    rot = torch.tensor([[math.cos(1.0), -math.sin(1.0)],
                       [math.sin(1.0), math.cos(1.0)]], dtype=torch.float64)
    exact = x0 @ rot.T
    errors = []
    for steps in (32, 64, 128, 256):
        out = euler_sample(net, steps=steps, seed=3, shape=(16, 2), dtype=torch.float64)
        errors.append(float(torch.linalg.vector_norm(out - exact, dim=1).mean()))
    for coarse, fine in zip(errors, errors[1:]):
        assert 1.8 <= coarse / fine <= 2.2


def test_sampling_deterministic_per_seed():
    net = RotationField()
    a = euler_sample(net, steps=8, seed=11, shape=(4, 2))
    b = euler_sample(net, steps=8, seed=11, shape=(4, 2))
    c = euler_sample(net, steps=8, seed=12, shape=(4, 2))
    assert torch.equal(a, b)
    assert not torch.equal(a, c)


# --- loss ---


def test_cfm_loss_zero_field_oracle():
    # against a zero network the loss is exactly mean(u_t^2), recomputable
    # from the same seeded draws
    gen = torch.Generator().manual_seed(4)
    x1 = torch.randn(6, 2, generator=gen, dtype=torch.float64)
    net = ConstantField(torch.zeros(2, dtype=torch.float64))
    loss = cfm_loss(x1, None, None, net, rng_seed=99, sigma_min=0.05)
    replay = torch.Generator().manual_seed(99)
    torch.rand(6, generator=replay, dtype=torch.float64)  # t draw, unused by u_t
    x0 = torch.randn(6, 2, generator=replay, dtype=torch.float64)
    u = x1 - 0.95 * x0
    assert float(loss) == pytest.approx(float((u ** 2).mean()), rel=1e-12)


def test_cfm_loss_validation():
    net = ConstantField(torch.zeros(2))
    with pytest.raises(InvalidInputError):
        cfm_loss(torch.zeros(3), None, None, net, 0)  # not a batch
    with pytest.raises(InvalidInputError):
        cfm_loss(torch.zeros(2, 4, 2), torch.zeros(2, 5, 2), None, net, 0)  # length clash


def test_toy_field_gradients_match_finite_differences():
    net = ToyVectorField(dim=2, hidden=16, depth=2, temb_dim=8, init_seed=5,
                         dtype=torch.float64)
    gen = torch.Generator().manual_seed(5)
    x1 = torch.randn(8, 2, generator=gen, dtype=torch.float64)
    central_diff_grad_check(net, lambda: cfm_loss(x1, None, None, net, rng_seed=17), seed=5)


@pytest.mark.parametrize("speaker", ["vector", "ref_mel", "none"])
def test_spectrogram_flow_gradients_match_finite_differences(speaker):
    model = tiny_flow(dtype=torch.float64, seed=6)
    batch = flow_batch(seed=6, speaker=speaker)
    central_diff_grad_check(model, lambda: model.training_loss(batch, rng_seed=23), seed=6)


def test_training_loss_validation():
    model = tiny_flow()
    good = flow_batch()
    for key in ("mel", "tokens"):
        broken = dict(good)
        del broken[key]
        with pytest.raises(InvalidInputError):
            model.training_loss(broken, 0)
    broken = dict(good)
    broken["tokens"] = broken["tokens"][:, :-1]
    with pytest.raises(InvalidInputError):
        model.training_loss(broken, 0)
    broken = dict(good)
    broken["tokens"] = np.full_like(good["tokens"], 9)
    with pytest.raises(InvalidInputError):
        model.training_loss(broken, 0)


def test_train_step_reduces_loss_on_repeated_batch():
    torch.manual_seed(0)
    model = tiny_flow(seed=7)
    batch = flow_batch(seed=7)
    opt = torch.optim.AdamW(model.parameters(), lr=2e-3)
    first = train_cfm_step(model, batch, opt, rng_seed=0)
    last = first
    for step in range(1, 60):
        last = train_cfm_step(model, batch, opt, rng_seed=step)
    # different rng_seed per step resamples (t, x0); compare smoothed level
    assert last < first


# --- spectrogram flow assembly ---


def test_condition_frames_length_law_and_content():
    model = tiny_flow()
    ids = np.arange(9) % 8
    tokens = TokenSequence(ids, 9, frame_rate_hz=50.0)
    mu = model.condition_frames(tokens)
    n_out = int(np.floor(9 * (44100.0 / 512.0) / 50.0 + 0.5))
    assert mu.shape == (n_out, 4)
    table = model.token_emb.weight.detach()
    for j in range(n_out):
        src = min(int(np.floor((j + 0.5) * 50.0 / (44100.0 / 512.0))), 8)
        torch.testing.assert_close(mu[j], table[ids[src]], atol=1e-7, rtol=0)
    with pytest.raises(InvalidInputError):
        model.condition_frames(TokenSequence(ids, 10, frame_rate_hz=50.0))


def test_mel_stats_round_trip_and_validation():
    model = tiny_flow()
    mean = np.array([1.0, -2.0, 0.5, 3.0])
    std = np.array([2.0, 0.5, 1.0, 4.0])
    model.set_mel_stats(mean, std)
    x = torch.tensor(np.random.default_rng(8).normal(size=(6, 4)), dtype=torch.float32)
    back = model.denormalize_mel(model.normalize_mel(x))
    torch.testing.assert_close(back, x, atol=1e-5, rtol=0)
    with pytest.raises(InvalidInputError):
        model.set_mel_stats(np.zeros(3), np.ones(3))
    with pytest.raises(InvalidInputError):
        model.set_mel_stats(mean, np.array([1.0, 0.0, 1.0, 1.0]))


def test_forward_channel_checks():
    model = tiny_flow()
    with pytest.raises(InvalidInputError):
        model(torch.zeros(2, 6, 4), 0.5, None, None)
    with pytest.raises(InvalidInputError):
        model(torch.zeros(2, 6, 4), 0.5, torch.zeros(2, 6, 5), None)
    with pytest.raises(InvalidInputError):
        model(torch.zeros(2, 6, 4), 0.5, torch.zeros(2, 5, 4), None)


def test_untrained_field_is_exactly_zero():
    model = tiny_flow(seed=9)
    with torch.no_grad():
        out = model(torch.ones(2, 6, 4), 0.3, torch.ones(2, 6, 4), None)
    assert torch.equal(out, torch.zeros(2, 6, 4))


def test_untrained_generate_returns_scaled_noise():
    # zero field means the trajectory never leaves the seeded x0
    model = mel128_flow(seed=10)
    gen = np.random.default_rng(10)
    mean = gen.normal(size=128)
    std = gen.uniform(0.5, 2.0, size=128)
    model.set_mel_stats(mean, std)
    tokens = TokenSequence(np.arange(6) % 8, 9, frame_rate_hz=50.0)
    mel = model.generate(tokens, seed=21)
    g = torch.Generator().manual_seed(21)
    x0 = torch.randn(mel.frames.shape[0], 128, generator=g, dtype=torch.float32)
    expect = (x0 * torch.tensor(std, dtype=torch.float32)
              + torch.tensor(mean, dtype=torch.float32))
    np.testing.assert_allclose(mel.frames, expect.double().numpy(), atol=1e-6)


def test_generate_deterministic_and_seed_sensitive():
    model = mel128_flow(seed=11)
    tokens = TokenSequence(np.arange(8) % 8, 9, frame_rate_hz=50.0)
    a = model.generate(tokens, seed=5)
    b = model.generate(tokens, seed=5)
    c = model.generate(tokens, seed=6)
    np.testing.assert_array_equal(a.frames, b.frames)
    assert not np.array_equal(a.frames, c.frames)


def test_generate_rejects_too_short_condition():
    model = tiny_flow()
    with pytest.raises(InvalidInputError):
        model.generate(TokenSequence(np.array([0]), 9, frame_rate_hz=200.0))


# --- utilities and persistence ---


def test_fit_mel_length_pads_with_log_floor():
    frames = np.zeros((3, 4))
    out = fit_mel_length(frames, 5)
    assert out.shape == (5, 4)
    np.testing.assert_array_equal(out[3:], np.full((2, 4), math.log(LOG_MEL_FLOOR)))
    np.testing.assert_array_equal(fit_mel_length(frames, 2), frames[:2])
    with pytest.raises(InvalidInputError):
        fit_mel_length(frames, 0)
    with pytest.raises(InvalidInputError):
        fit_mel_length(np.zeros(3), 2)


def test_checkpoint_round_trip(tmp_path):
    model = mel128_flow(seed=12)
    model.set_mel_stats(np.arange(1.0, 129.0), np.arange(1.0, 129.0))
    opt = torch.optim.AdamW(model.parameters(), lr=1e-3)
    train_cfm_step(model, flow_batch(seed=12, mel_dim=128), opt, rng_seed=0)
    path = tmp_path / "cfm.pt"
    save_cfm_checkpoint(model, path, optimizer=opt, extra={"completed_steps": 1})
    loaded, payload = load_cfm_checkpoint(path)
    assert loaded.cfg == model.cfg
    assert loaded.semantic_vocab == 9
    assert payload["extra"]["completed_steps"] == 1
    torch.testing.assert_close(loaded.mel_mean, model.mel_mean, atol=0, rtol=0)
    tokens = TokenSequence(np.arange(6) % 8, 9, frame_rate_hz=50.0)
    np.testing.assert_array_equal(loaded.generate(tokens, seed=3).frames,
                                  model.generate(tokens, seed=3).frames)


def test_checkpoint_kind_guard(tmp_path):
    path = tmp_path / "bad.pt"
    torch.save({"kind": "semantic_lm"}, path)
    with pytest.raises(InvalidInputError):
        load_cfm_checkpoint(path)


def test_config_validation():
    with pytest.raises(InvalidInputError):
        tiny_flow_cfg(input_dim=71)
    with pytest.raises(InvalidInputError):
        tiny_flow_cfg(sigma_min=1.0)
    with pytest.raises(InvalidInputError):
        tiny_flow_cfg(down_blocks=2)  # mismatched with up_blocks=1
    with pytest.raises(InvalidInputError):
        tiny_flow_cfg(intermediate_dim=15)
    with pytest.raises(InvalidInputError):
        SpectrogramFlow(tiny_flow_cfg(), 1)
