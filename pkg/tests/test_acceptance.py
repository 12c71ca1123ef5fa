"""Acceptance gate: the nine required behaviors, one test per criterion.

Each test enforces its stated tolerance and time budget and prints a
single PASS line with the measured numbers (visible with ``pytest -s``;
``pytest -v`` gives the pass/fail line per criterion either way).  Run
with ``pytest tests/test_acceptance.py -v``.  Criterion 6 trains forty
small models and dominates the runtime (several minutes on one core).
"""

import hashlib
import json
import time

import numpy as np
import pytest
import torch

from oracles import (
    VAD_FIXTURES,
    assert_causal_at_step,
    assert_full_mask_ignores_content,
    central_diff_grad_check,
    dp_wer,
    labels_from_runs,
    make_generate_fixtures,
    make_metric_grid,
    rule_trace_subset,
    sample_tiny_lm_instance,
)
from rapvox.bench import (
    TrainBudget,
    default_ablation_configs,
    default_ablation_spec,
    energy_distance,
    gauss8_samples,
    run_shift_ablation,
    train_toy_flow,
)
from rapvox.cfm import (
    CFMConfig,
    SpectrogramFlow,
    ToyVectorField,
    cfm_loss,
    euler_sample,
    ot_path_sample,
)
from rapvox.cli import main
from rapvox.errors import EXIT_OK
from rapvox.formats import read_wav
from rapvox.lm import LMConfig, SemanticLM, lm_loss
from rapvox.metrics import fad, kld, secs, wer
from rapvox.pipeline import (
    DEFAULT_THRESHOLDS,
    Segment,
    Subset,
    VadLabels,
    assign_subset,
    segment_vad,
)
from rapvox.refenc import ReferenceEncoder


def _report(n, elapsed, detail):
    print(f"criterion {n}: PASS ({elapsed:.1f} s) — {detail}")


class RotationField(torch.nn.Module):
    """x' = A x with A = [[0, -1], [1, 0]]; exact flow is a rotation by t."""

    def forward(self, x, t, mu=None, spk=None):
        return torch.stack((-x[..., 1], x[..., 0]), dim=-1)


def test_criterion_1_causality_and_shift_window():
    start = time.perf_counter()
    for i in range(50):
        assert_causal_at_step(i)
    elapsed = time.perf_counter() - start
    assert elapsed < 60.0
    _report(1, elapsed, "50 instances bit-identical outside the visibility window")


def test_criterion_2_masking_equivalence():
    start = time.perf_counter()
    for i in range(20):
        model, lyrics, semantic, _pre, spk, _t = sample_tiny_lm_instance(i)
        assert_full_mask_ignores_content(model, lyrics, semantic, spk, 7000 + i)
    elapsed = time.perf_counter() - start
    _report(2, elapsed, "20 accompaniment pairs give exactly equal full-mask logits")


def test_criterion_3_gradient_checks():
    start = time.perf_counter()
    worst = []

    lm_cfg = LMConfig(semantic_vocab=8, lyrics_vocab=8, accomp_dim=3, layers=1,
                      hidden=8, intermediate=12, heads=2, shift_K=2, max_len=64)
    model = SemanticLM(lm_cfg, init_seed=6, dtype=torch.float64)
    gen = np.random.default_rng(6)
    batch = {
        "lyrics": gen.integers(0, lm_cfg.lyrics_vocab, size=(2, 3)),
        "semantic": gen.integers(0, lm_cfg.semantic_vocab - 1, size=(2, 5)),
        "accomp": gen.normal(size=(2, 5, lm_cfg.accomp_dim)),
        "ref_mel": gen.normal(size=(2, 4, 128)),
    }
    worst.append(central_diff_grad_check(model, lambda: lm_loss(model, batch), seed=6))

    net = ToyVectorField(dim=2, hidden=16, depth=2, temb_dim=8, init_seed=5,
                         dtype=torch.float64)
    x1 = torch.randn(8, 2, generator=torch.Generator().manual_seed(5),
                     dtype=torch.float64)
    worst.append(central_diff_grad_check(
        net, lambda: cfm_loss(x1, None, None, net, rng_seed=17), seed=5))

    flow_cfg = CFMConfig(sigma_min=1e-4, sample_steps=4, input_dim=72,
                         intermediate_dim=16, mel_dim=4, down_blocks=1,
                         mid_blocks=1, up_blocks=1, attn_heads=2)
    flow = SpectrogramFlow(flow_cfg, 9, init_seed=6, dtype=torch.float64)
    gen = np.random.default_rng(7)
    flow_batch = {
        "mel": gen.normal(size=(2, 6, 4)),
        "tokens": gen.integers(0, 9, size=(2, 6)),
        "speaker": gen.normal(size=(2, 64)),
    }
    worst.append(central_diff_grad_check(
        flow, lambda: flow.training_loss(flow_batch, rng_seed=23), seed=7))

    elapsed = time.perf_counter() - start
    assert elapsed < 120.0
    _report(3, elapsed, f"worst relative gradient error {max(worst):.2e} (tol 1e-4)")


def test_criterion_4_ot_path_and_solver():
    start = time.perf_counter()
    gen = torch.Generator().manual_seed(0)
    x0 = torch.randn(50, 3, generator=gen, dtype=torch.float64)
    x1 = torch.randn(50, 3, generator=gen, dtype=torch.float64)
    at0, _ = ot_path_sample(x0, x1, 0.0, sigma_min=1e-4)
    assert torch.equal(at0, x0)
    at1, u_disp = ot_path_sample(x0, x1, 1.0, sigma_min=0.0)
    assert torch.equal(at1, x1)
    assert torch.equal(u_disp, x1 - x0)

    net = RotationField()
    gen = torch.Generator().manual_seed(3)
    start_pts = torch.randn(16, 2, generator=gen, dtype=torch.float64)
    rot = torch.tensor([[np.cos(1.0), -np.sin(1.0)],
                        [np.sin(1.0), np.cos(1.0)]], dtype=torch.float64)
    exact = start_pts @ rot.T
    errors = []
    for steps in (32, 64, 128, 256):
        out = euler_sample(net, steps=steps, seed=3, shape=(16, 2),
                           dtype=torch.float64)
        errors.append(float(torch.linalg.vector_norm(out - exact, dim=1).mean()))
    ratios = [coarse / fine for coarse, fine in zip(errors, errors[1:])]
    assert all(1.8 <= r <= 2.2 for r in ratios), ratios

    c = torch.tensor([1.5, -2.0, 0.25], dtype=torch.float64)

    class ConstantField(torch.nn.Module):
        def forward(self, x, t, mu=None, spk=None):
            return c.expand_as(x)

    out = euler_sample(ConstantField(), steps=1, seed=7, shape=(5, 3),
                       dtype=torch.float64)
    x_init = torch.randn(5, 3, generator=torch.Generator().manual_seed(7),
                         dtype=torch.float64)
    assert torch.equal(out, x_init + c)

    elapsed = time.perf_counter() - start
    _report(4, elapsed,
            f"endpoints exact; Euler ratios {', '.join(f'{r:.2f}' for r in ratios)};"
            " constant field exact")


def test_criterion_5_cfm_toy_generation():
    start = time.perf_counter()
    dists = []
    for seed in (0, 1, 2):
        net = train_toy_flow(seed)  # 2000 steps
        generated = euler_sample(net, steps=100, seed=seed + 100, shape=(2000, 2))
        true = gauss8_samples(2000, seed + 200)
        dists.append(energy_distance(generated, true))
    median = float(np.median(dists))
    elapsed = time.perf_counter() - start
    assert median < 0.15, dists
    assert elapsed < 300.0
    _report(5, elapsed, f"energy distance median {median:.4f} over 3 seeds (tol 0.15)")


def test_criterion_6_shift_ablation():
    start = time.perf_counter()
    spec = default_ablation_spec()
    table = run_shift_ablation(spec, default_ablation_configs(spec),
                               TrainBudget(), [0, 1, 2, 3, 4])
    means = {(row.config, row.inference): row.mean_score for row in table.rows}
    with_lookahead = means[(f"K={spec.K_true}", "unmasked")]
    no_lookahead = means[("K=0", "unmasked")]
    masked = means[(f"K={spec.K_true}", "masked")]
    elapsed = time.perf_counter() - start
    assert with_lookahead >= no_lookahead + 0.10, means
    assert no_lookahead <= masked <= with_lookahead, means
    assert elapsed < 1800.0
    _report(6, elapsed,
            f"alignment means: K={spec.K_true} {with_lookahead:.4f} > "
            f"masked {masked:.4f} > K=0 {no_lookahead:.4f}")


def test_criterion_7_pipeline():
    start = time.perf_counter()
    for runs, total_s, kwargs, expected in VAD_FIXTURES:
        labels = VadLabels(labels_from_runs(runs, total_s))
        got = [(s.start_s, s.end_s) for s in segment_vad(labels, seed=0, **kwargs)]
        assert got == expected, (runs, kwargs, got, expected)

    grid = make_metric_grid(1000)
    for dnsmos, pps, primary in grid:
        seg = Segment(0.0, 10.0, pps=pps, dnsmos=dnsmos, primary_frac=primary)
        assert assign_subset(seg) is rule_trace_subset(dnsmos, pps, primary,
                                                       DEFAULT_THRESHOLDS)

    means = []
    for seed in range(5):
        labels = VadLabels(labels_from_runs([(k, k + 0.8) for k in range(3600)], 3600))
        durations = [s.duration_s for s in segment_vad(labels, seed=seed)]
        means.append(float(np.mean(durations)))
        assert abs(means[-1] - 18.0) <= 1.5, means
    elapsed = time.perf_counter() - start
    _report(7, elapsed,
            f"10 fixtures exact; 1000-point grid matches rule trace; dense-stream "
            f"means {min(means):.2f}–{max(means):.2f} s (18 ± 1.5)")


def test_criterion_8_metrics():
    start = time.perf_counter()
    rng = np.random.default_rng(42)
    vocab = ["yo", "flow", "beat", "mic", "rhyme"]
    for _ in range(100):
        ref = [vocab[i] for i in rng.integers(0, len(vocab), size=rng.integers(1, 13))]
        hyp = [vocab[i] for i in rng.integers(0, len(vocab), size=rng.integers(0, 13))]
        assert wer(ref, hyp) == dp_wer(ref, hyp)

    a = rng.normal(size=(20, 4))
    assert fad(a, a) < 1e-6
    one_d_a = np.array([[-1.0], [0.0], [1.0]])  # mean 0, sample variance 1
    one_d_b = np.array([[-1.0], [1.0], [3.0]])  # mean 1, sample variance 4
    assert fad(one_d_a, one_d_b) == pytest.approx(2.0, abs=1e-9)

    p = np.abs(rng.normal(size=(10, 6))) + 0.1
    p /= p.sum(axis=1, keepdims=True)
    assert kld(p, p) == 0.0
    v = rng.normal(size=32)
    assert secs(v, v) == pytest.approx(1.0, abs=1e-12)
    assert secs(2.0 * v, v) == pytest.approx(1.0, abs=1e-12)

    enc = ReferenceEncoder(input_dim=16, widths=(24, 64), init_seed=0,
                           dtype=torch.float64)
    gen = np.random.default_rng(0)
    mel = torch.tensor(gen.normal(size=(40, 16)))
    with torch.no_grad():
        base = enc(mel)
        for _ in range(100):
            perm = torch.tensor(gen.permutation(40))
            assert torch.max(torch.abs(enc(mel[perm]) - base)).item() < 1e-6
    elapsed = time.perf_counter() - start
    _report(8, elapsed, "wer == DP oracle x100; fad/kld/secs identities; "
                        "reference encoder invariant over 100 permutations")


def test_criterion_9_end_to_end_smoke(tmp_path):
    start = time.perf_counter()
    lm_path, cfm_path = make_generate_fixtures(tmp_path / "ckpts")
    lyrics = tmp_path / "lyrics.txt"
    lyrics.write_text("yo check the beat drop\n", encoding="utf-8")
    hashes = []
    reports = []
    for name in ("first.wav", "second.wav"):
        out_wav = tmp_path / name
        rc = main(["generate", "--lyrics", str(lyrics), "--lm-ckpt", str(lm_path),
                   "--cfm-ckpt", str(cfm_path), "--out-wav", str(out_wav),
                   "--seed", "5", "--temperature", "0.8", "--top-k", "4"])
        assert rc == EXIT_OK
        hashes.append(hashlib.sha256(out_wav.read_bytes()).hexdigest())
        reports.append(json.loads(
            out_wav.with_suffix(".wav.json").read_text(encoding="utf-8")))

    report = reports[0]
    samples, rate = read_wav(tmp_path / "first.wav")
    assert rate == 44100
    hop_s = 512 / 44100.0
    expected_s = report["mel_frames"] * hop_s
    assert abs(samples.size / 44100.0 - expected_s) <= hop_s
    assert hashes[0] == hashes[1], "rerun produced a different waveform"
    assert reports[0] == reports[1]
    elapsed = time.perf_counter() - start
    _report(9, elapsed, f"duration {samples.size / 44100.0:.3f} s matches "
                        f"{report['mel_frames']} frames x hop; hash {hashes[0][:12]} "
                        "stable across reruns")
