"""Independent reference implementations and shared check harnesses.

Everything here is deliberately written the slow, obvious way (explicit
loops, full DP matrices, brute-force scans) so package code can be judged
against it rather than against itself.
"""

import numpy as np
import torch

from rapvox.features import FeatureMatrix, TokenSequence
from rapvox.lm import (
    LMConfig,
    LyricsTokens,
    SemanticLM,
    apply_accomp_mask,
    build_mixed_sequence,
    lm_forward,
    shift_accompaniment,
)


# --- tiny-model causality harness ---


def sample_tiny_lm_instance(i):
    """Deterministically sample a tiny model plus one mixed-sequence input.

    Returns (model, lyrics, semantic, pre_accomp, spk, t) where t is a
    semantic step chosen so both perturbation sites below exist.
    """
    gen = np.random.default_rng(1000 + i)
    heads = int(gen.integers(1, 3))
    cfg = LMConfig(
        semantic_vocab=int(gen.integers(5, 10)),
        lyrics_vocab=8,
        accomp_dim=int(gen.integers(2, 5)),
        layers=int(gen.integers(1, 3)),
        hidden=heads * 4,
        intermediate=8,
        heads=heads,
        shift_K=int(gen.integers(0, 4)),
        max_len=32,
    )
    model = SemanticLM(cfg, init_seed=1000 + i)
    model.eval()
    T = int(gen.integers(4, 9))
    L = int(gen.integers(1, 5))
    lyrics = LyricsTokens(gen.integers(0, cfg.lyrics_vocab, size=L), cfg.lyrics_vocab)
    # EOS-free ids keep every perturbed variant a valid sequence
    semantic = TokenSequence(gen.integers(0, cfg.semantic_vocab - 1, size=T), cfg.semantic_vocab)
    pre_accomp = FeatureMatrix(gen.normal(size=(T + cfg.shift_K + 3, cfg.accomp_dim)))
    spk = gen.normal(size=64) if gen.random() < 0.5 else None
    t = int(gen.integers(0, T - 1))
    return model, lyrics, semantic, pre_accomp, spk, t


def step_logits(model, lyrics, semantic, pre_accomp, spk):
    """Per-step semantic logits with the model's own shift applied."""
    shifted = shift_accompaniment(pre_accomp, model.cfg.shift_K, len(semantic))
    mixed = build_mixed_sequence(model, lyrics, semantic, shifted, spk)
    with torch.no_grad():
        return lm_forward(model, mixed)[mixed.semantic_slice]


def assert_causal_at_step(i):
    """Perturbations strictly beyond the visibility window leave step-t logits
    bit-identical; a perturbation inside the window is detected (non-vacuity)."""
    model, lyrics, semantic, pre, spk, t = sample_tiny_lm_instance(i)
    gen = np.random.default_rng(5000 + i)
    K, T = model.cfg.shift_K, len(semantic)
    base = step_logits(model, lyrics, semantic, pre, spk)

    # accompaniment frame with pre-shift index > t+K
    p = int(gen.integers(t + K + 1, pre.num_frames))
    bumped = pre.frames.copy()
    bumped[p] += gen.normal(size=bumped.shape[1]) + 1.0
    out = step_logits(model, lyrics, semantic, FeatureMatrix(bumped), spk)
    assert torch.equal(out[t], base[t]), f"instance {i}: accomp frame {p} leaked into step {t}"

    # semantic token with index > t
    q = int(gen.integers(t + 1, T))
    ids = semantic.ids.copy()
    ids[q] = (ids[q] + 1) % (model.cfg.semantic_vocab - 1)
    out = step_logits(model, lyrics, TokenSequence(ids, semantic.vocab_size), pre, spk)
    assert torch.equal(out[t], base[t]), f"instance {i}: token {q} leaked into step {t}"

    # control: the frame at exactly t+K is inside the window and must matter
    bumped = pre.frames.copy()
    bumped[t + K] += 1.0
    out = step_logits(model, lyrics, semantic, FeatureMatrix(bumped), spk)
    assert not torch.equal(out[t], base[t]), f"instance {i}: frame t+K had no effect"


def assert_full_mask_ignores_content(model, lyrics, semantic, spk, seed):
    """Two different accompaniments, both through the full-mask branch, give
    exactly equal logits."""
    gen = np.random.default_rng(seed)
    T, D = len(semantic), model.cfg.accomp_dim
    outs = []
    for _ in range(2):
        pre = FeatureMatrix(gen.normal(size=(T + model.cfg.shift_K + 2, D)))
        shifted = shift_accompaniment(pre, model.cfg.shift_K, T)
        masked, desc = apply_accomp_mask(shifted, int(gen.integers(2 ** 31)), 1.0)
        assert desc.full
        outs.append(step_logits(model, lyrics, semantic, masked, spk))
    assert torch.equal(outs[0], outs[1])


# --- finite-difference gradient checking ---


def central_diff_grad_check(model, loss_fn, *, n_coords=24, eps=1e-5,
                            rel_tol=1e-4, seed=0, min_mag=1e-5):
    """Compare autograd gradients against central differences.

    Checks the largest-magnitude coordinates plus a random sample; skips
    coordinates whose analytic and numeric magnitudes are both below
    ``min_mag`` (where relative error is dominated by round-off).
    Returns the worst relative error seen.
    """
    model.zero_grad(set_to_none=True)
    loss_fn().backward()
    params = [p for p in model.parameters() if p.grad is not None]
    grads = torch.cat([p.grad.reshape(-1) for p in params])
    sizes = [p.numel() for p in params]
    offsets = np.concatenate(([0], np.cumsum(sizes)))

    order = torch.argsort(grads.abs(), descending=True)
    rng = np.random.default_rng(seed)
    coords = set(order[: n_coords // 2].tolist())
    coords |= set(rng.integers(0, grads.numel(), size=n_coords).tolist())

    worst = 0.0
    checked = 0
    for flat in sorted(coords):
        which = int(np.searchsorted(offsets, flat, side="right") - 1)
        local = flat - int(offsets[which])
        store = params[which].data.view(-1)
        old = store[local].item()
        with torch.no_grad():
            store[local] = old + eps
            hi = float(loss_fn())
            store[local] = old - eps
            lo = float(loss_fn())
            store[local] = old
        fd = (hi - lo) / (2.0 * eps)
        g = float(grads[flat])
        mag = max(abs(fd), abs(g))
        if mag < min_mag:
            continue
        worst = max(worst, abs(fd - g) / mag)
        checked += 1
    assert checked >= n_coords // 2, "too few usable coordinates for a meaningful check"
    assert worst < rel_tol, f"worst relative gradient error {worst:.3e}"
    return worst


# --- metric references ---


def dp_wer(ref_words, hyp_words):
    """Word error rate from the full Levenshtein DP matrix."""
    n, m = len(ref_words), len(hyp_words)
    dist = np.zeros((n + 1, m + 1), dtype=np.int64)
    dist[:, 0] = np.arange(n + 1)
    dist[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            sub = dist[i - 1, j - 1] + (ref_words[i - 1] != hyp_words[j - 1])
            dist[i, j] = min(sub, dist[i - 1, j] + 1, dist[i, j - 1] + 1)
    if n == 0:
        return 0.0 if m == 0 else float("inf")
    return float(dist[n, m]) / n


def pairwise_energy_distance(x, y):
    """Energy distance between two samples via explicit O(n^2) loops."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)

    def mean_dist(a, b):
        total = 0.0
        for p in a:
            for q in b:
                total += float(np.sqrt(((p - q) ** 2).sum()))
        return total / (len(a) * len(b))

    return 2.0 * mean_dist(x, y) - mean_dist(x, x) - mean_dist(y, y)


# --- segmentation fixtures and subset rule trace ---


def labels_from_runs(runs, total_s, rate_hz=100.0):
    """Render voiced (start_s, end_s) spans to a 0/1 frame array."""
    labels = np.zeros(int(round(total_s * rate_hz)), dtype=np.uint8)
    for start, end in runs:
        labels[int(round(start * rate_hz)):int(round(end * rate_hz))] = 1
    return labels


# Hand-traced merge cases, all with threshold_std_s=0 so the per-group cap
# is exactly the mean and the trace is a pencil-and-paper exercise.  Each
# entry: (voiced runs, stream length s, segment_vad kwargs, expected spans).
VAD_FIXTURES = [
    # nothing voiced at all
    ([], 10, {}, []),
    # a single run shorter than the minimum is dropped
    ([(0, 2)], 10, {}, []),
    # one long-enough run survives untouched
    ([(0, 5)], 10, {}, [(0.0, 5.0)]),
    # a run flush against the end of the stream closes properly
    ([(2, 10)], 10, {}, [(2.0, 10.0)]),
    # gap 1 s < 3 s: two runs merge into one segment
    ([(0, 4), (5, 9)], 12, {}, [(0.0, 9.0)]),
    # gap 4 s >= 3 s: runs stay separate
    ([(0, 4), (8, 12)], 15, {}, [(0.0, 4.0), (8.0, 12.0)]),
    # the cap is checked before absorbing, so a group may overshoot once:
    # span 10 <= 18 absorbs to 21, then 21 <= 18 fails and the group closes
    ([(0, 10), (11, 21), (22, 30)], 32, {}, [(0.0, 21.0), (22.0, 30.0)]),
    # a too-short middle group is dropped while its neighbours survive
    ([(0, 5), (10, 12), (20, 26)], 30, {}, [(0.0, 5.0), (20.0, 26.0)]),
    # gap exactly equal to merge_gap_s does NOT merge (strict <)
    ([(0, 4), (7, 11)], 12, {}, [(0.0, 4.0), (7.0, 11.0)]),
    # custom knobs: tighter gap, lower cap, raised minimum dropping a group
    ([(0, 3), (4, 7), (8, 10)], 12,
     {"merge_gap_s": 1.5, "threshold_mean_s": 6.0, "min_len_s": 4.0},
     [(0.0, 7.0)]),
]


def rule_trace_subset(dnsmos, pps, primary, thresholds):
    """Independently trace the tier rules: collect every tier whose gates
    all hold, then return the highest-ranked one."""
    from rapvox.pipeline import Subset

    eligible = set()
    for name, rule in (("basic", thresholds.basic),
                       ("standard", thresholds.standard),
                       ("premium", thresholds.premium)):
        gates = [dnsmos >= rule.dnsmos_min,
                 pps >= rule.pps_min,
                 pps <= rule.pps_max,
                 primary >= rule.primary_min]
        if all(gates):
            eligible.add(name)
    if "premium" in eligible:
        return Subset.PREMIUM
    if "standard" in eligible:
        return Subset.STANDARD
    if "basic" in eligible:
        return Subset.BASIC
    return Subset.REJECTED


def make_metric_grid(n_total=1000, seed=0):
    """(dnsmos, pps, primary) triples: every boundary combination of the
    default thresholds plus random fill up to n_total."""
    d_vals = [2.4, 2.5, 3.0, 3.5, 3.79, 3.8, 4.2]
    p_vals = [11.9, 12.0, 15.0, 16.0, 18.0, 25.0, 30.0, 30.1, 32.0, 35.0, 35.1]
    f_vals = [0.79, 0.8, 0.9, 0.99, 1.0]
    triples = [(d, p, f) for d in d_vals for p in p_vals for f in f_vals]
    rng = np.random.default_rng(seed)
    while len(triples) < n_total:
        triples.append((float(rng.uniform(2.0, 4.5)),
                        float(rng.uniform(8.0, 40.0)),
                        float(rng.uniform(0.0, 1.0))))
    return triples[:n_total]


# --- end-to-end generation fixtures ---


def make_generate_fixtures(dir_path):
    """Train a small planted-coupling LM and pair it with a fresh flow model,
    saving both as checkpoints; returns (lm_path, cfm_path).

    The LM is trained just enough that early EOS stays out of the top-k,
    so sampled content is never empty; the flow stays untrained (generation
    then reproduces its stored mel statistics, which is all the smoke path
    needs).  Everything is seeded, so the fixtures are bit-stable.
    """
    from pathlib import Path

    from rapvox.bench import ToySpec, TrainBudget, train_toy_lm
    from rapvox.cfm import CFMConfig, SpectrogramFlow, save_cfm_checkpoint
    from rapvox.lm import LMConfig, save_lm_checkpoint
    from rapvox.spectral import LOG_MEL_FLOOR, N_MELS

    dir_path = Path(dir_path)
    dir_path.mkdir(parents=True, exist_ok=True)
    spec = ToySpec(n_frames=24, beat_period_frames=6, K_true=2, vocab=16,
                   feature_dim=4, noise_std=0.2)
    lm_cfg = LMConfig(semantic_vocab=16, lyrics_vocab=258, accomp_dim=4,
                      layers=1, hidden=16, intermediate=32, heads=2,
                      shift_K=2, max_len=64)
    budget = TrainBudget(steps=40, batch_size=4, n_train=12, n_eval=1)
    lm = train_toy_lm(spec, lm_cfg, budget, seed=0)
    lm_path = dir_path / "lm.ckpt"
    save_lm_checkpoint(lm, lm_path)

    flow = SpectrogramFlow(CFMConfig(intermediate_dim=48, attn_heads=4,
                                     sample_steps=4, down_blocks=1,
                                     mid_blocks=1, up_blocks=1),
                           semantic_vocab=16, init_seed=0)
    flow.set_mel_stats(np.full(N_MELS, np.log(LOG_MEL_FLOOR)), np.ones(N_MELS))
    cfm_path = dir_path / "cfm.ckpt"
    save_cfm_checkpoint(flow, cfm_path)
    return lm_path, cfm_path
