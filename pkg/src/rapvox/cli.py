"""Command-line entry point tying the stack together.

Subcommands:
  pipeline run    segment, score, and tier a song manifest
  tokenizer-fit   fit the k-means codebook on feature files
  train           LM or spectrogram-flow training per a run config
  generate        lyrics + accompaniment + reference excerpt -> WAV
  eval            wer | secs | fad | kld | beats
  bench           shift ablation on the planted-coupling benchmark
  stats           dataset statistics from a segments manifest

Every command is deterministic given its config and seed; each derives all
of its randomness from the single named seed.  Exit codes: 0 success, 2
invalid input, 3 external-tool failure, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch
import yaml

from .bench import (
    TrainBudget,
    ToySpec,
    default_ablation_configs,
    default_ablation_spec,
    gen_toy_pair,
    make_toy_batch,
    run_shift_ablation,
    toy_lyrics_vocab,
)
from .cfm import (
    CFMConfig,
    SpectrogramFlow,
    load_cfm_checkpoint,
    save_cfm_checkpoint,
    train_cfm_step,
)
from .config import RunConfig, TrainPlan, load_run_config
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
    FeatureMatrix,
    TokenSequence,
    fit_kmeans,
    load_codebook,
    load_features,
    save_codebook,
    tokenize,
)
from .formats import read_manifest, read_mel, read_transcripts, read_wav, write_wav
from .lm import (
    LMConfig,
    SamplingConfig,
    SemanticLM,
    apply_accomp_mask,
    encode_lyrics,
    generate_semantic,
    load_lm_checkpoint,
    save_lm_checkpoint,
    shift_accompaniment,
    train_lm_step,
)
from .metrics import (
    beat_alignment_report,
    fad,
    kld,
    load_embeddings,
    normalize_text,
    secs,
    wer,
    write_alignment_plot_data,
)
from .pipeline import Subset, dataset_stats, run_pipeline, write_stats_report
from .refenc import encode_reference
from .spectral import LOG_MEL_FLOOR, N_MELS, griffin_lim_invert, vocoder_ingest

log = logging.getLogger(__name__)

REF_PROMPT_SECONDS = 3.0

_SUBSET_RANK = {"Basic": 0, "Standard": 1, "Premium": 2}


def _stage(name: str, fn, *args, **kwargs):
    """Run one pipeline stage; failures carry the stage tag in the message."""
    try:
        return fn(*args, **kwargs)
    except (InvalidInputError, ExternalToolError, NumericalError) as exc:
        exc.args = (f"[{name}] {exc.args[0] if exc.args else exc}",) + tuple(exc.args[1:])
        raise
    except (FileNotFoundError, OSError) as exc:
        raise InvalidInputError(f"[{name}] {exc}") from exc


def _load_config(args) -> RunConfig | None:
    if getattr(args, "config", None):
        return load_run_config(args.config)
    return None


def _resolve_seed(args, cfg: RunConfig | None) -> int:
    if args.seed is not None:
        return int(args.seed)
    if cfg is not None:
        return cfg.seed
    return 0


def _resolve_out(args, cfg: RunConfig | None) -> Path:
    if args.out:
        return Path(args.out)
    if cfg is not None:
        return Path(cfg.paths.out_dir)
    return Path("out")


# ---------------------------------------------------------------- pipeline


def cmd_pipeline(args) -> int:
    cfg = _load_config(args)
    manifest = args.manifest or (cfg.paths.manifest if cfg else None)
    if not manifest:
        raise InvalidInputError("pipeline run needs --manifest or paths.manifest in the config")
    thresholds = cfg.thresholds if cfg else None
    kwargs = {"write_audio": not args.no_audio}
    if thresholds is not None:
        kwargs["thresholds"] = thresholds
    summary = run_pipeline(manifest, _resolve_out(args, cfg), _resolve_seed(args, cfg), **kwargs)
    counts = summary["subset_counts"]
    print(f"songs: {summary['songs_total']} ({summary['songs_skipped']} skipped)")
    print(f"segments: {summary['segments_total']}")
    for subset in Subset:
        print(f"  {subset.value}: {counts[subset.value]}")
    print(f"manifest: {summary['segments_manifest']}")
    return EXIT_OK


# ------------------------------------------------------------ tokenizer-fit


def cmd_tokenizer_fit(args) -> int:
    matrices = [load_features(p) for p in args.features]
    dim = matrices[0].dim
    rate = matrices[0].frame_rate_hz
    for path, m in zip(args.features, matrices):
        if m.dim != dim or m.frame_rate_hz != rate:
            raise InvalidInputError(f"feature file {path} disagrees in dim or frame rate")
    stacked = FeatureMatrix(np.concatenate([m.frames for m in matrices], axis=0), rate)
    codebook, trace = fit_kmeans(stacked, args.k, _resolve_seed(args, None),
                                 args.max_iters, max_points=args.max_points,
                                 return_trace=True)
    save_codebook(args.out_file, codebook)
    print(f"codebook: {args.out_file} (k={args.k}, dim={dim}, "
          f"objective {trace[0]:.4g} -> {trace[-1]:.4g} in {len(trace)} iters)")
    return EXIT_OK


# -------------------------------------------------------------------- train


def _phase_at(plan: TrainPlan, step: int):
    acc = 0
    for i, phase in enumerate(plan.curriculum):
        acc += phase.steps
        if step < acc:
            return i, phase
    return len(plan.curriculum) - 1, plan.curriculum[-1]


def _open_loss_log(path: Path):
    fresh = not path.exists()
    f = open(path, "a", encoding="utf-8")
    if fresh:
        f.write("step\tphase\tloss\n")
    return f


def _toy_lm_setup(cfg: RunConfig):
    spec = cfg.toy if cfg.toy is not None else ToySpec()
    lm_cfg = cfg.lm if cfg.lm is not None else default_ablation_configs(spec)[0]
    if lm_cfg.semantic_vocab != spec.vocab or lm_cfg.accomp_dim != spec.feature_dim:
        raise InvalidInputError("lm config does not match the toy spec")
    if lm_cfg.lyrics_vocab < toy_lyrics_vocab(spec):
        raise InvalidInputError("lm lyric vocab too small for the toy spec")
    return spec, lm_cfg


def _load_resume(path: str, kind: str):
    if kind == "semantic_lm":
        model, payload = load_lm_checkpoint(path)
    else:
        model, payload = load_cfm_checkpoint(path)
    return model, payload


def _train_lm(cfg: RunConfig, plan: TrainPlan, seed: int, out_dir: Path,
              resume: str | None) -> int:
    start_step = 0
    if plan.data_mode == "toy":
        spec, lm_cfg = _toy_lm_setup(cfg)
        pool_seeds = [(seed << 20) + i for i in range(plan.toy_pool)]
        pairs = [gen_toy_pair(spec, s) for s in pool_seeds]
        prepared = None
    else:
        if cfg.lm is None:
            raise InvalidInputError("files-mode LM training needs an lm section in the config")
        spec, lm_cfg, prepared = None, cfg.lm, _prepare_lm_rows(cfg)

    if resume:
        model, payload = _load_resume(resume, "semantic_lm")
        if asdict(model.cfg) != asdict(lm_cfg):
            raise InvalidInputError("resume checkpoint config differs from the run config")
        optimizer = torch.optim.AdamW(model.parameters(), lr=plan.lr,
                                      weight_decay=plan.weight_decay)
        if payload.get("optimizer"):
            optimizer.load_state_dict(payload["optimizer"])
        start_step = int(payload["extra"].get("completed_steps", 0))
    else:
        model = SemanticLM(lm_cfg, init_seed=seed)
        optimizer = torch.optim.AdamW(model.parameters(), lr=plan.lr,
                                      weight_decay=plan.weight_decay)

    ckpt_path = out_dir / "lm.ckpt"
    first_loss = last_loss = None
    with _open_loss_log(out_dir / "lm_loss.tsv") as loss_log:
        for step in range(start_step, plan.total_steps):
            phase_idx, phase = _phase_at(plan, step)
            rng = np.random.Generator(np.random.PCG64([seed, 2, step]))
            if plan.data_mode == "toy":
                indices = rng.choice(plan.toy_pool, size=min(plan.batch_size, plan.toy_pool),
                                     replace=False)
                batch = make_toy_batch(lm_cfg, spec, pairs, indices, rng)
            else:
                batch = _lm_file_batch(lm_cfg, prepared, phase.subset, rng)
            loss = train_lm_step(model, batch, optimizer, clip_norm=plan.clip_norm)
            if not np.isfinite(loss):
                raise NumericalError(f"LM training diverged at step {step} (loss {loss})")
            first_loss = loss if first_loss is None else first_loss
            last_loss = loss
            loss_log.write(f"{step}\t{phase.subset}\t{loss:.6f}\n")
            if (step + 1) % plan.log_every == 0 or step + 1 == plan.total_steps:
                log.info("lm step %d/%d (%s): loss %.4f",
                         step + 1, plan.total_steps, phase.subset, loss)
            if step + 1 == plan.total_steps or _phase_at(plan, step + 1)[0] != phase_idx:
                save_lm_checkpoint(model, ckpt_path, optimizer=optimizer,
                                   extra={"completed_steps": step + 1, "seed": seed})
    if last_loss is None:
        print(f"nothing to do: checkpoint already at step {start_step}")
        return EXIT_OK
    print(f"lm: {plan.total_steps - start_step} steps, loss {first_loss:.4f} -> {last_loss:.4f}")
    print(f"checkpoint: {ckpt_path}")
    return EXIT_OK


def _toy_cfm_sample(vocab: int, t_frames: int, rng: np.random.Generator):
    """Synthetic (ids, mel) pair: each token id paints a fixed spectral bump."""
    ids = rng.integers(0, vocab - 1, size=t_frames)
    centers = (ids + 0.5) * (N_MELS / vocab)
    ch = np.arange(N_MELS, dtype=np.float64)
    mel = np.log(LOG_MEL_FLOOR) + 2.0 * np.exp(-((ch[None, :] - centers[:, None]) ** 2) / 18.0)
    mel += 0.05 * rng.standard_normal(mel.shape)
    return ids, mel


def _train_cfm(cfg: RunConfig, plan: TrainPlan, seed: int, out_dir: Path,
               resume: str | None) -> int:
    toy_frames = 64
    if plan.data_mode == "toy":
        if cfg.lm is not None:
            vocab = cfg.lm.semantic_vocab
        elif cfg.toy is not None:
            vocab = cfg.toy.vocab
        else:
            vocab = ToySpec().vocab
        prepared = None
    else:
        prepared = _prepare_cfm_rows(cfg)
        vocab = prepared["vocab"]
    cfm_cfg = cfg.cfm if cfg.cfm is not None else CFMConfig(intermediate_dim=96, attn_heads=4,
                                                            sample_steps=8)

    start_step = 0
    if resume:
        model, payload = _load_resume(resume, "spectrogram_cfm")
        if asdict(model.cfg) != asdict(cfm_cfg) or model.semantic_vocab != vocab:
            raise InvalidInputError("resume checkpoint config differs from the run config")
        optimizer = torch.optim.AdamW(model.parameters(), lr=plan.lr,
                                      weight_decay=plan.weight_decay)
        if payload.get("optimizer"):
            optimizer.load_state_dict(payload["optimizer"])
        start_step = int(payload["extra"].get("completed_steps", 0))
    else:
        model = SpectrogramFlow(cfm_cfg, vocab, init_seed=seed)
        if plan.data_mode == "toy":
            stats_rng = np.random.Generator(np.random.PCG64([seed, 3]))
            sample = np.concatenate(
                [_toy_cfm_sample(vocab, toy_frames, stats_rng)[1] for _ in range(32)], axis=0)
            model.set_mel_stats(sample.mean(axis=0), sample.std(axis=0))
        else:
            model.set_mel_stats(prepared["mel_mean"], prepared["mel_std"])
        optimizer = torch.optim.AdamW(model.parameters(), lr=plan.lr,
                                      weight_decay=plan.weight_decay)

    ckpt_path = out_dir / "cfm.ckpt"
    first_loss = last_loss = None
    with _open_loss_log(out_dir / "cfm_loss.tsv") as loss_log:
        for step in range(start_step, plan.total_steps):
            phase_idx, phase = _phase_at(plan, step)
            rng = np.random.Generator(np.random.PCG64([seed, 4, step]))
            if plan.data_mode == "toy":
                draws = [_toy_cfm_sample(vocab, toy_frames, rng) for _ in range(plan.batch_size)]
                batch = {"tokens": np.stack([d[0] for d in draws]),
                         "mel": np.stack([d[1] for d in draws])}
            else:
                batch = _cfm_file_batch(prepared, phase.subset, rng)
            loss = train_cfm_step(model, batch, optimizer, (seed << 24) + step,
                                  clip_norm=plan.clip_norm)
            if not np.isfinite(loss):
                raise NumericalError(f"CFM training diverged at step {step} (loss {loss})")
            first_loss = loss if first_loss is None else first_loss
            last_loss = loss
            loss_log.write(f"{step}\t{phase.subset}\t{loss:.6f}\n")
            if (step + 1) % plan.log_every == 0 or step + 1 == plan.total_steps:
                log.info("cfm step %d/%d (%s): loss %.4f",
                         step + 1, plan.total_steps, phase.subset, loss)
            if step + 1 == plan.total_steps or _phase_at(plan, step + 1)[0] != phase_idx:
                save_cfm_checkpoint(model, ckpt_path, optimizer=optimizer,
                                    extra={"completed_steps": step + 1, "seed": seed})
    if last_loss is None:
        print(f"nothing to do: checkpoint already at step {start_step}")
        return EXIT_OK
    print(f"cfm: {plan.total_steps - start_step} steps, loss {first_loss:.4f} -> {last_loss:.4f}")
    print(f"checkpoint: {ckpt_path}")
    return EXIT_OK


def _accepted_rows(cfg: RunConfig) -> list[dict]:
    if not cfg.paths.segments:
        raise InvalidInputError("files-mode training needs paths.segments in the config")
    rows = [r for r in read_manifest(cfg.paths.segments)
            if r.get("subset") in _SUBSET_RANK]
    if not rows:
        raise InvalidInputError("segments manifest has no accepted (non-Rejected) rows")
    return rows


def _rows_for_tier(prepared: dict, tier: str):
    rank = _SUBSET_RANK[tier]
    eligible = [r for r in prepared["rows"] if _SUBSET_RANK[r["subset"]] >= rank]
    if not eligible:
        raise InvalidInputError(f"no segments at or above the {tier} tier")
    return eligible


def _segment_ref_mel(row: dict) -> np.ndarray | None:
    """A reference excerpt from the segment's own vocal slice, up to 3 s."""
    wav_path = row.get("vocal_wav")
    if not wav_path or not Path(wav_path).is_file():
        return None
    from .spectral import mel_analyze

    samples, rate = read_wav(wav_path)
    if rate != 44100:
        raise InvalidInputError(f"vocal slice {wav_path} is not 44.1 kHz")
    budget = int(round(REF_PROMPT_SECONDS * 44100))
    if samples.size > budget:
        start = (samples.size - budget) // 2
        samples = samples[start:start + budget]
    return mel_analyze(samples).frames


def _prepare_lm_rows(cfg: RunConfig) -> dict:
    if not (cfg.paths.features_dir and cfg.paths.accomp_dir and cfg.paths.codebook):
        raise InvalidInputError(
            "files-mode LM training needs paths.features_dir, paths.accomp_dir, paths.codebook")
    codebook = load_codebook(cfg.paths.codebook)
    rows = _accepted_rows(cfg)
    features_dir = Path(cfg.paths.features_dir)
    accomp_dir = Path(cfg.paths.accomp_dir)
    prepared_rows = []
    for row in rows:
        seg_id = row["segment_id"]
        feat_path = features_dir / f"{seg_id}.fmx"
        accomp_path = accomp_dir / f"{seg_id}.fmx"
        if not feat_path.is_file() or not accomp_path.is_file():
            log.warning("segment %s: missing feature files, skipping", seg_id)
            continue
        tokens = tokenize(load_features(feat_path), codebook)
        sem = np.concatenate((tokens.ids, [tokens.eos_id]))
        lyrics = encode_lyrics(row.get("text", ""))
        prepared_rows.append({
            "subset": row["subset"],
            "lyrics": lyrics.ids,
            "semantic": sem,
            "accomp": load_features(accomp_path),
            "ref_mel": _segment_ref_mel(row),
        })
    if not prepared_rows:
        raise InvalidInputError("no usable segments for files-mode LM training")
    return {"rows": prepared_rows}


def _lm_file_batch(lm_cfg: LMConfig, prepared: dict, tier: str,
                   rng: np.random.Generator) -> dict:
    # batch size 1 keeps variable-length segments simple
    eligible = _rows_for_tier(prepared, tier)
    row = eligible[int(rng.integers(0, len(eligible)))]
    t_total = row["semantic"].size
    shifted = shift_accompaniment(row["accomp"], lm_cfg.shift_K, t_total)
    masked, _ = apply_accomp_mask(shifted, int(rng.integers(2 ** 62)), lm_cfg.mask_full_prob)
    batch = {
        "lyrics": row["lyrics"][None, :],
        "semantic": row["semantic"][None, :],
        "accomp": masked.frames[None, :, :],
    }
    if row["ref_mel"] is not None:
        batch["ref_mel"] = row["ref_mel"][None, :, :]
    return batch


def _prepare_cfm_rows(cfg: RunConfig) -> dict:
    if not (cfg.paths.features_dir and cfg.paths.codebook):
        raise InvalidInputError(
            "files-mode CFM training needs paths.features_dir and paths.codebook")
    from .spectral import mel_analyze

    codebook = load_codebook(cfg.paths.codebook)
    rows = _accepted_rows(cfg)
    features_dir = Path(cfg.paths.features_dir)
    prepared_rows = []
    mel_sum = np.zeros(N_MELS)
    mel_sq = np.zeros(N_MELS)
    mel_count = 0
    for row in rows:
        seg_id = row["segment_id"]
        feat_path = features_dir / f"{seg_id}.fmx"
        wav_path = row.get("vocal_wav")
        if not feat_path.is_file() or not wav_path or not Path(wav_path).is_file():
            log.warning("segment %s: missing features or vocal slice, skipping", seg_id)
            continue
        samples, rate = read_wav(wav_path)
        if rate != 44100:
            raise InvalidInputError(f"vocal slice {wav_path} is not 44.1 kHz")
        mel = mel_analyze(samples).frames
        tokens = tokenize(load_features(feat_path), codebook)
        # nearest-index resample of token ids onto the mel frame grid
        j = np.arange(mel.shape[0])
        src = np.clip(((j + 0.5) * tokens.ids.size / mel.shape[0]).astype(np.int64),
                      0, tokens.ids.size - 1)
        prepared_rows.append({
            "subset": row["subset"],
            "mel": mel,
            "tokens": tokens.ids[src],
        })
        mel_sum += mel.sum(axis=0)
        mel_sq += (mel * mel).sum(axis=0)
        mel_count += mel.shape[0]
    if not prepared_rows:
        raise InvalidInputError("no usable segments for files-mode CFM training")
    mean = mel_sum / mel_count
    var = np.maximum(mel_sq / mel_count - mean * mean, 1e-6)
    return {"rows": prepared_rows, "vocab": codebook.centroids.shape[0] + 1,
            "mel_mean": mean, "mel_std": np.sqrt(var)}


def _cfm_file_batch(prepared: dict, tier: str, rng: np.random.Generator) -> dict:
    eligible = _rows_for_tier(prepared, tier)
    row = eligible[int(rng.integers(0, len(eligible)))]
    mel = row["mel"]
    ref_frames = int(round(REF_PROMPT_SECONDS * MEL_FRAME_RATE_HZ))
    if mel.shape[0] > ref_frames:
        start = int(rng.integers(0, mel.shape[0] - ref_frames + 1))
        ref = mel[start:start + ref_frames]
    else:
        ref = mel
    return {"mel": mel[None, :, :], "tokens": row["tokens"][None, :],
            "ref_mel": ref[None, :, :]}


def cmd_train(args) -> int:
    cfg = _load_config(args)
    if cfg is None:
        raise InvalidInputError("train needs --config")
    seed = _resolve_seed(args, cfg)
    out_dir = _resolve_out(args, cfg)
    out_dir.mkdir(parents=True, exist_ok=True)
    if args.stage == "lm":
        return _train_lm(cfg, cfg.train, seed, out_dir, args.resume)
    return _train_cfm(cfg, cfg.train, seed, out_dir, args.resume)


# ----------------------------------------------------------------- generate


def cmd_generate(args) -> int:
    cfg = _load_config(args)
    seed = _resolve_seed(args, cfg)
    lm_path = args.lm_ckpt or (cfg.paths.lm_checkpoint if cfg else None)
    cfm_path = args.cfm_ckpt or (cfg.paths.cfm_checkpoint if cfg else None)
    if not lm_path or not cfm_path:
        raise InvalidInputError("[load-checkpoints] both LM and CFM checkpoints are required "
                                "(--lm-ckpt/--cfm-ckpt or config paths)")
    lm_model, _ = _stage("load-checkpoints", load_lm_checkpoint, lm_path)
    cfm_model, _ = _stage("load-checkpoints", load_cfm_checkpoint, cfm_path)
    lm_model.eval()
    cfm_model.eval()
    if cfm_model.semantic_vocab != lm_model.cfg.semantic_vocab:
        raise InvalidInputError(
            f"[load-checkpoints] incompatible checkpoints: LM vocab "
            f"{lm_model.cfg.semantic_vocab}, CFM vocab {cfm_model.semantic_vocab}")

    def read_inputs():
        text = Path(args.lyrics).read_text(encoding="utf-8").strip()
        lyrics = encode_lyrics(text, vocab_size=lm_model.cfg.lyrics_vocab)
        accomp = None
        if args.accomp:
            accomp = load_features(args.accomp)
            if accomp.dim != lm_model.cfg.accomp_dim:
                raise InvalidInputError(
                    f"accompaniment features have dim {accomp.dim}, "
                    f"model expects {lm_model.cfg.accomp_dim}")
        ref = None
        if args.ref_mel:
            frames, _rate = read_mel(args.ref_mel)
            budget = int(round(REF_PROMPT_SECONDS * MEL_FRAME_RATE_HZ))
            if frames.shape[0] > budget:
                frames = frames[:budget]
            ref = np.asarray(frames, dtype=np.float64)
        return text, lyrics, accomp, ref

    text, lyrics, accomp, ref = _stage("read-inputs", read_inputs)

    spk = None
    if ref is not None:
        spk = _stage("speaker-encoding", encode_reference, ref, lm_model.ref_encoder)

    if cfg is not None:
        sampling = SamplingConfig(cfg.sampling.temperature, cfg.sampling.top_k, seed)
    else:
        sampling = SamplingConfig(seed=seed)
    if args.temperature is not None:
        sampling = SamplingConfig(args.temperature, sampling.top_k, seed)
    if args.top_k is not None:
        sampling = SamplingConfig(sampling.temperature, args.top_k, seed)

    tokens = _stage("semantic-generation", generate_semantic, lm_model, lyrics, accomp, spk,
                    sampling, max_new_tokens=args.max_new_tokens)
    content_ids = tokens.ids
    if content_ids.size and content_ids[-1] == tokens.eos_id:
        content_ids = content_ids[:-1]
    if content_ids.size == 0:
        raise InvalidInputError("[semantic-generation] model emitted no content tokens")
    content = TokenSequence(content_ids, tokens.vocab_size, tokens.frame_rate_hz)

    steps = args.steps or cfm_model.cfg.sample_steps
    mel = _stage("spectrogram", cfm_model.generate, content,
                 ref_mel=ref, steps=steps, seed=seed + 1)

    vocoder_cmd = args.vocoder or (cfg.paths.vocoder_cmd if cfg else None)
    if vocoder_cmd:
        clip = _stage("waveform", vocoder_ingest, mel, vocoder_cmd)
        waveform_stage = "external"
    else:
        clip = _stage("waveform", griffin_lim_invert, mel, args.gl_iters, seed + 2)
        waveform_stage = "griffin_lim"

    out_path = Path(args.out_wav)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    _stage("write-output", write_wav, out_path, clip.samples)
    report = {
        "lyrics_chars": len(text),
        "semantic_tokens": int(content_ids.size),
        "truncated": bool(tokens.truncated),
        "token_seconds": content_ids.size / SSL_FRAME_RATE_HZ,
        "mel_frames": mel.num_frames,
        "wav_samples": clip.num_samples,
        "wav_seconds": clip.duration_s,
        "seed": seed,
        "sampling": {"temperature": sampling.temperature, "top_k": sampling.top_k},
        "cfm_steps": steps,
        "waveform_stage": waveform_stage,
        "reference_frames": 0 if ref is None else int(ref.shape[0]),
    }
    report_path = out_path.with_suffix(out_path.suffix + ".json")
    report_path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n",
                           encoding="utf-8")
    print(f"wrote {out_path} ({clip.duration_s:.3f} s, {content_ids.size} tokens)")
    print(f"report: {report_path}")
    return EXIT_OK


# --------------------------------------------------------------------- eval


def _eval_wer(args) -> float:
    refs = read_transcripts(args.ref)
    hyps = read_transcripts(args.hyp)
    missing = sorted(set(refs) - set(hyps))
    if missing:
        raise InvalidInputError(f"hypothesis file is missing segment ids: {', '.join(missing[:5])}")
    total_words = 0
    weighted = 0.0
    for seg_id, ref_text in sorted(refs.items()):
        ref_words = normalize_text(ref_text)
        hyp_words = normalize_text(hyps[seg_id])
        if not ref_words:
            raise InvalidInputError(f"reference for {seg_id} has no words")
        weighted += wer(ref_words, hyp_words) * len(ref_words)
        total_words += len(ref_words)
    return weighted / total_words


def _eval_secs(args) -> float:
    a = load_embeddings(args.a, "a")
    b = load_embeddings(args.b, "b")
    if a.count != b.count:
        raise InvalidInputError(
            f"embedding files must pair row for row ({a.count} vs {b.count})")
    values = [secs(a.vectors[i], b.vectors[i]) for i in range(a.count)]
    return float(np.mean(values))


def cmd_eval(args) -> int:
    if args.metric == "wer":
        value = _eval_wer(args)
    elif args.metric == "secs":
        value = _eval_secs(args)
    elif args.metric == "fad":
        value = fad(load_embeddings(args.a, "a"), load_embeddings(args.b, "b"))
    elif args.metric == "kld":
        value = kld(load_features(args.p).frames, load_features(args.q).frames)
    else:
        accomp, rate_a = read_wav(args.accomp)
        vocal, rate_v = read_wav(args.vocal)
        if rate_a != 44100 or rate_v != 44100:
            raise InvalidInputError("beat alignment expects 44.1 kHz WAV inputs")
        report = beat_alignment_report(accomp, vocal, args.tolerance)
        if args.plot_data:
            write_alignment_plot_data(report, args.plot_data)
        log.info("beats: %d, onsets: %d", len(report.beat_times_s), len(report.onset_times_s))
        value = report.aligned_fraction
    print(f"{value:.6f}")
    return EXIT_OK


# -------------------------------------------------------------------- bench


def _load_bench_spec(path: str | None) -> tuple[ToySpec, TrainBudget]:
    if not path:
        return default_ablation_spec(), TrainBudget()
    p = Path(path)
    if not p.is_file():
        raise InvalidInputError(f"bench spec file not found: {p}")
    try:
        raw = yaml.safe_load(p.read_text(encoding="utf-8")) or {}
    except yaml.YAMLError as exc:
        raise InvalidInputError(f"bench spec is not valid YAML: {exc}") from exc
    if not isinstance(raw, dict):
        raise InvalidInputError("bench spec root must be a mapping")
    unknown = sorted(set(raw) - {"toy", "budget"})
    if unknown:
        raise InvalidInputError(f"unknown keys in bench spec: {', '.join(unknown)}")
    from .config import _build, _build_toy

    spec = _build_toy(raw["toy"]) if raw.get("toy") is not None else default_ablation_spec()
    budget = _build(TrainBudget, raw.get("budget"), "budget")
    return spec, budget


def cmd_bench(args) -> int:
    spec, budget = _load_bench_spec(args.spec)
    if args.steps is not None:
        budget = TrainBudget(steps=args.steps, batch_size=budget.batch_size, lr=budget.lr,
                             weight_decay=budget.weight_decay, clip_norm=budget.clip_norm,
                             n_train=budget.n_train, n_eval=budget.n_eval)
    base = _resolve_seed(args, None)
    seeds = [base + i for i in range(args.seeds)]
    table = run_shift_ablation(spec, default_ablation_configs(spec), budget, seeds)
    print(table.render())
    out_dir = _resolve_out(args, None)
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {"spec": asdict(spec), "seeds": seeds, "budget": asdict(budget),
               "rows": table.to_records()}
    out_path = out_dir / "ablation.json"
    out_path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(f"rows: {out_path}")
    return EXIT_OK


# -------------------------------------------------------------------- stats


def cmd_stats(args) -> int:
    cfg = _load_config(args)
    manifest = args.manifest or (cfg.paths.segments if cfg else None)
    if not manifest:
        raise InvalidInputError("stats needs --manifest or paths.segments in the config")
    report = dataset_stats(manifest)
    paths = write_stats_report(report, _resolve_out(args, cfg))
    print(f"segments: {report.total_segments} ({report.skipped_rows} rows skipped)")
    print(f"hours: {report.total_hours:.3f}")
    for subset in Subset:
        print(f"  {subset.value}: {report.subset_counts.get(subset.value, 0)}")
    print(f"report: {paths['report']}")
    return EXIT_OK


# ------------------------------------------------------------------- parser


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="YAML run configuration")
    parser.add_argument("--seed", type=int, default=None,
                        help="override the config seed (default 0 without a config)")
    parser.add_argument("--out", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rapvox",
                                     description="accompaniment-conditioned rap voice stack")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pipeline", help="dataset construction")
    psub = p.add_subparsers(dest="action", required=True)
    prun = psub.add_parser("run", help="segment, score, and tier a song manifest")
    _add_common(prun)
    prun.add_argument("--manifest", help="song manifest (tab-separated key=value rows)")
    prun.add_argument("--no-audio", action="store_true", help="skip writing audio slices")
    prun.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("tokenizer-fit", help="fit the k-means codebook")
    _add_common(p)
    p.add_argument("--features", nargs="+", required=True, help="feature matrix files")
    p.add_argument("--k", type=int, required=True, help="codebook size")
    p.add_argument("--max-iters", type=int, default=100)
    p.add_argument("--max-points", type=int, default=None,
                   help="subsample cap for the fit")
    p.add_argument("--out-file", required=True, help="codebook output path")
    p.set_defaults(func=cmd_tokenizer_fit)

    p = sub.add_parser("train", help="train the LM or the spectrogram flow")
    _add_common(p)
    p.add_argument("stage", choices=["lm", "cfm"])
    p.add_argument("--resume", help="continue from this checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="lyrics to waveform")
    _add_common(p)
    p.add_argument("--lyrics", required=True, help="UTF-8 lyrics text file")
    p.add_argument("--accomp", help="accompaniment feature matrix file")
    p.add_argument("--ref-mel", help="reference mel excerpt (first 3 s are used)")
    p.add_argument("--lm-ckpt", help="semantic LM checkpoint")
    p.add_argument("--cfm-ckpt", help="spectrogram flow checkpoint")
    p.add_argument("--out-wav", required=True, help="output WAV path")
    p.add_argument("--max-new-tokens", type=int, default=1000)
    p.add_argument("--temperature", type=float, default=None)
    p.add_argument("--top-k", type=int, default=None)
    p.add_argument("--steps", type=int, default=None, help="flow integration steps")
    p.add_argument("--gl-iters", type=int, default=60, help="phase-recovery iterations")
    p.add_argument("--vocoder", help="external vocoder command with {mel} and {wav}")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("eval", help="objective metrics")
    esub = p.add_subparsers(dest="metric", required=True)
    e = esub.add_parser("wer", help="corpus word error rate over transcript files")
    e.add_argument("--ref", required=True)
    e.add_argument("--hyp", required=True)
    e = esub.add_parser("secs", help="mean row-paired speaker cosine similarity")
    e.add_argument("--a", required=True)
    e.add_argument("--b", required=True)
    e = esub.add_parser("fad", help="Frechet distance between embedding sets")
    e.add_argument("--a", required=True)
    e.add_argument("--b", required=True)
    e = esub.add_parser("kld", help="mean rowwise KL between distribution files")
    e.add_argument("--p", required=True)
    e.add_argument("--q", required=True)
    e = esub.add_parser("beats", help="vocal onset to beat alignment from WAV pair")
    e.add_argument("--accomp", required=True)
    e.add_argument("--vocal", required=True)
    e.add_argument("--tolerance", type=float, default=0.07)
    e.add_argument("--plot-data", help="write long-format plot data here")
    for e_parser in esub.choices.values():
        e_parser.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="synthetic benchmarks")
    bsub = p.add_subparsers(dest="action", required=True)
    b = bsub.add_parser("ablation", help="accompaniment-shift ablation")
    _add_common(b)
    b.add_argument("--spec", help="YAML file with toy/budget sections")
    b.add_argument("--seeds", type=int, default=5, help="number of seeds")
    b.add_argument("--steps", type=int, default=None, help="override training steps")
    b.set_defaults(func=cmd_bench)

    p = sub.add_parser("stats", help="dataset statistics")
    _add_common(p)
    p.add_argument("--manifest", help="segments manifest")
    p.set_defaults(func=cmd_stats)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    torch.manual_seed(0)
    try:
        return args.func(args)
    except InvalidInputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID_INPUT
    except ExternalToolError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_EXTERNAL_TOOL
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID_INPUT


if __name__ == "__main__":
    sys.exit(main())
