"""Reverse-diffusion anticipation: noise (or zeros) -> ẑ_0 -> labels and durations -> frames."""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np
import torch

from .codec import ActionSequence, normalize_durations, truncate_at_eos
from .net import DiffAnt
from .schedule import NoiseSchedule, make_trajectory, renoise_from_z0hat

# Stochastic samples run in zero-padded chunks of this fixed size, so sample j
# sees the same arithmetic whatever m is (nested sample sets stay exact).
SAMPLE_CHUNK = 8


@dataclass
class AnticipationResult:
    actions: ActionSequence
    frame_labels: np.ndarray
    sample_id: int = 0
    empty: bool = False
    scores: np.ndarray | None = None
    # step -> decoded ẑ_0 estimate / decoded trajectory latent at that step
    intermediate: dict = field(default_factory=dict)
    intermediate_latent: dict = field(default_factory=dict)


def to_framewise(actions: ActionSequence, horizon_frames: int) -> np.ndarray:
    """Expand normalised durations to exactly H frame labels (largest-remainder rounding)."""
    if horizon_frames < 1:
        raise ValueError("horizon must be >= 1 frame")
    if len(actions) == 0:
        raise ValueError("cannot expand an empty action sequence")
    raw = actions.durations / actions.durations.sum() * horizon_frames
    counts = np.floor(raw).astype(np.int64)
    short = horizon_frames - int(counts.sum())
    if short > 0:
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:short]] += 1
    return np.repeat(actions.classes, counts)


def sample_seed(seed: int, sample_id: int) -> int:
    return int(np.random.SeedSequence([seed, sample_id]).generate_state(1)[0])


def video_seed(seed: int, key: str) -> int:
    """Per-video base seed, so sample j of different videos draws independent noise."""
    return int(np.random.SeedSequence([seed, zlib.crc32(key.encode())]).generate_state(1)[0])


def decode_latents(model: DiffAnt, z):
    """Predictor + EOS truncation + duration normalisation for a (B, M, D') batch."""
    eos = model.cfg.num_classes - 1
    logits, durs = model.codec.predict(z)
    classes = logits.argmax(-1).cpu().numpy()
    durs = durs.cpu().numpy()
    out = []
    for c, d in zip(classes, durs):
        seq = truncate_at_eos(c, d, eos)
        if len(seq):
            seq = ActionSequence(seq.classes, normalize_durations(seq.durations))
        out.append(seq)
    return out


def _draw(generators, shape, dtype):
    """One standard normal draw per generator; ``None`` entries (padding) get zeros."""
    return torch.stack([torch.randn(shape, generator=g, dtype=dtype) if g is not None
                        else torch.zeros(shape, dtype=dtype) for g in generators])


NOISE_KINDS = ("fresh", "shared")


@torch.no_grad()
def reverse_process(model: DiffAnt, sched: NoiseSchedule, enc, z_init, trajectory,
                    deterministic: bool, generators=None, keep=False, noise: str = "shared"):
    """Iterate denoise / re-noise along ``trajectory``; returns (ẑ_0, [(step, z_in, ẑ_0)]).

    In stochastic mode ``noise="shared"`` re-noises every step with the initial
    draw ``z_init``, so each sample keeps one noise direction for the whole
    chain; ``noise="fresh"`` draws new noise at every step instead.
    """
    if noise not in NOISE_KINDS:
        raise ValueError(f"unknown noise kind {noise!r}")
    z = z_init
    B = z.shape[0]
    record = []
    z0_hat = None
    for k, s in enumerate(trajectory):
        z0_hat = model.denoise(z, torch.full((B,), s), enc)
        if keep:
            record.append((s, z, z0_hat))
        if k + 1 == len(trajectory):
            break
        s_prev = trajectory[k + 1]
        if deterministic:
            z = renoise_from_z0hat(sched, z0_hat, s_prev, deterministic=True, z_s=z, s=s)
        else:
            eps = z_init if noise == "shared" else _draw(generators, z.shape[1:], z.dtype)
            z = renoise_from_z0hat(sched, z0_hat, s_prev, eps, s=s)
    return z0_hat, record


@torch.no_grad()
def anticipate(model: DiffAnt, sched: NoiseSchedule, features, mode: str = "deterministic",
               num_steps: int = 100, m: int = 1, horizon_frames: int = 1,
               keep_intermediate: bool = False, seed: int = 0, enc=None,
               noise: str = "shared") -> list[AnticipationResult]:
    """Anticipate the future of one observation.

    Deterministic mode starts from z_S = 0 and re-noises with the implied
    noise (no randomness at all) and always returns a single result.
    Stochastic mode draws ``m`` samples, sample ``j`` using its own
    generator seeded from ``(seed, j)``; ``noise`` picks the re-noising
    scheme (see ``reverse_process``).
    """
    if mode not in ("deterministic", "stochastic"):
        raise ValueError(f"unknown mode {mode!r}")
    if m < 1:
        raise ValueError("m must be >= 1")
    model.eval()
    cfg = model.cfg
    traj = make_trajectory(sched.S, num_steps)
    if enc is None:
        feats = torch.as_tensor(np.asarray(features), dtype=model.dtype)
        enc = model.encode(feats)
    deterministic = mode == "deterministic"
    n = 1 if deterministic else m
    shape = (cfg.num_queries, cfg.decoder_dim)
    if deterministic:
        z0, record = reverse_process(model, sched, enc, torch.zeros((1,) + shape, dtype=model.dtype),
                                     traj, True, None, keep_intermediate)
    else:
        parts, record = [], []
        for start in range(0, n, SAMPLE_CHUNK):
            gens = [torch.Generator().manual_seed(sample_seed(seed, j)) if j < n else None
                    for j in range(start, start + SAMPLE_CHUNK)]
            z_c, rec_c = reverse_process(model, sched, enc, _draw(gens, shape, model.dtype),
                                         traj, False, gens, keep_intermediate, noise)
            k = min(SAMPLE_CHUNK, n - start)
            parts.append(z_c[:k])
            if not record:
                record = [(s, z[:k], zh[:k]) for s, z, zh in rec_c]
            else:
                record = [(s, torch.cat([z0_, z[:k]]), torch.cat([zh0, zh[:k]]))
                          for (s, z0_, zh0), (_, z, zh) in zip(record, rec_c)]
        z0 = torch.cat(parts)

    if cfg.multilabel:
        scores = torch.sigmoid(model.codec.predict(z0)[0][:, 0]).cpu().numpy()
        return [AnticipationResult(ActionSequence([], []), np.zeros(0, dtype=np.int64), j,
                                   scores=scores[j]) for j in range(n)]

    eos = cfg.num_classes - 1
    frame_probs = enc.frame_logits[0, -1].clone()
    frame_probs[eos] = -np.inf
    fallback = int(frame_probs.argmax())
    decoded = decode_latents(model, z0)
    results = []
    for j, seq in enumerate(decoded):
        if len(seq):
            frames, empty = to_framewise(seq, horizon_frames), False
        else:
            frames, empty = np.full(horizon_frames, fallback, dtype=np.int64), True
        results.append(AnticipationResult(seq, frames, j, empty))
    for s, z_in, z0_hat in record:
        for j, (a, b) in enumerate(zip(decode_latents(model, z0_hat), decode_latents(model, z_in))):
            results[j].intermediate[s] = a
            results[j].intermediate_latent[s] = b
    return results


def frames_or_fallback(seq: ActionSequence, horizon_frames: int, fallback: int) -> np.ndarray:
    if len(seq) == 0:
        return np.full(horizon_frames, fallback, dtype=np.int64)
    return to_framewise(seq, horizon_frames)
