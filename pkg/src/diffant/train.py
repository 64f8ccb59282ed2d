"""Training objective, diffusion-step sampling and the optimisation loop."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
import torch
from torch.nn import functional as F

from .codec import sample_z0
from .data import split_observation
from .net import DiffAnt
from .schedule import NoiseSchedule, forward_marginal

log = logging.getLogger(__name__)

IGNORE = -100


class NumericError(RuntimeError):
    pass


@dataclass
class LossBreakdown:
    l_emb: float
    l_pred_class: float
    l_pred_dur: float
    l_seg: float
    l_smooth: float
    total: float
    smooth_weight: float = 0.15

    def line(self, epoch: int, step: int) -> str:
        vals = (self.l_emb, self.l_pred_class, self.l_pred_dur, self.l_seg, self.l_smooth, self.total)
        return "\t".join([str(epoch), str(step)] + [f"{v:.6f}" for v in vals]) + "\n"


# --- loss terms ---------------------------------------------------------------

def loss_emb(z0_hat, z0, s, emb_a, reduce=True):
    """Squared error of the z_0 prediction; at s = 1 the target is Emb(a) instead of z_0.

    Returns the per-sample mean over the M x D' entries, or their batch mean.
    """
    s = torch.as_tensor(s, device=z0_hat.device).reshape(-1)
    if torch.any(s < 1):
        raise ValueError("diffusion step must be >= 1")
    if z0_hat.dim() == 2:
        z0_hat, z0, emb_a = z0_hat[None], z0[None], emb_a[None]
    first = (s == 1).reshape(-1, *([1] * (z0.dim() - 1)))
    target = torch.where(first, emb_a, z0)
    per = ((z0_hat - target) ** 2).flatten(1).mean(dim=1)
    return per.mean() if reduce else per


def loss_pred(class_logits, durations_hat, classes, durations, eos_id, multilabel=False):
    """(class term, duration term).

    Class term: mean cross-entropy over all slots (EOS targets included), or
    per-class binary cross-entropy in multi-label mode where ``classes`` is a
    multi-hot tensor.  Duration term: mean squared error over non-EOS slots.
    """
    if multilabel:
        ce = F.binary_cross_entropy_with_logits(class_logits, classes.to(class_logits.dtype))
        return ce, class_logits.new_zeros(())
    C = class_logits.shape[-1]
    ce = F.cross_entropy(class_logits.reshape(-1, C), classes.reshape(-1).long())
    keep = classes != eos_id
    if keep.any():
        dur = ((durations_hat - durations.to(durations_hat.dtype)) ** 2)[keep].mean()
    else:
        dur = durations_hat.new_zeros(())
    return ce, dur


def loss_seg(frame_logits, frame_labels):
    """Mean frame-wise cross-entropy; labels equal to -100 are ignored."""
    C = frame_logits.shape[-1]
    return F.cross_entropy(frame_logits.reshape(-1, C), frame_labels.reshape(-1).long(),
                           ignore_index=IGNORE)


def loss_smooth(frame_logprobs, tau=4.0, valid=None):
    """Truncated MSE between log-probabilities of adjacent frames.

    Squared differences are clamped at tau**2 (|Δ log p| truncated at tau).
    ``valid`` is an optional (B, L) mask of real frames; pairs touching a
    padded frame are skipped.  Zero when no adjacent pair exists.
    """
    lp = frame_logprobs if frame_logprobs.dim() == 3 else frame_logprobs[None]
    if lp.shape[1] < 2:
        return lp.sum() * 0.0
    sq = torch.clamp((lp[:, 1:] - lp[:, :-1]) ** 2, max=tau ** 2)
    if valid is None:
        return sq.mean()
    v = valid if valid.dim() == 2 else valid[None]
    pair = (v[:, 1:] & v[:, :-1]).unsqueeze(-1).to(sq.dtype)
    n = pair.sum() * sq.shape[-1]
    if n == 0:
        return sq.sum() * 0.0
    return (sq * pair).sum() / n


# --- diffusion-step sampling --------------------------------------------------

class StepSampler:
    """Loss-aware step sampler: p_s ∝ sqrt(E[L_s^2]) over a rolling history.

    Sampling stays uniform (weight 1) until every step holds ``history``
    entries.  A small uniform mixture keeps every p_s strictly positive.
    """

    def __init__(self, S: int, history: int = 10, uniform_prob: float = 0.001, importance: bool = True):
        self.S = S
        self.history = history
        self.uniform_prob = uniform_prob
        self.importance = importance
        self.buffer = np.zeros((S, history), dtype=np.float64)
        self.counts = np.zeros(S, dtype=np.int64)

    @property
    def warmed_up(self) -> bool:
        return self.importance and bool(np.all(self.counts >= self.history))

    def probabilities(self) -> np.ndarray:
        if not self.warmed_up:
            return np.full(self.S, 1.0 / self.S)
        w = np.sqrt(np.mean(self.buffer ** 2, axis=1))
        p = w / w.sum()
        return p * (1 - self.uniform_prob) + self.uniform_prob / self.S

    def sample(self, rng: np.random.Generator, n: int = 1):
        """Return (steps in [1, S], importance weights 1 / (S p_s))."""
        p = self.probabilities()
        idx = rng.choice(self.S, size=n, p=p)
        if not self.warmed_up:
            return idx + 1, np.ones(n)
        return idx + 1, 1.0 / (self.S * p[idx])

    def update(self, steps, losses):
        for s, l in zip(np.asarray(steps).reshape(-1), np.asarray(losses).reshape(-1)):
            i = int(s) - 1
            if self.counts[i] == self.history:
                self.buffer[i, :-1] = self.buffer[i, 1:]
                self.buffer[i, -1] = l
            else:
                self.buffer[i, self.counts[i]] = l
                self.counts[i] += 1


def sample_step(state: StepSampler, rng):
    s, w = state.sample(rng, 1)
    return int(s[0]), float(w[0])


# --- batching -----------------------------------------------------------------

@dataclass
class Batch:
    feats: torch.Tensor  # B x L x K
    padding: torch.Tensor  # B x L, True on padded frames
    frame_labels: torch.Tensor  # B x L, -100 on padded frames
    classes: torch.Tensor  # B x M ids, or B x 1 x C multi-hot
    durations: torch.Tensor  # B x M


def collate(observations, num_classes, multilabel=False, dtype=torch.float32) -> Batch:
    B = len(observations)
    L = max(len(o.frame_labels) for o in observations)
    K = observations[0].features.shape[1]
    feats = torch.zeros(B, L, K, dtype=dtype)
    padding = torch.ones(B, L, dtype=torch.bool)
    labels = torch.full((B, L), IGNORE, dtype=torch.long)
    for b, o in enumerate(observations):
        n = len(o.frame_labels)
        feats[b, :n] = torch.as_tensor(o.features, dtype=dtype)
        padding[b, :n] = False
        labels[b, :n] = torch.as_tensor(o.frame_labels)
    if multilabel:
        classes = torch.zeros(B, 1, num_classes, dtype=dtype)
        for b, o in enumerate(observations):
            classes[b, 0, list(o.future_set)] = 1
        durations = torch.zeros(B, 1, dtype=dtype)
    else:
        classes = torch.as_tensor(np.stack([o.future.classes for o in observations]))
        durations = torch.as_tensor(np.stack([o.future.durations for o in observations]), dtype=dtype)
    return Batch(feats, padding, labels, classes, durations)


# --- objective ----------------------------------------------------------------

def compute_losses(model: DiffAnt, sched: NoiseSchedule, batch: Batch, steps, weights=None,
                   noise=None, z0_noise=None, beta0=None, smooth_weight=0.15, smooth_tau=4.0):
    """Forward pass over a batch; returns (dict of loss tensors, per-sample embedding loss)."""
    cfg = model.cfg
    B = batch.feats.shape[0]
    dtype = model.dtype
    steps = np.asarray(steps).reshape(-1)
    weights = np.ones(B) if weights is None else np.asarray(weights).reshape(-1)
    beta0 = float(sched.betas[0]) if beta0 is None or beta0 < 0 else beta0

    enc = model.encode(batch.feats.to(dtype), batch.padding)
    emb_a = model.codec.embed(batch.classes, batch.durations)
    shape = emb_a.shape
    z0_noise = torch.randn(shape, dtype=dtype) if z0_noise is None else z0_noise
    noise = torch.randn(shape, dtype=dtype) if noise is None else noise
    z0 = sample_z0(emb_a, beta0, z0_noise)
    z_s = forward_marginal(sched, z0, steps, noise)
    z0_hat = model.denoise(z_s, torch.as_tensor(steps), enc)

    emb_per = loss_emb(z0_hat, z0, steps, emb_a, reduce=False)
    l_emb = (torch.as_tensor(weights, dtype=dtype) * emb_per).mean()
    logits, dur_hat = model.codec.predict(z0)
    l_cls, l_dur = loss_pred(logits, dur_hat, batch.classes, batch.durations,
                             eos_id=cfg.num_classes - 1, multilabel=cfg.multilabel)
    l_seg = loss_seg(enc.frame_logits, batch.frame_labels)
    l_smooth = loss_smooth(F.log_softmax(enc.frame_logits, dim=-1), smooth_tau, ~batch.padding)
    total = l_emb + l_cls + l_dur + l_seg + smooth_weight * l_smooth
    terms = {"l_emb": l_emb, "l_pred_class": l_cls, "l_pred_dur": l_dur, "l_seg": l_seg,
             "l_smooth": l_smooth, "total": total}
    return terms, emb_per.detach()


def cosine_warmup(step: int, warmup: int, total: int) -> float:
    if step < warmup:
        return (step + 1) / warmup
    progress = (step - warmup) / max(1, total - warmup)
    return 0.5 * (1 + math.cos(math.pi * min(1.0, progress)))


class Trainer:
    """One-writer optimisation loop around :func:`compute_losses`."""

    def __init__(self, model: DiffAnt, sched: NoiseSchedule, train_cfg, beta0=None, steps_per_epoch=1):
        self.model = model
        self.sched = sched
        self.cfg = train_cfg
        self.beta0 = beta0
        self.rng = np.random.default_rng(train_cfg.seed)
        torch.manual_seed(train_cfg.seed)
        self.sampler = StepSampler(sched.S, train_cfg.history,
                                   importance=train_cfg.sampler == "importance")
        self.optimizer = torch.optim.AdamW(model.parameters(), lr=train_cfg.lr,
                                           weight_decay=train_cfg.weight_decay)
        total = max(1, train_cfg.epochs * steps_per_epoch)
        warm = min(total, train_cfg.warmup_epochs * steps_per_epoch) or 1
        self.lr_sched = torch.optim.lr_scheduler.LambdaLR(
            self.optimizer, lambda i: cosine_warmup(i, warm, total))

    def train_step(self, batch: Batch) -> LossBreakdown:
        self.model.train()
        B = batch.feats.shape[0]
        steps, weights = self.sampler.sample(self.rng, B)
        terms, emb_per = compute_losses(self.model, self.sched, batch, steps, weights,
                                        beta0=self.beta0, smooth_weight=self.cfg.smooth_weight,
                                        smooth_tau=self.cfg.smooth_tau)
        vals = {k: float(v.detach()) for k, v in terms.items()}
        if not all(math.isfinite(v) for v in vals.values()):
            raise NumericError(f"non-finite loss at steps {steps.tolist()}: {vals}")
        self.optimizer.zero_grad(set_to_none=True)
        terms["total"].backward()
        torch.nn.utils.clip_grad_norm_(self.model.parameters(), self.cfg.grad_clip)
        self.optimizer.step()
        self.lr_sched.step()
        self.sampler.update(steps, emb_per.numpy())
        return LossBreakdown(smooth_weight=self.cfg.smooth_weight, **vals)

    def epoch_batches(self, videos, M, eos_id):
        order = self.rng.permutation(len(videos))
        bs = self.cfg.batch_size
        for i in range(0, len(order), bs):
            obs = []
            for j in order[i:i + bs]:
                alpha = float(self.rng.choice(self.cfg.alphas))
                obs.append(split_observation(videos[j], alpha, M, eos_id))
            yield collate(obs, self.model.cfg.num_classes, self.model.cfg.multilabel)

    def fit(self, videos, log_file=None, on_epoch=None):
        """Run ``epochs`` passes over ``videos``; appends one TSV line per step to ``log_file``."""
        cfg = self.model.cfg
        history = []
        step = 0
        for epoch in range(self.cfg.epochs):
            for batch in self.epoch_batches(videos, cfg.num_queries, cfg.num_classes - 1):
                lb = self.train_step(batch)
                history.append(lb)
                if log_file is not None:
                    log_file.write(lb.line(epoch, step))
                step += 1
            log.info("epoch %d total %.4f", epoch, history[-1].total)
            if on_epoch is not None:
                on_epoch(epoch, history)
        return history


def steps_per_epoch(n_videos: int, batch_size: int) -> int:
    return max(1, math.ceil(n_videos / batch_size))
