"""Conversion between discrete future actions and continuous latents."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn


class EmptyFutureError(ValueError):
    """Raised when a decoded future has no actions left to normalise."""


@dataclass(frozen=True)
class ActionVocabulary:
    names: tuple[str, ...]
    eos_id: int

    def __post_init__(self):
        if len(self.names) < 2:
            raise ValueError("vocabulary needs at least one action plus EOS")
        if len(set(self.names)) != len(self.names):
            raise ValueError("vocabulary names must be unique")
        if not 0 <= self.eos_id < len(self.names):
            raise ValueError(f"eos_id {self.eos_id} outside vocabulary of size {len(self.names)}")

    @property
    def C(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise KeyError(f"unknown label {name!r}") from None

    @classmethod
    def from_actions(cls, actions, eos_name="EOS"):
        names = tuple(actions) + (eos_name,)
        return cls(names=names, eos_id=len(names) - 1)

    @classmethod
    def load(cls, path, eos_name="EOS"):
        """Read ``id name`` lines; the EOS entry must be listed explicitly."""
        entries = {}
        for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 2:
                raise ValueError(f"{path}:{lineno}: expected 'id name', got {line!r}")
            entries[int(parts[0])] = parts[1]
        if sorted(entries) != list(range(len(entries))):
            raise ValueError(f"{path}: ids must be contiguous from 0")
        names = tuple(entries[i] for i in range(len(entries)))
        if eos_name not in names:
            raise ValueError(f"{path}: no {eos_name} entry")
        return cls(names=names, eos_id=names.index(eos_name))

    def save(self, path):
        Path(path).write_text("".join(f"{i} {n}\n" for i, n in enumerate(self.names)))


@dataclass(frozen=True)
class ActionSequence:
    """Per-slot class ids plus durations as fractions of the future horizon."""

    classes: np.ndarray
    durations: np.ndarray

    def __post_init__(self):
        classes = np.asarray(self.classes, dtype=np.int64).reshape(-1)
        durations = np.asarray(self.durations, dtype=np.float64).reshape(-1)
        if classes.shape != durations.shape:
            raise ValueError("classes and durations must have the same length")
        if np.any(durations < 0):
            raise ValueError("durations must be non-negative")
        object.__setattr__(self, "classes", classes)
        object.__setattr__(self, "durations", durations)

    def __len__(self):
        return int(self.classes.size)

    def __eq__(self, other):
        return (isinstance(other, ActionSequence)
                and np.array_equal(self.classes, other.classes)
                and np.array_equal(self.durations, other.durations))

    def num_actions(self, eos_id: int) -> int:
        return int(np.sum(self.classes != eos_id))

    def validate(self, vocab: ActionVocabulary, ground_truth=False):
        if np.any(self.classes >= vocab.C) or np.any(self.classes < 0):
            raise ValueError("class id outside the vocabulary")
        eos = np.flatnonzero(self.classes == vocab.eos_id)
        if eos.size:
            tail = slice(eos[0], None)
            if np.any(self.classes[tail] != vocab.eos_id) or np.any(self.durations[tail] != 0):
                raise ValueError("every slot after the first EOS must be EOS with duration 0")
        if ground_truth:
            keep = self.classes != vocab.eos_id
            if keep.any() and abs(self.durations[keep].sum() - 1.0) > 1e-6:
                raise ValueError("ground-truth durations must sum to 1")


def pad_future(classes, durations, M: int, eos_id: int) -> ActionSequence:
    """Fit a future into M slots: EOS-pad short ones, keep the first M of long ones."""
    classes = list(classes)[:M]
    durations = list(durations)[:M]
    n = len(classes)
    return ActionSequence(classes + [eos_id] * (M - n), durations + [0.0] * (M - n))


class ActionCodec(nn.Module):
    """Learned action embedding plus the two predictor heads.

    In multi-label mode the duration branch and the merge layer are bypassed:
    a multi-hot class vector is embedded straight into the decoder dimension
    and the class head is read as independent per-class logits.
    """

    def __init__(self, num_classes: int, dim: int, multilabel: bool = False):
        super().__init__()
        self.num_classes = num_classes
        self.dim = dim
        self.multilabel = multilabel
        if multilabel:
            self.class_emb = nn.Linear(num_classes, dim, bias=False)
        else:
            d_c = dim // 2
            d_t = dim - d_c
            self.class_emb = nn.Linear(num_classes, d_c, bias=False)
            self.dur_emb = nn.Linear(1, d_t)
            self.merge = nn.Linear(d_c + d_t, dim)
            self.dur_head = nn.Linear(dim, 1)
        self.class_head = nn.Linear(dim, num_classes)

    def embed(self, classes, durations=None):
        """Emb(a) for class ids (..., M) or, in multi-label mode, multi-hot (..., M, C)."""
        if self.multilabel:
            return self.class_emb(classes.to(self.class_emb.weight.dtype))
        onehot = nn.functional.one_hot(classes.long(), self.num_classes).to(self.class_emb.weight.dtype)
        dur = durations.to(onehot.dtype).unsqueeze(-1)
        return self.merge(torch.cat([self.class_emb(onehot), self.dur_emb(dur)], dim=-1))

    def predict(self, z):
        logits = self.class_head(z)
        if self.multilabel:
            return logits, None
        return logits, torch.exp(self.dur_head(z)).squeeze(-1)


def embed_actions(a: ActionSequence, codec: ActionCodec) -> torch.Tensor:
    dtype = codec.class_head.weight.dtype
    if codec.multilabel:
        raise ValueError("use codec.embed with a multi-hot tensor in multi-label mode")
    if np.any(a.classes >= codec.num_classes):
        raise ValueError("class id outside the codec vocabulary")
    return codec.embed(torch.as_tensor(a.classes), torch.as_tensor(a.durations, dtype=dtype))


def sample_z0(emb, beta0: float, noise):
    """Draw z_0 ~ N(Emb(a), beta0 I) given the embedding and a standard normal sample."""
    if beta0 < 0:
        raise ValueError(f"beta0 must be non-negative, got {beta0}")
    return emb + math.sqrt(beta0) * noise


def predict_actions(z0_tilde, codec: ActionCodec):
    if not torch.isfinite(z0_tilde).all():
        raise ValueError("latent contains non-finite values")
    return codec.predict(z0_tilde)


def truncate_at_eos(classes, durations, eos_id: int) -> ActionSequence:
    classes = np.asarray(classes).reshape(-1)
    durations = np.asarray(durations, dtype=np.float64).reshape(-1)
    hits = np.flatnonzero(classes == eos_id)
    end = int(hits[0]) if hits.size else classes.size
    return ActionSequence(classes[:end], durations[:end])


def normalize_durations(durations) -> np.ndarray:
    d = np.asarray(durations, dtype=np.float64).reshape(-1)
    if d.size == 0:
        raise EmptyFutureError("no durations to normalise")
    if np.any(d <= 0) or not np.all(np.isfinite(d)):
        raise ValueError("durations must be finite and strictly positive")
    return d / d.sum()
