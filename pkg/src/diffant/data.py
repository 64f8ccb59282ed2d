"""Synthetic activity grammar, Breakfast-style file formats, observation splits."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .codec import ActionSequence, ActionVocabulary, pad_future
from .evaluate import EvalWindow, _floor, segments

FEATURE_HEADER_BYTES = 16


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class Branch:
    """A choice point: ((actions, probability), ...)."""

    options: tuple

    def __post_init__(self):
        total = sum(p for _, p in self.options)
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"branch probabilities sum to {total}, not 1")
        if any(p < 0 for _, p in self.options):
            raise ValueError("branch probabilities must be non-negative")


@dataclass(frozen=True)
class Activity:
    name: str
    body: tuple  # action ids and Branch items
    weight: float = 1.0

    def expansions(self):
        """All (action tuple, probability) pairs with non-zero probability."""
        choices = []
        for item in self.body:
            if isinstance(item, Branch):
                choices.append([(tuple(a), p) for a, p in item.options if p > 0])
            else:
                choices.append([((int(item),), 1.0)])
        out = []
        for combo in itertools.product(*choices):
            actions = tuple(a for part, _ in combo for a in part)
            out.append((actions, float(np.prod([p for _, p in combo]))))
        return out


@dataclass(frozen=True)
class GrammarSpec:
    vocab: ActionVocabulary
    activities: tuple
    duration_law: tuple  # (min_frames, max_frames) per action id
    feature_dim: int = 32
    noise_sigma: float = 0.5
    ambiguity: float = 0.0
    prototype_seed: int = 0

    def __post_init__(self):
        n_actions = self.vocab.C - 1
        if len(self.duration_law) != n_actions:
            raise ValueError("need one duration law per non-EOS action")
        for lo, hi in self.duration_law:
            if not 1 <= lo <= hi:
                raise ValueError(f"bad duration law ({lo}, {hi})")
        for act in self.activities:
            for actions, _ in act.expansions():
                if any(a == self.vocab.eos_id or not 0 <= a < self.vocab.C for a in actions):
                    raise ValueError(f"activity {act.name} uses an invalid action id")

    def prototypes(self) -> np.ndarray:
        rng = np.random.default_rng(self.prototype_seed)
        protos = rng.normal(size=(self.vocab.C, self.feature_dim))
        return protos / np.linalg.norm(protos, axis=1, keepdims=True)

    def expansions(self):
        """(activity index, actions, prior probability) over the whole grammar."""
        weights = np.array([a.weight for a in self.activities], dtype=np.float64)
        weights = weights / weights.sum()
        return [(i, actions, w * p)
                for i, (act, w) in enumerate(zip(self.activities, weights))
                for actions, p in act.expansions()]


def default_grammar(ambiguity: float = 0.0, seed: int = 0, num_actions: int = 12,
                    num_activities: int = 4, prefix_len: int = 4, tail_len: int = 4,
                    feature_dim: int = 32, noise_sigma: float = 0.5,
                    duration_range=(25, 55), jitter: int = 4) -> GrammarSpec:
    """Seeded grammar: each activity is a fixed prefix followed by a two-way branch.

    The main tail is taken with probability ``1 - ambiguity`` and an
    alternative tail with probability ``ambiguity``.  Every action gets a
    nominal length in ``duration_range`` with +-``jitter`` frames of spread.
    """
    rng = np.random.default_rng(seed)
    vocab = ActionVocabulary.from_actions([f"a{i:02d}" for i in range(num_actions)])
    activities = []
    firsts = rng.permutation(num_actions)[:num_activities]
    for k in range(num_activities):
        prefix = [int(firsts[k])]
        while len(prefix) < prefix_len:
            c = int(rng.integers(num_actions))
            if c not in prefix:
                prefix.append(c)
        pool = [c for c in range(num_actions) if c not in prefix]
        picks = rng.permutation(pool)[: 2 * tail_len]
        main, alt = tuple(int(c) for c in picks[:tail_len]), tuple(int(c) for c in picks[tail_len:])
        body = tuple(prefix) + (Branch(((main, 1.0 - ambiguity), (alt, ambiguity))),)
        activities.append(Activity(f"activity{k}", body))
    nominal = rng.integers(duration_range[0], duration_range[1] + 1, size=num_actions)
    law = tuple((int(max(1, n - jitter)), int(n + jitter)) for n in nominal)
    return GrammarSpec(vocab, tuple(activities), law, feature_dim, noise_sigma, ambiguity,
                       prototype_seed=seed)


@dataclass
class VideoRecord:
    video_id: str
    frame_labels: np.ndarray
    features: np.ndarray  # T x K
    split: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.frame_labels = np.asarray(self.frame_labels, dtype=np.int64)
        self.features = np.asarray(self.features, dtype=np.float32)
        if self.features.ndim != 2 or self.features.shape[0] != self.frame_labels.shape[0]:
            raise DataError(f"{self.video_id}: labels ({self.frame_labels.shape[0]}) and "
                            f"features {self.features.shape} disagree")

    @property
    def T(self) -> int:
        return int(self.frame_labels.shape[0])


def generate_dataset(grammar: GrammarSpec, n_videos: int, seed: int, split: str = "") -> list[VideoRecord]:
    """Sample videos by expanding activity rules; a pure function of its arguments."""
    rng = np.random.default_rng(seed)
    protos = grammar.prototypes().astype(np.float32)
    weights = np.array([a.weight for a in grammar.activities], dtype=np.float64)
    weights /= weights.sum()
    videos = []
    for n in range(n_videos):
        k = int(rng.choice(len(grammar.activities), p=weights))
        actions = []
        branch_taken = []
        for item in grammar.activities[k].body:
            if isinstance(item, Branch):
                probs = np.array([p for _, p in item.options])
                j = int(rng.choice(len(item.options), p=probs))
                branch_taken.append(j)
                actions.extend(item.options[j][0])
            else:
                actions.append(int(item))
        lengths = [int(rng.integers(grammar.duration_law[a][0], grammar.duration_law[a][1] + 1))
                   for a in actions]
        labels = np.repeat(np.array(actions, dtype=np.int64), lengths)
        noise = rng.normal(size=(labels.size, grammar.feature_dim)).astype(np.float32)
        feats = protos[labels] + np.float32(grammar.noise_sigma) * noise
        videos.append(VideoRecord(f"{split or 'vid'}_{n:05d}", labels, feats, split,
                                  {"activity": k, "branches": branch_taken}))
    return videos


def _continue_prob(law, run):
    """P(d > run | d >= run) for d ~ U{lo..hi}."""
    lo, hi = law
    support = hi - max(lo, run) + 1
    if support <= 0:
        return 0.0
    return max(0, hi - max(lo, run + 1) + 1) / support


def _expected_rest(law, run):
    """E[d - run | d > run] for d ~ U{lo..hi}."""
    lo, hi = law
    return (max(lo, run + 1) + hi) / 2.0 - run


def _continuations(grammar, observed_labels):
    obs = segments(observed_labels)
    if not obs:
        raise DataError("empty observation")
    seq = tuple(c for c, _, _ in obs)
    run = obs[-1][2] - obs[-1][1]
    p_go_on = _continue_prob(grammar.duration_law[seq[-1]], run)
    out = []
    n = len(seq)
    for _, actions, prior in grammar.expansions():
        if tuple(actions[:n]) != seq:
            continue
        if p_go_on > 0:
            out.append((tuple(actions[n - 1:]), True, prior * p_go_on))
        if p_go_on < 1:
            out.append((tuple(actions[n:]), False, prior * (1 - p_go_on)))
    total = sum(p for _, _, p in out)
    if total == 0:
        raise DataError("observation is inconsistent with the grammar")
    return [(a, going, p / total) for a, going, p in out if p > 0], run


def continuation_distribution(grammar: GrammarSpec, observed_labels) -> dict:
    """Exact posterior over future action sequences given observed frame labels.

    Keys are tuples of future actions; when the last observed segment may
    still be running, its action leads the tuple.
    """
    dist: dict = {}
    for actions, _, p in _continuations(grammar, observed_labels)[0]:
        dist[actions] = dist.get(actions, 0.0) + p
    return dist


def oracle_forecasts(grammar: GrammarSpec, observed_labels):
    """Expected-duration forecast for every continuation: [(ActionSequence, prob)], most likely first."""
    conts, run = _continuations(grammar, observed_labels)
    out = []
    for actions, going, prob in conts:
        if not actions:
            continue
        durs = np.array([
            _expected_rest(grammar.duration_law[c], run) if (i == 0 and going)
            else sum(grammar.duration_law[c]) / 2.0
            for i, c in enumerate(actions)])
        out.append((ActionSequence(actions, durs / durs.sum()), prob))
    out.sort(key=lambda x: -x[1])
    return out


@dataclass
class Observation:
    features: np.ndarray
    frame_labels: np.ndarray
    future: ActionSequence
    horizon_frames: int
    window_frames: int | None = None
    future_set: frozenset = frozenset()


def run_length_future(labels):
    segs = segments(labels)
    counts = np.array([b - a for _, a, b in segs], dtype=np.float64)
    return [c for c, _, _ in segs], (counts / counts.sum()).tolist()


def split_observation(v: VideoRecord, alpha: float, M: int, eos_id: int,
                      window: EvalWindow | None = None) -> Observation:
    """Observe the first floor(alpha*T) frames; encode the rest as a relative-duration future."""
    if not 0 < alpha < 1:
        raise DataError(f"alpha must lie in (0, 1), got {alpha}")
    L = _floor(alpha * v.T)
    if L < 1:
        raise DataError(f"{v.video_id}: alpha={alpha} leaves no observed frame (T={v.T})")
    if L >= v.T:
        raise DataError(f"{v.video_id}: alpha={alpha} leaves no future frame")
    classes, durs = run_length_future(v.frame_labels[L:])
    window_frames = None
    if window is not None:
        start, stop = window.span(v.T)
        window_frames = stop - start
    return Observation(v.features[:L], v.frame_labels[:L], pad_future(classes, durs, M, eos_id),
                       v.T - L, window_frames, frozenset(int(c) for c in np.unique(v.frame_labels[L:])))


# --- file formats -----------------------------------------------------------

def write_features(path, feats):
    """Header ``"K T"`` padded to 16 ASCII bytes, then the K x T matrix as little-endian float32."""
    feats = np.asarray(feats, dtype=np.float32)
    T, K = feats.shape
    header = f"{K} {T}".encode("ascii").ljust(FEATURE_HEADER_BYTES)
    if len(header) > FEATURE_HEADER_BYTES:
        raise DataError("feature matrix too large for the header")
    Path(path).write_bytes(header + np.ascontiguousarray(feats.T).astype("<f4").tobytes())


def read_features(path) -> np.ndarray:
    """Return a T x K matrix from the binary format or a whitespace text matrix (K rows)."""
    raw = Path(path).read_bytes()
    head = raw[:FEATURE_HEADER_BYTES].split()
    if len(head) == 2 and all(h.isdigit() for h in head):
        K, T = int(head[0]), int(head[1])
        if len(raw) == FEATURE_HEADER_BYTES + 4 * K * T:
            arr = np.frombuffer(raw, dtype="<f4", offset=FEATURE_HEADER_BYTES).reshape(K, T)
            return arr.T.copy()
    try:
        mat = np.loadtxt(path, dtype=np.float32, ndmin=2)
    except ValueError as exc:
        raise DataError(f"{path}: unreadable feature file ({exc})") from None
    return mat.T.copy()


def read_labels(path, vocab: ActionVocabulary) -> np.ndarray:
    ids = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        name = line.strip()
        if not name:
            continue
        try:
            ids.append(vocab.index(name))
        except KeyError:
            raise DataError(f"{path}:{lineno}: unknown label {name!r}") from None
    return np.array(ids, dtype=np.int64)


def write_labels(path, labels, vocab: ActionVocabulary):
    Path(path).write_text("".join(vocab.names[int(c)] + "\n" for c in labels))


def _reconcile(name, labels, feats, stride):
    if abs(len(labels) - len(feats)) > stride:
        raise DataError(f"{name}: {len(labels)} labels vs {len(feats)} feature frames")
    n = min(len(labels), len(feats))
    return labels[:n][::stride], feats[:n][::stride]


def load_video(video_id, label_path, feature_path, vocab, stride=1, split=""):
    labels = read_labels(label_path, vocab)
    feats = read_features(feature_path)
    labels, feats = _reconcile(str(label_path), labels, feats, stride)
    return VideoRecord(video_id, labels, feats, split)


def load_breakfast_style(label_dir, feature_dir, mapping_file, stride: int = 1) -> list[VideoRecord]:
    """Load every ``<id>.txt`` label file with its ``<id>.bin`` (or ``<id>.txt``) features."""
    if stride < 1:
        raise DataError("stride must be >= 1")
    vocab = ActionVocabulary.load(mapping_file)
    records = []
    for label_path in sorted(Path(label_dir).glob("*.txt")):
        vid = label_path.stem
        feat = Path(feature_dir) / f"{vid}.bin"
        if not feat.exists():
            feat = Path(feature_dir) / f"{vid}.txt"
        if not feat.exists():
            raise DataError(f"no features for {vid} in {feature_dir}")
        records.append(load_video(vid, label_path, feat, vocab, stride))
    return records


def load_manifest(manifest, mapping_file, stride: int = 1, split: str | None = None):
    """Read ``video_id<TAB>label_path<TAB>feature_path<TAB>split`` lines (paths relative to the manifest)."""
    manifest = Path(manifest)
    vocab = ActionVocabulary.load(mapping_file)
    records = []
    for lineno, line in enumerate(manifest.read_text().splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise DataError(f"{manifest}:{lineno}: expected 4 tab-separated fields")
        vid, lp, fp, sp = parts
        if split is not None and sp != split:
            continue
        records.append(load_video(vid, manifest.parent / lp, manifest.parent / fp, vocab, stride, sp))
    return records


def write_dataset(root, records, vocab: ActionVocabulary):
    """Write labels/, features/, mapping.txt and manifest.tsv under ``root``."""
    root = Path(root)
    (root / "labels").mkdir(parents=True, exist_ok=True)
    (root / "features").mkdir(parents=True, exist_ok=True)
    vocab.save(root / "mapping.txt")
    lines = []
    for v in records:
        write_labels(root / "labels" / f"{v.video_id}.txt", v.frame_labels, vocab)
        write_features(root / "features" / f"{v.video_id}.bin", v.features)
        lines.append(f"{v.video_id}\tlabels/{v.video_id}.txt\tfeatures/{v.video_id}.bin\t{v.split}\n")
    tmp = root / "manifest.tsv.tmp"
    tmp.write_text("".join(lines))
    tmp.replace(root / "manifest.tsv")


def read_multilabel_manifest(path, num_classes: int):
    """``video_id<TAB>space-separated future class ids`` -> (ids, (N, C) binary matrix)."""
    ids, rows = [], []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        vid, _, rest = line.partition("\t")
        row = np.zeros(num_classes, dtype=bool)
        for tok in rest.split():
            c = int(tok)
            if not 0 <= c < num_classes:
                raise DataError(f"{path}:{lineno}: class {c} out of range")
            row[c] = True
        ids.append(vid)
        rows.append(row)
    return ids, np.array(rows).reshape(len(rows), num_classes)


def write_multilabel_manifest(path, ids, sets):
    Path(path).write_text("".join(f"{v}\t{' '.join(str(c) for c in sorted(s))}\n"
                                  for v, s in zip(ids, sets)))


def subsample(v: VideoRecord, stride: int) -> VideoRecord:
    if stride == 1:
        return v
    return VideoRecord(v.video_id, v.frame_labels[::stride], v.features[::stride], v.split, dict(v.meta))
