"""Command line entry point: synth, train, anticipate, eval and plot.

Every artifact starts with ``#`` header lines holding the run configuration, so
a file can always be traced back to the settings that produced it.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from collections import defaultdict
from pathlib import Path

import numpy as np
import torch

from .codec import ActionVocabulary
from .config import ConfigError, RunConfig, load_config, make_config
from .data import DataError, default_grammar, generate_dataset, load_manifest, split_observation, write_dataset
from .evaluate import (
    EvalWindow,
    MetricError,
    _floor,
    class_accuracies,
    diverse_eval,
    frequency_split,
    map_multilabel,
    moc,
    seg_metrics,
)
from .infer import anticipate, to_framewise, video_seed
from .net import DiffAnt, load_checkpoint, save_checkpoint
from .plotting import plot_bars, plot_m_curve, plot_step_curve, plot_timelines
from .schedule import make_schedule
from .train import NumericError, Trainer, steps_per_epoch

log = logging.getLogger("diffant")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


# --- small helpers --------------------------------------------------------------

def atomic_write(path, text: str):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def header(cfg: RunConfig, kind: str) -> str:
    return f"# diffant {kind}\n# config: {cfg.echo()}\n"


def config_from_flat(flat: dict, overrides=()) -> RunConfig:
    profile = flat.get("data.profile", "breakfast")
    for o in overrides:
        key, _, value = o.partition("=")
        if key.strip() == "data.profile":
            profile = value.strip()
    lines = [f"{k}={v}" for k, v in flat.items() if k != "data.profile"]
    return make_config(profile, lines + list(overrides))


def resolve_config(args, base: RunConfig | None = None) -> RunConfig:
    overrides = list(args.set or [])
    if args.seed is not None:
        overrides += [f"train.seed={args.seed}", f"infer.seed={args.seed}", f"data.data_seed={args.seed}"]
    if base is not None:
        if args.profile:
            overrides.insert(0, f"data.profile={args.profile}")
        return config_from_flat(base.flat(), overrides)
    if args.config:
        if args.profile:
            overrides.insert(0, f"data.profile={args.profile}")
        return load_config(args.config, overrides)
    return make_config(args.profile or "synthetic", overrides)


def schedule_of(cfg: RunConfig):
    s = cfg.schedule
    return make_schedule(s.S, s.kind, s.beta_min, s.beta_max)


def read_vocab(data_dir) -> ActionVocabulary:
    return ActionVocabulary.load(Path(data_dir) / "mapping.txt")


def load_split(cfg: RunConfig, data_dir, split: str):
    data_dir = Path(data_dir)
    manifest = data_dir / "manifest.tsv"
    if not manifest.exists():
        raise DataError(f"{manifest} not found")
    videos = load_manifest(manifest, data_dir / "mapping.txt", cfg.data.stride, split)
    if not videos:
        raise DataError(f"no videos with split {split!r} in {manifest}")
    return videos


def parse_floats(text: str):
    return [float(x) for x in text.split(",") if x.strip()]


def parse_ints(text: str):
    return [int(x) for x in text.split(",") if x.strip()]


# --- synth ----------------------------------------------------------------------

def cmd_synth(args) -> int:
    cfg = resolve_config(args)
    d = cfg.data
    grammar = default_grammar(d.ambiguity, d.grammar_seed, feature_dim=cfg.model.input_dim)
    if grammar.vocab.C != cfg.model.num_classes:
        raise ConfigError("model.num_classes", f"synthetic grammar has {grammar.vocab.C} classes")
    train = generate_dataset(grammar, d.n_train, d.data_seed, "train")
    test = generate_dataset(grammar, d.n_test, d.data_seed + 1, "test")
    out = Path(args.out)
    write_dataset(out, train + test, grammar.vocab)
    atomic_write(out / "config.txt", header(cfg, "config") + cfg.dumps())
    print(f"wrote {len(train)} train / {len(test)} test videos to {out}")
    return EXIT_OK


# --- train ----------------------------------------------------------------------

def cmd_train(args) -> int:
    data_dir = Path(args.data)
    if args.config is None and (data_dir / "config.txt").exists() and not args.profile:
        args.config = str(data_dir / "config.txt")
    cfg = resolve_config(args)
    if args.epochs is not None:
        cfg = config_from_flat(cfg.flat(), [f"train.epochs={args.epochs}"])
    videos = load_split(cfg, data_dir, "train")
    vocab = read_vocab(data_dir)
    if vocab.C != cfg.model.num_classes:
        raise ConfigError("model.num_classes", f"data has {vocab.C} classes")
    torch.manual_seed(cfg.train.seed)
    model = DiffAnt(cfg.model)
    trainer = Trainer(model, schedule_of(cfg), cfg.train, beta0=cfg.schedule.beta0,
                      steps_per_epoch=steps_per_epoch(len(videos), cfg.train.batch_size))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "train_log.tsv"
    tmp = log_path.with_name(log_path.name + ".tmp")
    with open(tmp, "w") as fh:
        fh.write(header(cfg, "training log"))
        fh.write("# epoch\tstep\tl_emb\tl_pred_class\tl_pred_dur\tl_seg\tl_smooth\ttotal\n")
        history = trainer.fit(videos, fh)
    tmp.replace(log_path)
    save_checkpoint(model, out / "model.ckpt", cfg.flat())
    atomic_write(out / "config.txt", header(cfg, "config") + cfg.dumps())
    print(f"trained {cfg.train.epochs} epochs, final loss {history[-1].total:.4f}; checkpoint {out / 'model.ckpt'}")
    return EXIT_OK


# --- anticipate -----------------------------------------------------------------

def cmd_anticipate(args) -> int:
    model, echo = load_checkpoint(args.ckpt)
    cfg = resolve_config(args, config_from_flat(echo))
    mode = args.mode or cfg.infer.mode
    steps = args.steps or cfg.infer.num_steps
    m = args.samples or cfg.infer.samples
    noise = args.noise or cfg.infer.noise
    cfg = config_from_flat(cfg.flat(), [f"infer.mode={mode}", f"infer.num_steps={steps}",
                                        f"infer.samples={m}", f"infer.noise={noise}"])
    alphas = parse_floats(args.alpha) if args.alpha else [cfg.data.eval_alpha]
    videos = load_split(cfg, args.data, args.split)
    vocab = read_vocab(args.data)
    sched = schedule_of(cfg)
    eos = cfg.model.num_classes - 1
    head = header(cfg, "predictions")
    frames_out, segs_out, inter_out, obs_out = [head], [head], [head], [head]
    multilabel = cfg.model.multilabel
    if multilabel:
        frames_out.append("# kind: scores\n")
    for v in videos:
        for alpha in alphas:
            o = split_observation(v, alpha, cfg.model.num_queries, eos)
            feats = torch.as_tensor(o.features, dtype=model.dtype)
            with torch.no_grad():
                enc = model.encode(feats)
            observed = enc.frame_logits[0].argmax(-1).numpy()
            obs_out.append(f"{v.video_id}\t0\t{alpha}\t{' '.join(map(str, observed.tolist()))}\n")
            results = anticipate(model, sched, o.features, mode, steps, m, o.horizon_frames,
                                 args.keep_intermediate, video_seed(cfg.infer.seed, f"{v.video_id}@{alpha}"),
                                 enc=enc, noise=noise)
            for r in results:
                key = f"{v.video_id}\t{r.sample_id}\t{alpha}"
                if multilabel:
                    frames_out.append(f"{key}\t{' '.join(f'{x:.6f}' for x in r.scores)}\n")
                    continue
                frames_out.append(f"{key}\t{' '.join(map(str, r.frame_labels.tolist()))}\n")
                pairs = " ".join(f"{vocab.names[c]}:{d:.6f}" for c, d in zip(r.actions.classes, r.actions.durations))
                segs_out.append(f"{key}\t{pairs}\n")
                for s in sorted(r.intermediate, reverse=True):
                    for kind, table in (("z0", r.intermediate), ("zs", r.intermediate_latent)):
                        seq = table[s]
                        fr = frames_or_empty(seq, o.horizon_frames)
                        inter_out.append(f"{key}\t{s}\t{kind}\t{fr}\n")
    out = Path(args.out)
    atomic_write(out, "".join(frames_out))
    atomic_write(out.with_suffix(".observed.tsv"), "".join(obs_out))
    if not multilabel:
        atomic_write(out.with_suffix(".segments.tsv"), "".join(segs_out))
    if args.keep_intermediate and not multilabel:
        atomic_write(out.with_suffix(".intermediate.tsv"), "".join(inter_out))
    print(f"wrote {len(frames_out) - 1 - int(multilabel)} prediction records to {out}")
    return EXIT_OK


def frames_or_empty(seq, H) -> str:
    """Frame labels of an intermediate decode; '-' when it decoded to nothing."""
    if len(seq) == 0:
        return "-"
    return " ".join(map(str, to_framewise(seq, H).tolist()))


# --- eval -----------------------------------------------------------------------

def read_dump(path):
    """(records {(video, alpha): {sample: array}}, is_scores)."""
    recs: dict = defaultdict(dict)
    scores = False
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path} not found")
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if line.startswith("#"):
            scores |= line.strip() == "# kind: scores"
            continue
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise DataError(f"{path}:{lineno}: expected 4 tab-separated fields")
        vid, sid, alpha, body = parts
        arr = np.array(body.split(), dtype=np.float64 if scores else np.int64)
        recs[(vid, float(alpha))][int(sid)] = arr
    return recs, scores


def read_intermediate(path):
    """{(kind, step): {(video, alpha): {sample: frames or None}}}."""
    out: dict = defaultdict(lambda: defaultdict(dict))
    for line in Path(path).read_text().splitlines():
        if line.startswith("#") or not line.strip():
            continue
        vid, sid, alpha, step, kind, body = line.split("\t")
        frames = None if body == "-" else np.array(body.split(), dtype=np.int64)
        out[(kind, int(step))][(vid, float(alpha))][int(sid)] = frames
    return out


def _fmt(x) -> str:
    return "nan" if x != x else f"{x:.6f}"


def frame_accuracy(pred, gt, window) -> float:
    """Fraction of correctly predicted window frames pooled over videos."""
    right = total = 0
    for vid, g in gt.items():
        start, stop = window.span(len(g))
        p = pred[vid][: stop - start]
        right += int(np.sum(p == g[start:stop]))
        total += stop - start
    return right / total


def cmd_eval(args) -> int:
    recs, is_scores = read_dump(args.pred)
    cfg_line = next((ln for ln in Path(args.pred).read_text().splitlines() if ln.startswith("# config: ")), None)
    if cfg_line is None:
        raise DataError(f"{args.pred}: missing config header")
    flat = dict(kv.split("=", 1) for kv in cfg_line[len("# config: "):].split(";"))
    cfg = resolve_config(args, config_from_flat(flat))
    alpha = args.alpha if args.alpha is not None else cfg.data.eval_alpha
    beta = args.beta if args.beta is not None else cfg.data.eval_beta
    try:
        window = EvalWindow(alpha, beta)
    except ValueError as exc:
        raise ConfigError("data.eval_alpha", str(exc)) from None
    videos = load_split(cfg, args.data, args.split)
    vocab = read_vocab(args.data)
    gt = {v.video_id: v.frame_labels for v in videos}
    samples = {vid: [s[k] for k in sorted(s)] for (vid, a), s in recs.items() if abs(a - alpha) < 1e-9}
    missing = sorted(set(gt) - set(samples))
    if missing:
        raise MetricError(f"no predictions at alpha={alpha} for {missing[:5]}")

    sections: list[tuple[str, list]] = [("run", [("alpha", alpha), ("beta", beta), ("protocol", args.protocol),
                                                 ("videos", len(gt)), ("split", args.split)])]
    table, csv_rows, csv_head = [], [], []
    protocol = args.protocol
    if protocol == "map":
        if not is_scores:
            raise DataError("map protocol needs a multi-label score dump")
        C = cfg.model.num_classes
        S = np.stack([samples[v][0] for v in sorted(gt)])
        Y = np.zeros((len(gt), C), dtype=bool)
        for i, vid in enumerate(sorted(gt)):
            g = gt[vid]
            Y[i, np.unique(g[window.observed(len(g)):])] = True
        train = load_split(cfg, args.data, "train")
        counts = np.zeros(C)
        for v in train:
            counts[np.unique(v.frame_labels)] += 1
        all_, freq, rare = map_multilabel(S, Y, frequency_split(counts))
        sections.append(("map", [("all", _fmt(all_)), ("freq", _fmt(freq)), ("rare", _fmt(rare))]))
        table = [("mAP all", all_), ("mAP freq", freq), ("mAP rare", rare)]
        csv_head, csv_rows = ["split", "map"], [["all", _fmt(all_)], ["freq", _fmt(freq)], ["rare", _fmt(rare)]]
    elif protocol == "moc":
        first = {v: s[0] for v, s in samples.items()}
        value = moc(first, gt, window)
        per = class_accuracies(first, gt, window)
        sections.append(("moc", [("value", _fmt(value))]))
        sections.append(("per_class", [(vocab.names[c], _fmt(a)) for c, a in per.items()]))
        table = [("MoC", value)] + [(f"  {vocab.names[c]}", a) for c, a in per.items()]
        csv_head = ["class", "accuracy"]
        csv_rows = [[vocab.names[c], _fmt(a)] for c, a in per.items()]
    elif protocol in ("div-avg", "div-top1"):
        ms = parse_ints(args.m) if args.m else [min(len(s) for s in samples.values())]
        kind = "averaged" if protocol == "div-avg" else "top1"
        rows = [(m, diverse_eval(samples, gt, window, kind, m)) for m in ms]
        sections.append((f"diversity_{kind}", [(f"m{m}", _fmt(v)) for m, v in rows]))
        table = [(f"{kind} MoC, m={m}", v) for m, v in rows]
        csv_head, csv_rows = ["m", "moc"], [[m, _fmt(v)] for m, v in rows]
    else:
        raise ConfigError("--protocol", f"unknown protocol {protocol!r}")

    observed = Path(args.pred).with_suffix(".observed.tsv")
    if observed.exists() and not is_scores:
        orecs, _ = read_dump(observed)
        acc, edit, f1 = [], [], []
        for vid, g in gt.items():
            p = orecs.get((vid, alpha), {}).get(0)
            if p is None:
                continue
            a, e, f = seg_metrics(p, g[: len(p)])
            acc.append(a), edit.append(e), f1.append(f)
        if acc:
            f1m = np.mean(f1, axis=0)
            sections.append(("segmentation", [("acc", _fmt(np.mean(acc))), ("edit", _fmt(np.mean(edit))),
                                              ("f1_10", _fmt(f1m[0])), ("f1_25", _fmt(f1m[1])),
                                              ("f1_50", _fmt(f1m[2]))]))

    inter = Path(args.pred).with_suffix(".intermediate.tsv")
    if inter.exists() and not is_scores:
        step_rows = []
        by_step = read_intermediate(inter)
        for (kind, step) in sorted(by_step, key=lambda k: (k[0], -k[1])):
            table_k = by_step[(kind, step)]
            preds = {}
            for (vid, a), sm in table_k.items():
                if abs(a - alpha) < 1e-9 and vid in gt:
                    f = sm[min(sm)]
                    start, stop = window.span(len(gt[vid]))
                    preds[vid] = f if f is not None else np.full(stop - start, -1)
            if set(preds) == set(gt):
                step_rows.append((kind, step, moc(preds, gt, window), frame_accuracy(preds, gt, window)))
        body = "".join(f"{k},{s},{_fmt(m_)},{_fmt(fa)}\n" for k, s, m_, fa in step_rows)
        atomic_write(Path(args.out).with_suffix(".steps.csv"), "kind,step,moc,frame_acc\n" + body)
        if step_rows:
            series = {}
            for kind in sorted({r[0] for r in step_rows}):
                sel = [r for r in step_rows if r[0] == kind]
                series[STEP_SERIES.get(kind, kind)] = [r[3] for r in sel]
            steps = [r[1] for r in step_rows if r[0] == step_rows[0][0]]
            plot_step_curve(steps, series, Path(args.out).with_suffix(".steps.fig.png"), ylabel="frame_acc")

    report = header(cfg, "metric report")
    for name, items in sections:
        report += f"[{name}]\n" + "".join(f"{k}={v}\n" for k, v in items)
    out = Path(args.out)
    atomic_write(out, report)
    width = max(len(k) for k, _ in table)
    human = "".join(f"{k.ljust(width)}  {100 * v:7.2f}\n" for k, v in table)
    atomic_write(out.with_suffix(".table.txt"), header(cfg, "metric table") + human)
    atomic_write(out.with_suffix(".csv"), ",".join(csv_head) + "\n"
                 + "".join(",".join(map(str, r)) + "\n" for r in csv_rows))
    fig = out.with_suffix(".fig.png")
    if protocol == "map":
        plot_bars(["all", "freq", "rare"], [all_, freq, rare], fig, ylabel="mAP")
    elif protocol == "moc":
        plot_bars([vocab.names[c] for c in per], list(per.values()), fig, ylabel="accuracy",
                  title=f"MoC {value:.3f}")
    else:
        plot_m_curve([m for m, _ in rows], [v for _, v in rows], fig, ylabel=f"{kind} MoC")
    print(human, end="")
    return EXIT_OK


STEP_SERIES = {"z0": "decoded z0 estimate", "zs": "decoded latent"}


# --- plot -----------------------------------------------------------------------

def cmd_plot(args) -> int:
    if args.kind == "steps":
        path = Path(args.csv)
        if not path.exists():
            raise DataError(f"{path} not found")
        rows = [ln.split(",") for ln in path.read_text().splitlines()[1:] if ln.strip()]
        kinds = sorted({r[0] for r in rows})
        series, steps = {}, None
        for k in kinds:
            sel = sorted((int(r[1]) for r in rows if r[0] == k), reverse=True)
            vals = {int(r[1]): float(r[3] if args.metric == "frame_acc" else r[2]) for r in rows if r[0] == k}
            steps = sel
            series[STEP_SERIES.get(k, k)] = [vals[s] for s in sel]
        plot_step_curve(steps, series, args.out, ylabel=args.metric)
    else:
        recs, _ = read_dump(args.pred)
        keys = sorted(k for k in recs if k[0] == args.video)
        if not keys:
            raise DataError(f"no predictions for video {args.video}")
        key = keys[0]
        cfg_line = next(ln for ln in Path(args.pred).read_text().splitlines() if ln.startswith("# config: "))
        flat = dict(kv.split("=", 1) for kv in cfg_line[len("# config: "):].split(";"))
        cfg = config_from_flat(flat)
        vocab = read_vocab(args.data)
        videos = {v.video_id: v for v in load_split(cfg, args.data, args.split)}
        if args.video not in videos:
            raise DataError(f"video {args.video} not in split {args.split}")
        g = videos[args.video].frame_labels
        L = _floor(key[1] * len(g))
        rows = [("ground truth", g[L:])]
        for sid in sorted(recs[key])[: args.rows]:
            rows.append((f"sample {sid}", recs[key][sid][: len(g) - L]))
        plot_timelines(rows, args.out, vocab.C, list(vocab.names), title=f"{args.video}, alpha={key[1]}")
    print(f"wrote {args.out}")
    return EXIT_OK


# --- argument parsing -------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value config file")
    common.add_argument("--profile", help="dataset profile (breakfast, salads50, epic, egtea, synthetic, ...)")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    common.add_argument("--seed", type=int, help="seed for data generation, training and sampling")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="diffant", description="Diffusion-based long-term action anticipation.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", parents=[common], help="train a model")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True, help="run directory")
    t.add_argument("--epochs", type=int)
    t.set_defaults(func=cmd_train)

    a = sub.add_parser("anticipate", parents=[common], help="write a prediction dump")
    a.add_argument("--ckpt", required=True)
    a.add_argument("--data", required=True)
    a.add_argument("--split", default="test")
    a.add_argument("--out", required=True)
    a.add_argument("--mode", choices=["deterministic", "stochastic"])
    a.add_argument("--steps", type=int)
    a.add_argument("--samples", type=int)
    a.add_argument("--noise", choices=["shared", "fresh"], help="stochastic re-noising: one draw per sample or per step")
    a.add_argument("--alpha", help="comma-separated observation fractions")
    a.add_argument("--keep-intermediate", action="store_true")
    a.set_defaults(func=cmd_anticipate)

    e = sub.add_parser("eval", parents=[common], help="score a prediction dump")
    e.add_argument("--pred", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--out", required=True, help="report path (.txt); .csv and .table.txt are written alongside")
    e.add_argument("--alpha", type=float)
    e.add_argument("--beta", type=float)
    e.add_argument("--protocol", default="moc", choices=["moc", "map", "div-avg", "div-top1"])
    e.add_argument("--m", help="comma-separated sample counts for the diversity protocols")
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("plot", parents=[common], help="render figures")
    g.add_argument("kind", choices=["steps", "timeline"])
    g.add_argument("--out", required=True)
    g.add_argument("--csv", help="steps CSV written by eval (steps)")
    g.add_argument("--metric", default="frame_acc", choices=["moc", "frame_acc"])
    g.add_argument("--pred", help="prediction dump (timeline)")
    g.add_argument("--data", help="dataset directory (timeline)")
    g.add_argument("--split", default="test")
    g.add_argument("--video", help="video id (timeline)")
    g.add_argument("--rows", type=int, default=5, help="number of samples to draw (timeline)")
    g.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    threads = os.environ.get("DIFFANT_THREADS")
    if threads:
        torch.set_num_threads(max(1, int(threads)))
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, MetricError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
