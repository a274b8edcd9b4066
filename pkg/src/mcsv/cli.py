"""Command line entry point: ``mcsv {gen-data,train,evaluate,losscheck,score-stats}``.

Settings resolve as flag > config file > built-in default.  ``MC_SEED``
in the environment replaces every seed.  Exit codes: 0 ok, 1 usage or
invalid configuration, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import os
import sys
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from . import checkpoint as ckpt
from .data import DEFAULT_SNR_RANGES, AugmentPolicy, CorpusError, UtteranceStore, generate_corpus
from .evaluation import EvaluationError, ScoreSet, TrialSet, evaluate, make_trials, score_stats
from .features import WavFormatError
from .losscheck import FAULTS, format_report, run_losscheck
from .losses import LossConfig
from .model import ModelConfig
from .train import TrainConfig, load_network, train

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
TRIALS_NAME = "trials.txt"
SEED_KEYS = (("corpus", "seed"), ("augment", "seed"), ("train", "seed"))

DEFAULTS = {
    "output_dir": "runs/default",
    "corpus": {"dir": "corpus", "speakers": 40, "utterances_per_speaker": 4, "utterance_len": 5.0, "seed": 0},
    "model": {"hidden": 64, "rep_dim": 128, "proj_hidden": 256, "proj_dim": 128, "pooling": "mean", "projector": True},
    "loss": {"variant": "sntxent", "tau": 0.02, "margin": 0.0, "schedule": "cosine", "learnable_margin": False},
    "augment": {
        "enabled": True,
        "noise_snr_db": {k: list(v) for k, v in DEFAULT_SNR_RANGES.items()},
        "reverb_prob": 0.5,
        "seed": 0,
    },
    "optimizer": {"lr": 1e-3, "lr_decay": 0.95, "lr_decay_every": 10},
    "train": {"epochs": 50, "batch_size": 32, "crop_len": 2.0, "seed": 0, "workers": 0, "checkpoint_every": 0},
    "eval": {"num_frames": 6, "frame_len": 2.0, "condition": "clean"},
}

log = logging.getLogger("mcsv")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def load_schema() -> dict:
    return json.loads(resources.files("mcsv").joinpath("config_schema.json").read_text(encoding="utf-8"))


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k != "noise_snr_db":
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def resolve_config(path: str | None, overrides: dict, env=None) -> dict:
    """Defaults, then the JSON file, then flag overrides, then ``MC_SEED``."""
    env = os.environ if env is None else env
    schema = load_schema()
    cfg = copy.deepcopy(DEFAULTS)
    if path:
        try:
            user = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {path}: {exc}") from exc
        try:
            jsonschema.validate(user, schema)
        except jsonschema.ValidationError as exc:
            raise UsageError(f"invalid config {path}: {exc.message}") from exc
        cfg = _merge(cfg, user)
    cfg = _merge(cfg, overrides)
    if env.get("MC_SEED") not in (None, ""):
        try:
            seed = int(env["MC_SEED"])
        except ValueError as exc:
            raise UsageError(f"MC_SEED must be an integer, got {env['MC_SEED']!r}") from exc
        for section, key in SEED_KEYS:
            cfg[section][key] = seed
    try:
        jsonschema.validate(cfg, schema)
    except jsonschema.ValidationError as exc:
        raise UsageError(f"invalid setting {'.'.join(map(str, exc.path))}: {exc.message}") from exc
    return cfg


def build_objects(cfg: dict):
    """Turn a resolved config into validated library objects (raises UsageError)."""
    try:
        model = ModelConfig(n_mels=40, **cfg["model"])
        lc = cfg["loss"]
        loss = LossConfig(lc["variant"], tau=lc["tau"], margin=lc["margin"])
        a = cfg["augment"]
        policy = AugmentPolicy(a["enabled"], a["noise_snr_db"], a["reverb_prob"], a["seed"])
        t, o = cfg["train"], cfg["optimizer"]
        tc = TrainConfig(
            epochs=t["epochs"], batch_size=t["batch_size"], crop_len=t["crop_len"], seed=t["seed"],
            lr=o["lr"], lr_decay=o["lr_decay"], lr_decay_every=o["lr_decay_every"],
            margin_schedule=lc["schedule"], learnable_margin=lc["learnable_margin"], workers=t["workers"],
        )
    except (ValueError, TypeError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from exc
    return model, loss, policy, tc


def git_style_hash(data: bytes) -> str:
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def _set(d: dict, section: str, key: str, value) -> None:
    if value is not None:
        d.setdefault(section, {})[key] = value


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> int:
    over = {}
    _set(over, "corpus", "dir", args.out)
    _set(over, "corpus", "speakers", args.speakers)
    _set(over, "corpus", "utterances_per_speaker", args.utterances)
    _set(over, "corpus", "utterance_len", args.utterance_len)
    _set(over, "corpus", "seed", args.seed)
    cfg = resolve_config(args.config, over)
    c = cfg["corpus"]
    try:
        corpus = generate_corpus(c["dir"], c["speakers"], c["utterances_per_speaker"], c["utterance_len"],
                                 c["seed"], crop_len=cfg["train"]["crop_len"])
    except ValueError as exc:
        if isinstance(exc, CorpusError):
            raise
        raise UsageError(str(exc)) from exc
    trials = make_trials(corpus.manifest, np.random.default_rng(c["seed"]))
    trials.write(Path(c["dir"]) / TRIALS_NAME)
    digest = hashlib.sha256((Path(c["dir"]) / "manifest.csv").read_bytes()).hexdigest()
    print(f"wrote {len(corpus.manifest)} utterances ({c['speakers']} speakers) and {len(trials)} trials to {c['dir']}")
    print(f"manifest sha256 {digest}")
    return EXIT_OK


def cmd_train(args) -> int:
    over = {}
    _set(over, "corpus", "dir", args.corpus)
    if args.out is not None:
        over["output_dir"] = args.out
    _set(over, "loss", "variant", args.loss)
    _set(over, "loss", "margin", args.margin)
    _set(over, "loss", "tau", args.tau)
    _set(over, "loss", "schedule", args.schedule)
    if args.learnable_margin:
        _set(over, "loss", "learnable_margin", True)
    if args.no_augment:
        _set(over, "augment", "enabled", False)
    if args.no_projector:
        _set(over, "model", "projector", False)
    _set(over, "model", "pooling", args.pooling)
    _set(over, "train", "epochs", args.epochs)
    _set(over, "train", "batch_size", args.batch_size)
    _set(over, "train", "seed", args.seed)
    _set(over, "train", "workers", args.workers)
    _set(over, "train", "checkpoint_every", args.checkpoint_every)
    _set(over, "optimizer", "lr", args.lr)
    cfg = resolve_config(args.config, over)
    model, loss, policy, tc = build_objects(cfg)

    run = Path(cfg["output_dir"])
    run.mkdir(parents=True, exist_ok=True)
    snapshot = json.dumps(cfg, indent=2, sort_keys=True).encode("utf-8") + b"\n"
    (run / "config.json").write_bytes(snapshot)
    meta = {
        "config_hash": git_style_hash(snapshot),
        "augmentation_enabled": policy.enabled,
        "projector": model.projector,
        "loss": loss.variant.value,
        "margin": loss.margin,
        "corpus": str(cfg["corpus"]["dir"]),
        "resumed_from": args.resume,
    }
    (run / "run.json").write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")

    store = UtteranceStore.from_corpus(cfg["corpus"]["dir"])
    state = train(store, model, loss, policy, tc, out_dir=run, resume=args.resume,
                  checkpoint_every=cfg["train"]["checkpoint_every"])
    last = state.metrics[-1] if state.metrics else None
    if last:
        print(f"trained {state.epoch} epochs ({state.global_step} steps); final loss {last['loss']:.4f}, "
              f"grad max-norm {last['grad_maxnorm']:.3g}")
    print(f"checkpoint {run / 'checkpoint.mckp'}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    over = {}
    _set(over, "corpus", "dir", args.corpus)
    _set(over, "eval", "condition", args.condition)
    _set(over, "eval", "num_frames", args.num_frames)
    _set(over, "eval", "frame_len", args.frame_len)
    cfg = resolve_config(args.config, over)
    corpus = Path(cfg["corpus"]["dir"])
    trials_path = Path(args.trials) if args.trials else corpus / TRIALS_NAME
    trials = TrialSet.read(trials_path)
    if not trials:
        raise EvaluationError(f"trial list {trials_path} is empty")
    net = load_network(args.checkpoint)
    e = cfg["eval"]
    scores, det, stats = evaluate(net, corpus, trials, e["condition"], e["num_frames"], e["frame_len"])
    out = Path(args.out) if args.out else Path(args.checkpoint).parent / f"eval_{e['condition']}"
    out.mkdir(parents=True, exist_ok=True)
    scores.write_csv(out / "scores.csv")
    stats.write_histogram(out / "histogram.csv")
    report = {
        "condition": e["condition"],
        "trials": len(trials),
        "eer": det.eer,
        "eer_percent": 100 * det.eer,
        "threshold_at_eer": det.threshold_at_eer,
        "min_dcf": det.min_dcf,
        "threshold_at_min_dcf": det.threshold_at_min_dcf,
        "mean_pos": stats.mean_pos,
        "mean_neg": stats.mean_neg,
        "gap": stats.gap,
    }
    (out / "report.json").write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")
    print(f"{e['condition']} trials: {len(trials)}")
    print(f"EER     {100 * det.eer:.2f} %")
    print(f"minDCF  {det.min_dcf:.4f}  (p_target=0.01)")
    print(f"scores  mean_pos {stats.mean_pos:.4f}  mean_neg {stats.mean_neg:.4f}  gap {stats.gap:.4f}")
    print(f"wrote {out / 'scores.csv'}, {out / 'histogram.csv'}, {out / 'report.json'}")
    return EXIT_OK


def cmd_losscheck(args) -> int:
    seed = args.seed
    if os.environ.get("MC_SEED"):
        try:
            seed = int(os.environ["MC_SEED"])
        except ValueError as exc:
            raise UsageError(f"MC_SEED must be an integer, got {os.environ['MC_SEED']!r}") from exc
    try:
        rows = run_losscheck(seed=seed, batches=args.batches, batch_size=args.batch_size, tau=args.tau,
                             fault=args.inject_fault)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    print(format_report(rows))
    failed = [r for r in rows if not r.passed]
    print("all variants pass" if not failed else f"{len(failed)} check(s) FAILED")
    return EXIT_OK if not failed else EXIT_RUNTIME


def cmd_score_stats(args) -> int:
    scores = ScoreSet.read_csv(args.scores)
    stats = score_stats(scores)
    if args.histogram:
        stats.write_histogram(args.histogram)
    print(f"mean_pos {stats.mean_pos:.4f}")
    print(f"mean_neg {stats.mean_neg:.4f}")
    print(f"gap      {stats.gap:.4f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mcsv", description="Contrastive speaker-embedding experiments on synthetic speech.")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="synthesize a speaker corpus and a trial list")
    g.add_argument("--config")
    g.add_argument("--out", help="corpus directory")
    g.add_argument("--speakers", type=int)
    g.add_argument("--utterances", type=int, help="utterances per speaker")
    g.add_argument("--utterance-len", type=float, help="seconds")
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="self-supervised training run")
    t.add_argument("--config")
    t.add_argument("--corpus")
    t.add_argument("--out", help="run directory")
    t.add_argument("--loss", choices=["ntxent", "sntxent", "am", "aam"])
    t.add_argument("--margin", type=float)
    t.add_argument("--tau", type=float)
    t.add_argument("--schedule", choices=["constant", "cosine"])
    t.add_argument("--learnable-margin", action="store_true")
    t.add_argument("--no-augment", action="store_true")
    t.add_argument("--no-projector", action="store_true")
    t.add_argument("--pooling", choices=["mean", "attentive"])
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--seed", type=int)
    t.add_argument("--workers", type=int)
    t.add_argument("--checkpoint-every", type=int)
    t.add_argument("--resume", help="checkpoint to continue from")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="score a trial list with a trained checkpoint")
    e.add_argument("--config")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--corpus")
    e.add_argument("--trials", help=f"trial list (default: <corpus>/{TRIALS_NAME})")
    e.add_argument("--condition", choices=["clean", "noisy"])
    e.add_argument("--num-frames", type=int)
    e.add_argument("--frame-len", type=float)
    e.add_argument("--out", help="directory for scores.csv, histogram.csv, report.json")
    e.set_defaults(func=cmd_evaluate)

    c = sub.add_parser("losscheck", help="gradient and oracle checks for every loss variant")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--batches", type=int, default=20)
    c.add_argument("--batch-size", type=int)
    c.add_argument("--tau", type=float, default=0.02)
    c.add_argument("--inject-fault", choices=sorted(FAULTS))
    c.set_defaults(func=cmd_losscheck)

    s = sub.add_parser("score-stats", help="score distribution summary from a scores CSV")
    s.add_argument("--scores", required=True)
    s.add_argument("--histogram", help="write bin_left,pos_count,neg_count CSV here")
    s.set_defaults(func=cmd_score_stats)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"mcsv: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CorpusError, EvaluationError, ckpt.CheckpointError, WavFormatError, OSError, ValueError) as exc:
        print(f"mcsv: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
