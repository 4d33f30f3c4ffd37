"""
Command line entry point.

    vgs synth             build a synthetic bilingual corpus
    vgs train             train one monolingual model
    vgs eval              speech->image retrieval metrics
    vgs analyze           attention peak statistics
    vgs export-attention  per-utterance attention weights and peaks
    vgs xlingual          image-pivot speech->speech retrieval between two models

Settings come from an optional ``--config`` JSON file (sections ``model``,
``train``, ``peaks``, ``synth``, ``xlingual``, ``paths`` plus top-level ``seed`` and
``threads``); flags override the file. The merged settings are written to
``resolved_config.json`` in the output directory, and passing that file back
with ``--config`` reproduces the run.

Exit codes: 0 success, 1 validation error, 2 runtime or numerical error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import analysis as A
from . import data as D
from . import model as M
from . import retrieval as R
from . import train as T
from .numcore import make_rng

log = logging.getLogger("vgs")

RESOLVED = "resolved_config.json"


class ValidationError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Config resolution
# ---------------------------------------------------------------------------

def _load_config(path) -> dict:
    if not path:
        return {}
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ValidationError(f"cannot read config {path}: {e}") from None


def _section(cfg: dict, name: str) -> dict:
    return dict(cfg.get(name) or {})


def _set(d: dict, key: str, value) -> None:
    if value is not None:
        d[key] = value


def _int_list(s: str) -> list[int]:
    return [int(x) for x in s.split(",") if x.strip()]


def resolve(args, cfg: dict) -> dict:
    """Merge config file and flags into the fully resolved run configuration."""
    out = {"command": args.command,
           "seed": int(args.seed if args.seed is not None else cfg.get("seed", 0)),
           "threads": int(args.threads if args.threads is not None else cfg.get("threads", 1))}
    paths = _section(cfg, "paths")
    for key in ("out", "spec", "manifest", "val_manifest", "train_manifest", "checkpoint", "resume", "glosses",
                "src_checkpoint", "tgt_checkpoint", "src_manifest", "tgt_manifest", "pivot_manifest",
                "src_train_manifest", "tgt_train_manifest"):
        v = getattr(args, key, None)
        if v is not None:
            paths[key] = str(v)
    for key in ("half", "src_half", "tgt_half"):
        _set(paths, key, getattr(args, key, None))
    out["paths"] = paths
    if out["threads"] < 1:
        raise ValidationError("--threads must be >= 1")
    if "out" not in paths:
        raise ValidationError("an output directory is required (--out)")

    if args.command == "synth":
        spec = _section(cfg, "synth")
        if paths.get("spec"):
            spec.update(_load_config(paths["spec"]))
        spec["seed"] = out["seed"]
        out["synth"] = spec
    if args.command == "train":
        model = _section(cfg, "model")
        for key in ("image_dim", "embed_dim", "mfcc_dim", "conv_kernel", "conv_stride", "conv_channels",
                    "conv_activation", "gru_layers", "gru_hidden", "attention_dim", "combiner", "margin",
                    "frame_hop_ms"):
            _set(model, key, getattr(args, key, None))
        if getattr(args, "attention_layers", None):
            model["attention_after_layers"] = _int_list(args.attention_layers)
        out["model"] = model
        tr = _section(cfg, "train")
        for key in ("epochs", "batch_size", "learning_rate", "grad_clip_norm", "checkpoint_every"):
            _set(tr, key, getattr(args, key, None))
        tr["seed"] = out["seed"]
        out["train"] = tr
    if args.command in ("analyze", "export-attention"):
        pk = _section(cfg, "peaks")
        for key in ("rel_threshold", "min_separation", "layer"):
            _set(pk, key, getattr(args, key, None))
        out["peaks"] = pk
    if args.command == "xlingual":
        x = {"trials": 10, "pool": 1000, "pivots": 500, "aggregator": "min", "names": ["src", "tgt"],
             "dump_matrices": False}
        x.update(_section(cfg, "xlingual"))
        _set(x, "trials", args.trials)
        _set(x, "pool", args.pool)
        _set(x, "pivots", args.pivots)
        _set(x, "aggregator", args.aggregator)
        if args.names:
            x["names"] = args.names.split(",")
        if args.dump_matrices:
            x["dump_matrices"] = True
        out["xlingual"] = x
    return out


def _need(paths: dict, key: str) -> Path:
    if not paths.get(key):
        raise ValidationError(f"--{key.replace('_', '-')} is required")
    return Path(paths[key])


def _prepare_out(rc: dict) -> Path:
    out = Path(rc["paths"]["out"])
    out.mkdir(parents=True, exist_ok=True)
    (out / RESOLVED).write_text(json.dumps(rc, indent=1, sort_keys=True) + "\n")
    return out


def _manifest(path, frame_hop_ms=10.0, half=None) -> D.Manifest:
    m = D.load_manifest(path, frame_hop_ms)
    return D.split_half(m, half) if half else m


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_synth(rc: dict) -> None:
    try:
        spec = D.SynthSpec.from_dict(rc["synth"])
    except TypeError as e:
        raise ValidationError(f"invalid synth spec: {e}") from None
    rc["synth"] = spec.to_dict()
    out = _prepare_out(rc)
    manifests = D.generate_synthetic(spec, out)
    for lang, splits in manifests.items():
        log.info("%s: %s", lang, {s: len(m) for s, m in splits.items()})


def cmd_train(rc: dict) -> None:
    paths = rc["paths"]
    tcfg = T.TrainConfig.from_dict(rc["train"])
    if paths.get("resume"):
        params, mcfg, state, start = T.load_training_checkpoint(paths["resume"])
        rc["model"] = mcfg.to_dict()
    else:
        mcfg = None
        state, start = None, 0
    frame_hop = (rc["model"].get("frame_hop_ms") or 10.0)
    manifest = _manifest(_need(paths, "manifest"), frame_hop, paths.get("half"))
    data = D.load_pairs(manifest)
    if len(data) < 2:
        raise ValidationError(f"manifest {paths['manifest']} has fewer than 2 captions")
    if mcfg is None:
        model = dict(rc["model"])
        model.setdefault("image_dim", int(data.image_feats.shape[1]))
        model.setdefault("mfcc_dim", int(data.feats[0].shape[1]))
        mcfg = M.ModelConfig.from_dict(model)
        rc["model"] = mcfg.to_dict()
        params = M.init_params(mcfg, rc["seed"])
    if data.image_feats.shape[1] != mcfg.image_dim or data.feats[0].shape[1] != mcfg.mfcc_dim:
        raise ValidationError(f"data dims (image {data.image_feats.shape[1]}, mfcc {data.feats[0].shape[1]}) "
                              f"do not match model config (image {mcfg.image_dim}, mfcc {mcfg.mfcc_dim})")
    val = D.load_pairs(_manifest(paths["val_manifest"], frame_hop)) if paths.get("val_manifest") else None
    out = _prepare_out(rc)
    if not paths.get("resume"):
        (out / T.TRAINLOG_NAME).write_text("")
    T.train(params, mcfg, data, tcfg, val=val, out_dir=out, state=state, start_epoch=start,
            threads=rc["threads"])


def _encode_manifest(params, mcfg, manifest: D.Manifest, threads: int):
    data = D.load_pairs(manifest)
    pool = manifest.image_ids()
    img = M.encode_images(manifest.image_features(pool), params)
    utts = np.stack([u.vector for u in M.encode_utterances(data.feats, params, mcfg, threads=threads)])
    return data, pool, img, utts


def cmd_eval(rc: dict) -> None:
    paths = rc["paths"]
    params, mcfg, _ = M.load_checkpoint(_need(paths, "checkpoint"))
    manifest = _manifest(_need(paths, "manifest"), mcfg.frame_hop_ms, paths.get("half"))
    data, pool, img, utts = _encode_manifest(params, mcfg, manifest, rc["threads"])
    res = R.rank_images(utts, img, R.gold_indices(data.image_ids, pool), threads=rc["threads"])
    out = _prepare_out(rc)
    R.write_metrics(out, {"speech->image": res.metrics()})
    log.info("R@1 %.3f R@5 %.3f R@10 %.3f median rank %.1f (pool %d)", res.r1, res.r5, res.r10,
             res.median_rank, res.pool_size)


def cmd_analyze(rc: dict) -> None:
    paths = rc["paths"]
    params, mcfg, _ = M.load_checkpoint(_need(paths, "checkpoint"))
    manifest = _manifest(_need(paths, "manifest"), mcfg.frame_hop_ms)
    train_tokens = None
    if paths.get("train_manifest"):
        train_tokens = [r.tokens for r in _manifest(paths["train_manifest"], mcfg.frame_hop_ms).records]
    glosses = _load_config(paths.get("glosses")) if paths.get("glosses") else None
    res = A.analyze(params, mcfg, manifest, A.PeakConfig(**rc["peaks"]), rc["seed"], train_tokens,
                    rc["threads"])
    out = _prepare_out(rc)
    A.write_reports(res, out, glosses)
    log.info("NOUN under peaks %.1f%% vs baseline %.1f%%", res.observed.percentages["NOUN"],
             res.baseline.percentages["NOUN"])


def cmd_export_attention(rc: dict) -> None:
    paths = rc["paths"]
    params, mcfg, _ = M.load_checkpoint(_need(paths, "checkpoint"))
    manifest = _manifest(_need(paths, "manifest"), mcfg.frame_hop_ms)
    utts = A.attention_peaks(params, mcfg, manifest, A.PeakConfig(**rc["peaks"]), rc["threads"])
    out = _prepare_out(rc)
    A.write_attention_export(utts, out / "attention.json")


def cmd_xlingual(rc: dict) -> None:
    paths, x = rc["paths"], rc["xlingual"]
    names = x["names"]
    if len(names) != 2:
        raise ValidationError("--names takes exactly two comma-separated labels")
    sp, scfg, _ = M.load_checkpoint(_need(paths, "src_checkpoint"))
    tp, tcfg, _ = M.load_checkpoint(_need(paths, "tgt_checkpoint"))
    src_m = _manifest(_need(paths, "src_manifest"), scfg.frame_hop_ms)
    tgt_m = _manifest(_need(paths, "tgt_manifest"), tcfg.frame_hop_ms)
    pivot_m = _manifest(_need(paths, "pivot_manifest"), scfg.frame_hop_ms)
    pivot_ids = pivot_m.image_ids()
    if int(x["pivots"]) < 1:
        raise ValidationError("--pivots must be >= 1")
    if len(pivot_ids) > int(x["pivots"]):
        keep = np.sort(make_rng(rc["seed"], "pivots").choice(len(pivot_ids), size=int(x["pivots"]), replace=False))
        pivot_ids = [pivot_ids[k] for k in keep]
    log.info("%d pivot images", len(pivot_ids))
    seen = []
    for key, half_key in (("src_train_manifest", "src_half"), ("tgt_train_manifest", "tgt_half")):
        if paths.get(key):
            seen.append(_manifest(paths[key], 10.0, paths.get(half_key)).image_ids())
    R.check_pivots_unseen(pivot_ids, *seen)
    overlap = set(pivot_ids) & (set(src_m.image_ids()) | set(tgt_m.image_ids()))
    if overlap:
        raise ValidationError(f"{len(overlap)} pivot images also appear in the evaluation captions")
    pivot_feats = pivot_m.image_features(pivot_ids)
    threads = rc["threads"]
    src_data = D.load_pairs(src_m)
    tgt_data = D.load_pairs(tgt_m)
    src_u = np.stack([u.vector for u in M.encode_utterances(src_data.feats, sp, scfg, threads=threads)])
    tgt_u = np.stack([u.vector for u in M.encode_utterances(tgt_data.feats, tp, tcfg, threads=threads)])
    index = R.PivotIndex.build(pivot_ids, src_u, M.encode_images(pivot_feats, sp),
                               tgt_u, M.encode_images(pivot_feats, tp))
    out = _prepare_out(rc)
    rows = {}
    for direction, idx, a_ids, b_ids in ((f"{names[0]}->{names[1]}", index, src_data.image_ids, tgt_data.image_ids),
                                         (f"{names[1]}->{names[0]}", index.swapped(), tgt_data.image_ids,
                                          src_data.image_ids)):
        dump = out / "matrices" / direction.replace(">", "") if x["dump_matrices"] else None
        res = R.subsample_eval(idx, a_ids, b_ids, n_trials=int(x["trials"]), pool=int(x["pool"]),
                               seed=rc["seed"], aggregator=x["aggregator"], dump_dir=dump, threads=threads)
        rows[direction] = res.metrics()
        log.info("%s: R@1 %.3f R@5 %.3f R@10 %.3f median rank %.2f (pool %d, chance %.1f)", direction,
                 res.r1, res.r5, res.r10, res.median_rank, res.pool_size, (res.pool_size + 1) / 2)
    R.write_metrics(out, rows)


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "analyze": cmd_analyze,
            "export-attention": cmd_export_attention, "xlingual": cmd_xlingual}


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    """Usage errors are validation errors: exit 1, not argparse's default 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="vgs", description="Visually grounded speech: training and attention analysis")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON config file (flags override it)")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--threads", type=int, help="worker threads; 1 = serial, bit-reproducible")
        sp.add_argument("-v", "--verbose", action="store_true")
        return sp

    s = common(sub.add_parser("synth", help="generate a synthetic bilingual corpus"))
    s.add_argument("--spec", help="synthetic corpus spec (JSON)")

    s = common(sub.add_parser("train", help="train a monolingual model"))
    s.add_argument("--manifest", help="training manifest (.jsonl)")
    s.add_argument("--val-manifest")
    s.add_argument("--half", choices=["first", "second"], help="train on one half of the manifest's images")
    s.add_argument("--resume", help="continue from a training checkpoint")
    for flag, typ in (("image-dim", int), ("embed-dim", int), ("mfcc-dim", int), ("conv-kernel", int),
                      ("conv-stride", int), ("conv-channels", int), ("gru-layers", int), ("gru-hidden", int),
                      ("attention-dim", int), ("margin", float), ("frame-hop-ms", float),
                      ("epochs", int), ("batch-size", int), ("grad-clip-norm", float),
                      ("checkpoint-every", int)):
        s.add_argument(f"--{flag}", type=typ)
    s.add_argument("--learning-rate", "--lr", type=float, dest="learning_rate")
    s.add_argument("--conv-activation", choices=["identity", "relu"])
    s.add_argument("--combiner", choices=sorted(M.COMBINERS))
    s.add_argument("--attention-layers", help="comma-separated GRU layers followed by attention, e.g. 1,5")

    s = common(sub.add_parser("eval", help="speech->image retrieval metrics"))
    s.add_argument("--checkpoint")
    s.add_argument("--manifest")
    s.add_argument("--half", choices=["first", "second"])

    for name, hlp in (("analyze", "attention peak statistics"), ("export-attention", "dump attention weights")):
        s = common(sub.add_parser(name, help=hlp))
        s.add_argument("--checkpoint")
        s.add_argument("--manifest")
        s.add_argument("--rel-threshold", type=float)
        s.add_argument("--min-separation", type=int)
        s.add_argument("--layer", type=int)
        if name == "analyze":
            s.add_argument("--train-manifest", help="training manifest for reference word frequencies")
            s.add_argument("--glosses", help="JSON map word -> gloss for the words table")

    s = common(sub.add_parser("xlingual", help="cross-lingual retrieval through pivot images"))
    for flag in ("src-checkpoint", "tgt-checkpoint", "src-manifest", "tgt-manifest", "pivot-manifest",
                 "src-train-manifest", "tgt-train-manifest"):
        s.add_argument(f"--{flag}")
    s.add_argument("--dump-matrices", action="store_true",
                   help="write each trial's score matrix under <out>/matrices/")
    s.add_argument("--src-half", choices=["first", "second"])
    s.add_argument("--tgt-half", choices=["first", "second"])
    s.add_argument("--trials", type=int)
    s.add_argument("--pool", type=int)
    s.add_argument("--pivots", type=int, help="maximum number of pivot images (seeded sample of the pivot manifest)")
    s.add_argument("--aggregator", choices=sorted(R.AGGREGATORS))
    s.add_argument("--names", help="labels for the two languages, e.g. en,ja")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        rc = resolve(args, _load_config(args.config))
        COMMANDS[args.command](rc)
    except (ValidationError, ValueError, KeyError, TypeError, FileNotFoundError) as e:
        print(f"vgs {args.command}: error: {e}", file=sys.stderr)
        return 1
    except (ArithmeticError, RuntimeError, MemoryError, OSError) as e:
        print(f"vgs {args.command}: runtime error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
