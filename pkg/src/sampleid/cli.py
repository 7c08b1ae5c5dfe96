"""Command line front end: ``sampleid <command> [options]``.

Every command accepts ``--seed``, ``--config`` (a JSON file; the
``SAMPLEID_CONFIG`` environment variable names a default) and ``--threads``.
Values in the config file fill in options that were not given on the command
line: top-level keys apply to all commands, a key named after a command
applies to that command only.  Flags always win.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric divergence.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys

import numpy as np

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4
ENV_CONFIG = "SAMPLEID_CONFIG"
TINY_ENCODER = {"stages": [[8, 1], [16, 1]], "ibn_stages": [0], "stem_channels": 4}
STEMS_MODES = {"n-1": "up_to_N_minus_1", "n": "up_to_N"}

# options that name files or directories; left out of the config hash so that
# reruns in other directories report the same hash
PATH_DESTS = {
    "config", "out", "in_dir", "dataset", "stems", "checkpoint", "candidate_checkpoint", "audio", "audio_dir",
    "index", "queries", "truth", "db", "query", "candidate", "instances_out",
}

log = logging.getLogger("sampleid")


class DataError(Exception):
    """Bad or missing input data; maps to exit code 3."""


class UsageError(Exception):
    """Inconsistent options or config; maps to exit code 2."""


# ----------------------------------------------------------------------------
# helpers


def config_hash(args) -> str:
    settings = {k: v for k, v in vars(args).items() if k not in PATH_DESTS and k != "func"}
    return hashlib.sha256(json.dumps(settings, sort_keys=True, default=str).encode()).hexdigest()[:16]


def _wav_dir(path) -> dict:
    from .audio import load_wav

    if not os.path.isdir(path):
        raise DataError(f"{path}: not a directory")
    names = sorted(f for f in os.listdir(path) if f.lower().endswith(".wav"))
    if not names:
        raise DataError(f"{path}: no .wav files")
    return {os.path.splitext(f)[0]: load_wav(os.path.join(path, f)) for f in names}


def _load_tower(path):
    from .model import load_checkpoint

    model, meta = load_checkpoint(path)
    return model, meta.get("tower", "query")


def _read_truth(path):
    from .retrieval import GroundTruth

    with open(path) as fh:
        return GroundTruth.from_csv(fh.read())


def _write_text(path, text: str) -> None:
    if path in (None, "-"):
        sys.stdout.write(text)
        return
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as fh:
        fh.write(text)


def _report_extra(args, checksum: str | None = None, **more) -> dict:
    extra = {"seed": args.seed, "config_hash": config_hash(args)}
    if checksum is not None:
        extra["checkpoint_checksum"] = checksum
    extra.update(more)
    return extra


def _encoder_config(args):
    from .model import DESK_CONFIG, EncoderConfig

    base = DESK_CONFIG.to_dict() if args.encoder == "desk" else dict(DESK_CONFIG.to_dict(), **TINY_ENCODER)
    if args.dim is not None:
        base["embedding_dim"] = args.dim
    return EncoderConfig.from_dict(base)


def _candidate_sequences(args, tower):
    """Candidate sequences from ``--index``; a query-tower index must come from the same checkpoint."""
    from .model import model_checksum
    from .retrieval import open_index

    header, seqs = open_index(args.index, d=tower.config.embedding_dim)
    if header["tower"] == "query" and header["model_checksum"] != model_checksum(tower):
        raise DataError(f"{args.index}: built with a different query tower")
    if abs(header["hop"] - args.hop) > 1e-9:
        log.warning("index hop %.3g differs from query hop %.3g", header["hop"], args.hop)
    return header, seqs


# ----------------------------------------------------------------------------
# commands


def cmd_synth(args):
    from .dataset import write_stem_set
    from .synth import synth_corpus

    for stems in synth_corpus(args.tracks, args.seed, args.prefix, args.stream):
        write_stem_set(args.out, stems)
    print(f"wrote {args.tracks} tracks to {args.out}")


def cmd_bench(args):
    from .audio import save_wav
    from .benchmark import (
        BenchmarkSpec,
        candidate_pool,
        heldout_corpus,
        location_queries,
        pitched_queries,
        training_corpus,
        transformed_queries,
        verbatim_queries,
    )
    from .dataset import write_stem_set

    spec = BenchmarkSpec(args.seed, args.tracks, args.queries, args.pool, args.fx)
    for stems in training_corpus(spec):
        write_stem_set(os.path.join(args.out, "train_stems"), stems)
    heldout = heldout_corpus(spec)
    pool, _ = candidate_pool(heldout, spec)
    for cid, clip in pool.items():
        save_wav(os.path.join(args.out, "pool", f"{cid}.wav"), clip)
    sets = {"queries": transformed_queries, "pitched": pitched_queries, "verbatim": verbatim_queries}
    if spec.n_pool >= 2 * spec.n_queries:
        sets["location"] = location_queries
    provenance = {}
    for name, build in sets.items():
        qs = build(heldout, spec)
        for qid, clip in qs.queries.items():
            save_wav(os.path.join(args.out, name, f"{qid}.wav"), clip)
        _write_text(os.path.join(args.out, f"{name}_truth.csv"), qs.truth.to_csv())
        provenance[name] = qs.provenance
    _write_text(os.path.join(args.out, "provenance.json"), json.dumps(provenance, indent=1, sort_keys=True) + "\n")
    print(f"benchmark: {spec.n_train_tracks} training tracks, {len(pool)} candidates, sets {', '.join(sets)}")


def cmd_forge(args):
    from .dataset import build_dataset, load_stem_dir
    from .fx import DatasetConfig

    if not os.path.isdir(args.in_dir):
        raise DataError(f"{args.in_dir}: not a directory")
    tracks = load_stem_dir(args.in_dir)
    _, _, stats = build_dataset(tracks, DatasetConfig(args.fx, STEMS_MODES[args.stems_mode]), args.out, args.seed)
    print(
        f"retained {stats['tracks_retained']}/{stats['tracks_in']} tracks ({stats['retained_pct']:.1f}%), "
        f"N=3 {stats['n3_pct']:.1f}%, vocals {stats['vocals_active_pct']:.1f}%, "
        f"harmony {stats['harmony_active_pct']:.1f}%, drums {stats['drums_active_pct']:.1f}%"
    )


def cmd_train(args):
    import torch

    from .dataset import DatasetManifest, PairRenderer, load_stem_dir
    from .train import TrainConfig, train

    with open(os.path.join(args.dataset, "manifest.json")) as fh:
        manifest = DatasetManifest.from_json(fh.read(), args.fx)
    if not os.path.isdir(args.stems):
        raise DataError(f"{args.stems}: not a directory")
    wanted = {e["track_id"] for e in manifest.entries}
    stems = [s for s in load_stem_dir(args.stems) if s.track_id in wanted]
    if len(stems) != len(wanted):
        raise DataError("stems directory is missing tracks listed in the manifest")
    cfg = TrainConfig(
        alpha=args.alpha,
        beta=args.beta,
        gamma=args.gamma,
        batch_size=args.batch_size,
        epochs=args.epochs,
        lr=args.lr,
        lr_drops=args.lr_drops,
        seed=args.seed,
        shared=args.shared,
    )
    torch.manual_seed(args.seed)

    def progress(rec, wall):
        print(f"epoch {rec['epoch']:3d}  loss {rec['loss']:.4f}  val {rec['val_loss']:.4f}  lr {rec['lr']:.2e}  {wall:7.1f}s", flush=True)

    result = train(manifest, PairRenderer(manifest, stems), cfg, _encoder_config(args), args.out, progress)
    print(f"best epoch {result.best_epoch} (val loss {result.best_val:.4f}); checkpoints in {args.out}")


def cmd_embed(args):
    from .audio import load_wav
    from .model import model_checksum
    from .retrieval import embed_track

    tower, _ = _load_tower(args.checkpoint)
    name = os.path.splitext(os.path.basename(args.audio))[0]
    seq = embed_track(load_wav(args.audio), tower, hop=args.hop, track_id=name)
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    with open(args.out, "wb") as fh:
        np.savez(fh, vectors=seq.vectors, window_starts=seq.window_starts, track_id=name, model_checksum=model_checksum(tower))
    print(f"{name}: {len(seq)} windows x {seq.dim}")


def cmd_index(args):
    from .retrieval import build_index

    tower, role = _load_tower(args.checkpoint)
    seqs = build_index(args.out, _wav_dir(args.audio_dir), tower, hop=args.hop, role=role)
    print(f"indexed {len(seqs)} tracks ({sum(len(s) for s in seqs)} windows) with the {role} tower")


def cmd_query(args):
    from .audio import load_wav
    from .retrieval import embed_track, rank_candidates

    tower, _ = _load_tower(args.checkpoint)
    _, pool = _candidate_sequences(args, tower)
    q = embed_track(load_wav(args.audio), tower, hop=args.hop, track_id="query")
    for cid, score in rank_candidates(q, pool)[: args.top]:
        print(f"{cid}\t{score:.6f}")


def cmd_eval(args):
    from .model import model_checksum
    from .retrieval import embed_track, evaluate_retrieval

    tower, _ = _load_tower(args.checkpoint)
    header, pool = _candidate_sequences(args, tower)
    truth = _read_truth(args.truth)
    queries = [embed_track(c, tower, hop=args.hop, track_id=q) for q, c in _wav_dir(args.queries).items()]
    report = evaluate_retrieval(queries, pool, truth)
    extra = _report_extra(args, model_checksum(tower), hop=args.hop, index_tower=header["tower"])
    _write_text(args.out, report.to_json(extra))
    print(f"mAP {report.map:.4f}  rank1 {report.rank1}/{len(report.per_query)}  rank5 {report.rank5}/{len(report.per_query)}")


def cmd_locate(args):
    import csv
    import io

    from .retrieval import embed_track, evaluate_location

    tower, _ = _load_tower(args.checkpoint)
    _, pool = _candidate_sequences(args, tower)
    truth = _read_truth(args.truth)
    if not truth.instances:
        raise DataError(f"{args.truth}: no location instances")
    queries = [embed_track(c, tower, hop=args.hop, track_id=q) for q, c in _wav_dir(args.queries).items()]
    table, rows = evaluate_location(queries, pool, truth, args.k)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["k"] + [f"{k:g}" for k in args.k])
    w.writerow(["map"] + [f"{table[k]:.4f}" for k in args.k])
    _write_text(args.out, buf.getvalue())
    if args.instances_out:
        ibuf = io.StringIO()
        iw = csv.DictWriter(ibuf, fieldnames=list(rows[0]), lineterminator="\n")
        iw.writeheader()
        iw.writerows(rows)
        _write_text(args.instances_out, ibuf.getvalue())


def cmd_fp_build(args):
    from .landmarks import FingerprintDB

    db = FingerprintDB.build(_wav_dir(args.audio_dir))
    db.save(args.out)
    print(f"fingerprinted {len(db.track_ids)} tracks, {len(db.keys)} hashes")


def cmd_fp_query(args):
    from .audio import load_wav
    from .landmarks import FingerprintDB, baseline_rankings, match_query
    from .retrieval import evaluate_rankings

    db = FingerprintDB.load(args.db)
    if args.audio:
        for tid, score in match_query(load_wav(args.audio), db, repitch=args.repitch)[: args.top]:
            print(f"{tid}\t{score}")
        return
    if not (args.queries and args.truth):
        raise UsageError("fp-query needs --audio, or --queries with --truth")
    report = evaluate_rankings(baseline_rankings(_wav_dir(args.queries), db, repitch=args.repitch), _read_truth(args.truth))
    _write_text(args.out, report.to_json(_report_extra(args, repitch=args.repitch)))
    print(f"mAP {report.map:.4f}  rank1 {report.rank1}/{len(report.per_query)}")


def cmd_heatmap(args):
    from .audio import load_wav
    from .retrieval import embed_track, heatmap_csv

    tower, _ = _load_tower(args.checkpoint)
    cand_tower = _load_tower(args.candidate_checkpoint)[0] if args.candidate_checkpoint else tower
    q = embed_track(load_wav(args.query), tower, hop=args.hop, track_id="query")
    c = embed_track(load_wav(args.candidate), cand_tower, hop=args.hop, track_id="candidate")
    _write_text(args.out, heatmap_csv(q, c))


# ----------------------------------------------------------------------------
# parser


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def _float_list(text):
    if isinstance(text, (list, tuple)):
        return [float(v) for v in text]
    try:
        vals = [float(v) for v in str(text).split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None
    if not vals or any(v <= 0 for v in vals):
        raise argparse.ArgumentTypeError("expected a comma separated list of positive numbers")
    return vals


def _int_list(text):
    if isinstance(text, (list, tuple)):
        return [int(v) for v in text]
    return [int(v) for v in str(text).split(",") if v.strip()]


# (command, handler, help, [(flags, kwargs)], required dests)
def _specs():
    hop = (("--hop",), {"type": float, "default": 2.5, "help": "window hop in seconds"})
    ckpt = (("--checkpoint",), {"help": "query tower checkpoint"})
    index = (("--index",), {"help": "candidate index file"})
    out = (("--out",), {"help": "output path"})
    return [
        ("synth", cmd_synth, "write synthetic stem sets", [
            (("--tracks",), {"type": int, "help": "number of tracks"}),
            out,
            (("--prefix",), {"default": "synth"}),
            (("--stream",), {"type": int, "default": 0, "help": "corpus stream under the master seed"}),
        ], ["tracks", "out"]),
        ("bench", cmd_bench, "write the desk benchmark: training stems, candidate pool and query sets", [
            out,
            (("--tracks",), {"type": _positive_int, "default": 60, "help": "training tracks"}),
            (("--queries",), {"type": _positive_int, "default": 20}),
            (("--pool",), {"type": _positive_int, "default": 60}),
            (("--fx",), {"choices": ("A", "B", "C"), "default": "B"}),
        ], ["out"]),
        ("forge", cmd_forge, "gate stems, split tracks and write the dataset manifest", [
            (("--fx",), {"choices": ("A", "B", "C"), "default": "B", "help": "effect configuration"}),
            (("--stems-mode",), {"choices": tuple(STEMS_MODES), "default": "n-1"}),
            (("--in",), {"dest": "in_dir", "help": "stem directory"}),
            out,
        ], ["in_dir", "out"]),
        ("train", cmd_train, "train the two towers", [
            (("--dataset",), {"help": "forged dataset directory"}),
            (("--stems",), {"help": "stem directory the dataset was forged from"}),
            out,
            (("--fx",), {"choices": ("A", "B", "C"), "default": "B"}),
            (("--epochs",), {"type": _positive_int, "default": 30}),
            (("--batch-size",), {"type": int, "default": 64}),
            (("--lr",), {"type": float, "default": 1e-3}),
            (("--lr-drops",), {"type": _int_list, "default": None, "help": "comma separated epochs"}),
            (("--alpha",), {"type": float, "default": 0.3}),
            (("--beta",), {"type": float, "default": 0.3}),
            (("--gamma",), {"type": float, "default": 0.7}),
            (("--shared",), {"action": "store_true", "help": "one tower for both roles"}),
            (("--encoder",), {"choices": ("desk", "tiny"), "default": "desk"}),
            (("--dim",), {"type": _positive_int, "default": None}),
        ], ["dataset", "stems", "out"]),
        ("embed", cmd_embed, "embed one audio file into a window sequence (.npz)", [
            ckpt, (("--audio",), {}), out, hop,
        ], ["checkpoint", "audio", "out"]),
        ("index", cmd_index, "embed a directory of candidates into an index file", [
            ckpt, (("--audio-dir",), {}), out, hop,
        ], ["checkpoint", "audio_dir", "out"]),
        ("query", cmd_query, "rank indexed candidates for one query", [
            ckpt, index, (("--audio",), {}), hop, (("--top",), {"type": _positive_int, "default": 10}),
        ], ["checkpoint", "index", "audio"]),
        ("eval", cmd_eval, "retrieval mAP of a query directory against an index", [
            ckpt, index, (("--queries",), {}), (("--truth",), {}), hop,
            (("--out",), {"default": "-", "help": "report path (default stdout)"}),
        ], ["checkpoint", "index", "queries", "truth"]),
        ("locate", cmd_locate, "sample location mAP at several tolerances", [
            ckpt, index, (("--queries",), {}), (("--truth",), {}), hop,
            (("--k",), {"type": _float_list, "default": [2.5, 5.0, 7.5, 10.0]}),
            (("--out",), {"default": "-"}),
            (("--instances-out",), {"default": None}),
        ], ["checkpoint", "index", "queries", "truth"]),
        ("fp-build", cmd_fp_build, "landmark fingerprint database from a directory", [
            (("--audio-dir",), {}), out,
        ], ["audio_dir", "out"]),
        ("fp-query", cmd_fp_query, "landmark matching of one query or a query directory", [
            (("--db",), {}), (("--audio",), {}), (("--queries",), {}), (("--truth",), {}),
            (("--repitch",), {"action": "store_true"}),
            (("--top",), {"type": _positive_int, "default": 10}),
            (("--out",), {"default": "-"}),
        ], ["db"]),
        ("heatmap", cmd_heatmap, "pairwise cosine matrix of one query and one candidate (CSV)", [
            ckpt, (("--candidate-checkpoint",), {"default": None}),
            (("--query",), {}), (("--candidate",), {}), hop, (("--out",), {"default": "-"}),
        ], ["checkpoint", "query", "candidate"]),
    ]


def build_parser(config: dict | None = None):
    config = config or {}
    shared = {k: v for k, v in config.items() if not isinstance(v, dict)}
    parser = argparse.ArgumentParser(prog="sampleid", description="Sample identification toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true")
    subs = parser.add_subparsers(dest="command", metavar="command")
    subs.required = True
    required = {}
    for name, func, help_, options, needed in _specs():
        sp = subs.add_parser(name, help=help_, description=help_)
        sp.add_argument("--seed", type=int, default=0, help="master seed (default 0)")
        sp.add_argument("--config", help=f"JSON run config (default ${ENV_CONFIG})")
        sp.add_argument("--threads", type=_positive_int, default=1, help="torch intra-op threads")
        for flags, kwargs in options:
            sp.add_argument(*flags, **kwargs)
        dests = {a.dest for a in sp._actions}
        section = dict(shared, **config.get(name, {}))
        unknown = set(config.get(name, {})) - dests
        if unknown:
            raise UsageError(f"config section {name!r} has unknown keys {sorted(unknown)}")
        sp.set_defaults(func=func, **{k: v for k, v in section.items() if k in dests})
        required[name] = (sp, needed)
    return parser, required


def _read_config(argv) -> dict:
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    path = known.config or os.environ.get(ENV_CONFIG)
    if not path:
        return {}
    try:
        with open(path) as fh:
            config = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    if not isinstance(config, dict):
        raise UsageError(f"config {path} must hold a JSON object")
    return config


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        parser, required = build_parser(_read_config(argv))
    except UsageError as exc:
        print(f"sampleid: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    sp, needed = required[args.command]
    missing = [d for d in needed if getattr(args, d, None) is None]
    if missing:
        print(f"sampleid {args.command}: error: missing --{', --'.join(m.replace('_', '-') for m in missing)}", file=sys.stderr)
        return EXIT_USAGE
    if args.command == "synth" and args.tracks < 1:
        print("sampleid synth: error: --tracks must be at least 1", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")

    import torch

    from .audio import AudioError
    from .dataset import EmptyDatasetError
    from .model import CheckpointError
    from .retrieval import IndexFileError, TruthError

    torch.set_num_threads(args.threads)
    try:
        args.func(args)
    except UsageError as exc:
        print(f"sampleid {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FloatingPointError as exc:
        print(f"sampleid {args.command}: diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (DataError, AudioError, EmptyDatasetError, CheckpointError, IndexFileError, TruthError, OSError, ValueError, KeyError) as exc:
        print(f"sampleid {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
