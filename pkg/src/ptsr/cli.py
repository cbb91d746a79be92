"""Command-line entry point: prepare, train, evaluate, explain, synth, ablation.

Exit codes: 0 success, 2 usage or validation error, 3 I/O error, 4 numeric
failure during training.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from ptsr import data as data_mod
from ptsr import evaluate as ev
from ptsr import synth as synth_mod
from ptsr import train as train_mod
from ptsr.errors import CheckpointError, ConfigError, PTSRError, TrainingError
from ptsr.model import ModelConfig

log = logging.getLogger("ptsr")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4

ABLATIONS = {"w": "use_weight", "b": "use_bias", "kl": "use_kl", "probe": "use_prob_embedding"}
VARIANTS = {
    "default": (),
    "w/o W": ("w",),
    "w/o B": ("b",),
    "w/o W+B": ("w", "b"),
    "w/o KL": ("kl",),
    "w/o ProbE": ("probe",),
}


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True)


def run_config(args) -> dict:
    """The parsed flags as a plain dict, persisted verbatim into every artifact."""
    return {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "verbose")}


def _hash(obj) -> str:
    return hashlib.sha256(_dump(obj).encode()).hexdigest()


def _require_file(path) -> Path:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"input file not found: {p}")
    return p


def _model_config(args, dataset) -> ModelConfig:
    if args.levels > dataset.max_len:
        raise ConfigError(f"--levels {args.levels} exceeds the bundle's max_len {dataset.max_len}")
    flags = {ABLATIONS[a]: False for a in (args.ablate or [])}
    return ModelConfig(n_items=dataset.n_items, d=args.d, levels=args.levels, max_len=dataset.max_len,
                       gamma=args.gamma, lam=args.lam, family=args.family, conj_depth=args.conj_depth, **flags)


def _train_config(args, epochs=None, seed=None) -> train_mod.TrainConfig:
    return train_mod.TrainConfig(lr=args.lr, weight_decay=args.weight_decay, batch_size=args.batch,
                                 epochs=max(1, args.epochs if epochs is None else epochs),
                                 patience=args.patience, seed=args.seed if seed is None else seed)


def _load_pair(args):
    dataset = data_mod.SplitDataset.load(_require_file(args.data))
    ckpt = train_mod.load(_require_file(args.checkpoint))
    have = dataset.fingerprint()
    if ckpt.data_fingerprint != have:
        raise ConfigError("checkpoint and dataset do not match: checkpoint was built for dataset "
                          f"{ckpt.data_fingerprint}, but {args.data} hashes to {have}")
    return dataset, ckpt


# -- subcommands --------------------------------------------------------------

def cmd_prepare(args) -> int:
    raw = data_mod.ingest(_require_file(args.input), data_mod.parse_format(args.format))
    dataset = data_mod.prepare_dataset(raw, max_len=args.max_len, negatives=args.negatives, seed=args.seed)
    dataset.meta = {**dataset.meta, "run_config": run_config(args)}
    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    dataset.save(out)
    m = dataset.meta
    print(f"{m['n_users']} users, {m['n_items']} items, {m['n_interactions']} interactions -> {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    dataset = data_mod.SplitDataset.load(_require_file(args.data))
    mc = _model_config(args, dataset)
    tc = _train_config(args)
    rc = run_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    last_path, best_path, log_path = out / "last.ckpt", out / "best.ckpt", out / "run_log.jsonl"

    if args.resume and last_path.exists() and best_path.exists():
        trainer = train_mod.Trainer.resume(train_mod.load(last_path), train_mod.load(best_path), dataset)
        # the epoch budget may grow; everything else comes from the stored run
        trainer.tc = replace(trainer.tc, epochs=tc.epochs)
        log.info("resuming at epoch %d", trainer.epoch)
        mode = "a"
    else:
        trainer = train_mod.Trainer(mc, tc, dataset, rc)
        mode = "w"
    with open(log_path, mode) as fh:
        if mode == "w":
            fh.write(_dump({"type": "run_config", "run_config": rc, "model_config": mc.to_dict(),
                            "train_config": tc.to_dict(), "data_fingerprint": dataset.fingerprint()}) + "\n")
        if args.epochs == 0:
            # untrained model, useful as an evaluation-harness sanity anchor
            train_mod.save(trainer.snapshot(), best_path)
            print(f"saved untrained checkpoint -> {best_path}")
            return EXIT_OK

        def on_epoch(record, tr):
            fh.write(_dump({"type": "epoch", **record}) + "\n")
            fh.flush()
            train_mod.save(tr.snapshot(), last_path)
            if tr.best.epoch == tr.epoch:
                train_mod.save(tr.best, best_path)
            log.info("epoch %d loss %.4f valid NDCG@10 %.4f", record["epoch"], record["loss"],
                     record["valid_NDCG@10"])

        best = trainer.run(callback=on_epoch)
        train_mod.save(best, best_path)
        fh.write(_dump({"type": "best", "epoch": best.epoch, "valid_NDCG@10": best.best_metric}) + "\n")
    print(f"best epoch {best.epoch}: valid NDCG@10 {best.best_metric:.4f} -> {best_path}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    dataset, ckpt = _load_pair(args)
    results = ev.evaluate(ckpt.model(), dataset, args.split)
    report = {
        "metrics": ev.metrics(results, args.k),
        "split": args.split,
        "n_users": len(results),
        "config_hash": ckpt.config_hash(),
        "seed": ckpt.train_config.seed,
        "data_seed": ckpt.data_seed,
        "data_fingerprint": ckpt.data_fingerprint,
        "epoch": ckpt.epoch,
        "checkpoint_run_config": ckpt.run_config,
        "run_config": run_config(args),
    }
    text = json.dumps(report, sort_keys=True, indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return EXIT_OK


def cmd_explain(args) -> int:
    dataset, ckpt = _load_pair(args)
    model = ckpt.model()
    index = {u: i for i, u in enumerate(dataset.users)}
    users = args.user or list(dataset.users)
    missing = [u for u in users if u not in index]
    if missing:
        raise ConfigError(f"unknown user(s): {', '.join(missing[:5])}")
    rc = run_config(args)
    out = Path(args.out)
    with open(out, "w") as fh:
        fh.write(_dump({"type": "run_config", "run_config": rc, "config_hash": ckpt.config_hash(),
                        "seed": ckpt.train_config.seed}) + "\n")
        for user in users:
            u = index[user]
            exp = ev.explain(model, dataset.eval_input(u, args.split), dataset.target(u, args.split),
                             args.point_level)
            fh.write(_dump({"type": "explanation", "user": user, "split": args.split,
                            **exp.to_record(dataset.items)}) + "\n")
    summary = {"explanations": len(users), "out": str(out)}
    if args.relations:
        vocab = {name: i + 1 for i, name in enumerate(dataset.items)}
        relations = ev.read_relations(_require_file(args.relations), vocab)
        sequences = ev.sequences_for_relations(dataset, relations)
        recall = ev.key_item_recall(model, relations, sequences, args.k, args.point_level)
        baseline = ev.random_recall_baseline(relations, sequences, args.k, seed=0)
        summary["key_item_recall"] = _keys_to_str(recall)
        summary["random_baseline"] = _keys_to_str(baseline)
        summary["run_config"] = rc
    print(json.dumps(summary, sort_keys=True, indent=2))
    return EXIT_OK


def _keys_to_str(obj):
    if isinstance(obj, dict):
        return {str(k): _keys_to_str(v) for k, v in obj.items()}
    return obj


def cmd_synth(args) -> int:
    config = synth_mod.SynthConfig.load(_require_file(args.config))
    out = Path(args.out)
    paths = synth_mod.write_outputs(synth_mod.generate(config), config, out)
    digest = hashlib.sha256(Path(paths["log"]).read_bytes()).hexdigest()
    print(json.dumps({"paths": paths, "interactions_sha256": digest}, sort_keys=True, indent=2))
    return EXIT_OK


def cmd_ablation(args) -> int:
    dataset = data_mod.SplitDataset.load(_require_file(args.data))
    rc = run_config(args)
    rows = []
    for name in args.variants:
        if name not in VARIANTS:
            raise ConfigError(f"unknown variant {name!r}; choose from {', '.join(VARIANTS)}")
        args.ablate = list(VARIANTS[name])
        scores = []
        for seed in args.seeds:
            best = train_mod.fit(_model_config(args, dataset), _train_config(args, seed=seed), dataset, rc)
            scores.append(ev.metrics(ev.evaluate(best.model(), dataset, "test"), (5, 10)))
            log.info("%s seed %d: %s", name, seed, scores[-1])
        mean = {k: sum(s[k] for s in scores) / len(scores) for k in scores[0]}
        rows.append({"variant": name, "per_seed": scores, "mean": mean})
    report = {"rows": rows, "run_config": rc, "data_fingerprint": dataset.fingerprint()}
    text = json.dumps(report, sort_keys=True, indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return EXIT_OK


# -- parser -------------------------------------------------------------------

def _model_flags(p) -> None:
    p.add_argument("--d", type=int, default=64, help="embedding size of alpha (and of beta)")
    p.add_argument("--levels", type=int, default=2, help="largest pattern size L")
    p.add_argument("--gamma", type=float, default=2.0, help="margin")
    p.add_argument("--lambda", dest="lam", type=float, default=0.4, help="weight of the sequence-aware bias")
    p.add_argument("--family", choices=("gamma", "beta"), default="gamma")
    p.add_argument("--conj-depth", type=int, default=1, help="layers in the conjunction scorer")
    p.add_argument("--lr", type=float, default=5e-4)
    p.add_argument("--weight-decay", type=float, default=1e-8)
    p.add_argument("--batch", type=int, default=512)
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--patience", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ptsr", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="raw log -> 5-core -> leave-one-out bundle with candidates")
    p.add_argument("--input", required=True)
    p.add_argument("--format", default="auto",
                   help="tsv, csv, auto, amazon-ratings, amazon-json, or preset:user=..,item=..,timestamp=..")
    p.add_argument("--output", required=True)
    p.add_argument("--max-len", type=int, default=20)
    p.add_argument("--negatives", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="fit with early stopping; write checkpoints and a run log")
    p.add_argument("--data", required=True)
    _model_flags(p)
    p.add_argument("--ablate", nargs="+", choices=sorted(ABLATIONS), default=[],
                   help="drop components: w (distance weight), b (bias), kl, probe (probabilistic embedding)")
    p.add_argument("--out", required=True)
    p.add_argument("--resume", action="store_true", help="continue from OUT/last.ckpt if present")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="HR@K and NDCG@K under the sampled-candidate protocol")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--k", type=int, nargs="+", default=[5, 10])
    p.add_argument("--split", choices=("valid", "test"), default="test")
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("explain", help="per-pattern score decomposition and key-item recall")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--user", nargs="+")
    p.add_argument("--split", choices=("valid", "test"), default="test")
    p.add_argument("--relations", help="tab/comma separated (user, target, related, relation) file")
    p.add_argument("--k", type=int, nargs="+", default=[1, 2, 3, 5])
    p.add_argument("--point-level", action="store_true", help="rank items by level-1 contributions only")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("synth", help="generate a synthetic log with planted rules")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("ablation", help="train and test model variants over several seeds")
    p.add_argument("--data", required=True)
    _model_flags(p)
    p.add_argument("--variants", nargs="+", default=["default", "w/o W", "w/o W+B"])
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--out")
    p.set_defaults(func=cmd_ablation)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CheckpointError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (PTSRError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
