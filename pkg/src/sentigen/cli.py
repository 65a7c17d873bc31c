"""Command-line entry point.

Subcommands cover the full workflow: make-corpus (deterministic synthetic
data), validate, the two pre-training stages, fine-tuning, evaluation,
representation export, and the bias report. Configuration comes from an
optional JSON file plus flags (flags win); the only environment variable is
SENTIGEN_LOG for log verbosity. Runtime failures print a single JSON line on
stderr and exit 1; configuration/usage problems exit 2.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .bias import (AccuracyMatrix, bias_report, build_accuracy_matrix, fixture_accuracy_matrix,
                   render_bias_report)
from .data import POOL_DATASET_ID, Registry, load_corpus
from .errors import ConfigError, SentigenError
from .evaluation import evaluate_records
from .model import encode, load_checkpoint
from .prompt import Vocab, build_prompt
from .training import TrainConfig, run_finetune, run_pretrain_stage1, run_pretrain_stage2

log = logging.getLogger(__name__)


def _setup_logging():
    level = os.environ.get("SENTIGEN_LOG", "warning").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


# ---------------------------------------------------------------------------
# configuration


def _load_config_file(path):
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    try:
        obj = json.loads(p.read_text("utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {p} is not valid JSON: {exc}") from None
    if not isinstance(obj, dict):
        raise ConfigError("config file must hold a JSON object")
    unknown = set(obj) - {"train", "model", "seed"}
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(unknown)}")
    return obj


def _resolve_train_config(args, config):
    train = dict(config.get("train", {}))
    cfg = TrainConfig.from_json(train)
    if config.get("seed") is not None:
        cfg = replace(cfg, seed=int(config["seed"]))
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg.validate()


def _resolve_model_config(config):
    from .model import ModelConfig
    section = config.get("model", {})
    if not isinstance(section, dict):
        raise ConfigError("config 'model' section must be an object")
    return ModelConfig.from_json(section) if section else ModelConfig()


def _config_hash(payload):
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode("utf-8")).hexdigest()


def write_manifest(out_dir, command, seed, effective_config):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "seed": seed,
        "config_hash": _config_hash(effective_config),
        "code_version": __version__,
    }
    with open(out / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def _load_inputs(args):
    registry_path = Path(args.registry)
    corpus_path = Path(args.corpus)
    if not registry_path.exists():
        raise ConfigError(f"registry file not found: {registry_path}")
    if not corpus_path.exists():
        raise ConfigError(f"corpus file not found: {corpus_path}")
    registry = Registry.load(registry_path)
    records = load_corpus(corpus_path, registry)
    return records, registry


# ---------------------------------------------------------------------------
# synthetic corpus

_SST_POS = ("a great movie", "wonderful acting throughout", "a delightful story")
_SST_NEG = ("an awful movie", "terrible acting throughout", "a dreadful story")
_ABSA_ASPECTS = ("battery", "screen", "camera", "keyboard")
_ABSA_CUES = {"positive": ("excellent", "superb"),
              "negative": ("poor", "broken"),
              "neutral": ("standard", "unchanged")}
_ERC_CUES = {"anger": "furious shouting right now",
             "joy": "laughing with pure delight",
             "neutral": "a plain statement of fact"}
_ERC_FILLER = ("we talked earlier", "the meeting ran long", "dinner is ready", "look outside")
_MSA_SIGN = {"up": 1.0, "down": -1.0}
_MSA_MAG = {"one": 1.0, "two": 2.0, "three": 3.0}


def make_synthetic_corpus(out_dir, seed=0, per_task=6, audio_dim=8, visual_dim=4):
    """Write a small deterministic corpus with planted lexical cues (so tiny
    models can actually fit it) plus its registry. One conversation record
    references a binary feature sidecar; everything else is inline. Returns
    (corpus_path, registry_path)."""
    from .data import write_feature_sidecar
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    rows = []

    def frames(n, dim):
        return [[round(float(x), 4) for x in row] for row in rng.normal(0.0, 0.5, size=(n, dim))]

    base = {"audio": None, "image": None, "context": None,
            "speaker_id": None, "utterance_index": None}

    for i in range(per_task):
        pos = i % 2 == 0
        pool = _SST_POS if pos else _SST_NEG
        rows.append({**base, "task_type": "ca", "dataset_id": "sst-toy",
                     "text": pool[i % len(pool)],
                     "label": "positive" if pos else "negative"})

    absa_labels = ("positive", "negative", "neutral")
    for i in range(per_task):
        label = absa_labels[i % 3]
        cue = _ABSA_CUES[label][i % 2]
        aspect = _ABSA_ASPECTS[i % len(_ABSA_ASPECTS)]
        rows.append({**base, "task_type": "absa", "dataset_id": "absa-toy",
                     "text": f"the {aspect} is {cue}", "label": label})

    erc_labels = tuple(_ERC_CUES)
    sidecar_name = None
    for i in range(per_task):
        label = erc_labels[i % 3]
        n_ctx = 1 + i % 2
        context = [[f"spk{(i + k + 1) % 4}", _ERC_FILLER[(i + k) % len(_ERC_FILLER)]]
                   for k in range(n_ctx)]
        audio = frames(2, audio_dim)
        if i == 0:
            sidecar_name = "meld-toy-0.saev"
            write_feature_sidecar(out / sidecar_name, audio)
            audio = sidecar_name
        rows.append({**base, "task_type": "erc", "dataset_id": "meld-toy",
                     "text": _ERC_CUES[label], "audio": audio,
                     "context": context, "speaker_id": f"spk{i % 4}",
                     "utterance_index": n_ctx, "label": label})

    signs = tuple(_MSA_SIGN)
    mags = tuple(_MSA_MAG)
    for i in range(per_task):
        if i % 4 == 3:
            text, label = "market stayed flat at zero today", 0.0
        else:
            s, m = signs[i % 2], mags[i % 3]
            text = f"market went {s} {m} points today"
            label = _MSA_SIGN[s] * _MSA_MAG[m]
        rows.append({**base, "task_type": "msa", "dataset_id": "mosi-toy",
                     "text": text, "audio": frames(2, audio_dim),
                     "image": frames(1, visual_dim), "label": label})

    corpus_path = out / "corpus.jsonl"
    with open(corpus_path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, ensure_ascii=False) + "\n")

    registry = {
        "sst-toy": {"task_type": "ca", "answer_set": ["negative", "positive"],
                    "acoustic_dim": None, "visual_dim": None, "metrics": ["wa", "wf1"]},
        "absa-toy": {"task_type": "absa", "answer_set": ["negative", "neutral", "positive"],
                     "acoustic_dim": None, "visual_dim": None, "metrics": ["wa", "wf1"]},
        "meld-toy": {"task_type": "erc", "answer_set": ["anger", "joy", "neutral"],
                     "acoustic_dim": audio_dim, "visual_dim": None,
                     "metrics": ["wa", "wf1", "mf1_excl_neutral"]},
        "mosi-toy": {"task_type": "msa", "answer_set": {"kind": "scalar", "min": -3.0, "max": 3.0},
                     "acoustic_dim": audio_dim, "visual_dim": visual_dim,
                     "metrics": ["mae", "acc7", "acc2"]},
        POOL_DATASET_ID: {"task_type": "ca",
                          "answer_set": ["negative", "neutral", "positive"],
                          "acoustic_dim": audio_dim, "visual_dim": visual_dim,
                          "metrics": ["wa"]},
    }
    registry_path = out / "registry.json"
    with open(registry_path, "w", encoding="utf-8") as fh:
        json.dump(registry, fh, indent=2)
        fh.write("\n")
    return corpus_path, registry_path


# ---------------------------------------------------------------------------
# subcommands


def cmd_make_corpus(args):
    corpus, registry = make_synthetic_corpus(args.out, seed=args.seed or 0,
                                             per_task=args.per_task)
    write_manifest(args.out, "make-corpus", args.seed or 0,
                   {"per_task": args.per_task, "seed": args.seed or 0})
    print(json.dumps({"corpus": str(corpus), "registry": str(registry)}))
    return 0


def cmd_validate(args):
    records, registry = _load_inputs(args)
    by_dataset = {}
    for r in records:
        by_dataset[r.dataset_id] = by_dataset.get(r.dataset_id, 0) + 1
    print(json.dumps({"records": len(records),
                      "datasets": by_dataset,
                      "registry": registry.dataset_ids}))
    return 0


def _run_training(args, runner, command, **extra):
    config = _load_config_file(args.config)
    train_cfg = _resolve_train_config(args, config)
    model_cfg = _resolve_model_config(config)
    records, registry = _load_inputs(args)
    write_manifest(args.out, command, train_cfg.seed,
                   {"train": train_cfg.to_json(), "model": model_cfg.to_json(),
                    "corpus": str(args.corpus), "registry": str(args.registry)})
    path = runner(records, registry, model_cfg, train_cfg, args.out, **extra)
    print(json.dumps({"checkpoint": str(path)}))
    return 0


def cmd_pretrain1(args):
    return _run_training(args, run_pretrain_stage1, "pretrain1", resume_from=args.resume)


def cmd_pretrain2(args):
    return _run_training(args, run_pretrain_stage2, "pretrain2",
                         init_checkpoint=args.init, resume_from=args.resume)


def cmd_finetune(args):
    extra = {"init_checkpoint": args.init, "resume_from": args.resume}
    if args.val_corpus:
        val_path = Path(args.val_corpus)
        if not val_path.exists():
            raise ConfigError(f"validation corpus not found: {val_path}")
        registry = Registry.load(args.registry)
        extra["val_records"] = load_corpus(val_path, registry)
    return _run_training(args, run_finetune, "finetune", **extra)


def _load_model(checkpoint_path, registry):
    path = Path(checkpoint_path)
    if not path.exists():
        raise ConfigError(f"checkpoint not found: {path}")
    config, arrays, meta = load_checkpoint(path)
    from .model import params_from_arrays
    vocab = Vocab(meta["vocab"], meta["vocab_datasets"], meta["vocab_speakers"])
    if config.num_datasets != len(registry):
        raise ConfigError(
            f"checkpoint expects {config.num_datasets} datasets, registry has {len(registry)}")
    params = params_from_arrays(config, arrays)
    return params, config, vocab


def _metric_table(payload):
    """Aligned text table: one row per dataset, one column per metric name."""
    names = sorted({m for row in payload.values() for m in row if m not in ("samples",)})
    width = max(len(d) for d in payload) + 2
    cell = max([len(n) for n in names] + [8]) + 2
    lines = [" " * width + "".join(f"{n:>{cell}}" for n in names)]
    for dataset in sorted(payload):
        row = payload[dataset]
        cells = "".join(f"{row[n]:>{cell}.4f}" if n in row else " " * cell for n in names)
        lines.append(f"{dataset:<{width}}" + cells)
    return "\n".join(lines)


def cmd_eval(args):
    records, registry = _load_inputs(args)
    params, config, vocab = _load_model(args.checkpoint, registry)
    results = evaluate_records(records, params, config, vocab, registry, max_new=args.max_new)
    payload = {d: {**r.metrics, "fallback_rate": r.fallback_rate, "samples": len(r.golds)}
               for d, r in sorted(results.items())}
    if args.out:
        write_manifest(args.out, "eval", None, {"checkpoint": str(args.checkpoint)})
        with open(Path(args.out) / "eval.json", "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")
    print(_metric_table(payload))
    print(json.dumps(payload, sort_keys=True))
    return 0


def cmd_export_embeddings(args):
    records, registry = _load_inputs(args)
    params, config, vocab = _load_model(args.checkpoint, registry)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_manifest(args.out, "export-embeddings", None, {"checkpoint": str(args.checkpoint)})
    path = out / "embeddings.jsonl"
    with open(path, "w", encoding="utf-8") as fh:
        for i, record in enumerate(records):
            ps = build_prompt(record, vocab, registry, config.max_len)
            enc = encode(ps, params, config, vocab, mask_plan=None, train=False)
            spec = registry.spec(record.dataset_id)
            fh.write(json.dumps({
                "dataset_id": record.dataset_id,
                "sample_id": i,
                "label": spec.answer.render(record.label),
                "vector": [float(x) for x in enc.pooled.data],
            }) + "\n")
    print(json.dumps({"embeddings": str(path), "records": len(records)}))
    return 0


def _matrix_from_embeddings(path, correspondence):
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"embeddings file not found: {p}")
    items = {}
    order = []
    with open(p, "r", encoding="utf-8") as fh:
        for raw in fh:
            if not raw.strip():
                continue
            obj = json.loads(raw)
            d = obj["dataset_id"]
            if d not in items:
                items[d] = []
                order.append(d)
            items[d].append((obj["label"], np.asarray(obj["vector"], dtype=np.float64)))
    if not items:
        raise ConfigError(f"embeddings file {p} holds no rows")
    return build_accuracy_matrix(items, order=order, correspondence=correspondence)


def _load_correspondence(path):
    if path is None:
        return None
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"correspondence file not found: {p}")
    obj = json.loads(p.read_text("utf-8"))
    out = {}
    for src, targets in obj.items():
        for tgt, mapping in targets.items():
            out[(src, tgt)] = dict(mapping)
    return out


def cmd_bias_report(args):
    if args.acc_matrix and args.embeddings:
        raise ConfigError("pass either --acc-matrix or --embeddings, not both")
    if args.acc_matrix:
        p = Path(args.acc_matrix)
        if not p.exists():
            raise ConfigError(f"accuracy matrix file not found: {p}")
        matrix = AccuracyMatrix.from_json(json.loads(p.read_text("utf-8")))
    elif args.embeddings:
        matrix = _matrix_from_embeddings(args.embeddings, _load_correspondence(args.correspondence))
    else:
        matrix = fixture_accuracy_matrix()
    report = bias_report(matrix)
    text = render_bias_report(report)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_manifest(args.out, "bias-report", None, matrix.to_json())
        with open(out / "bias_report.json", "w", encoding="utf-8") as fh:
            json.dump({"accuracy": matrix.to_json(), **report.to_json()}, fh, indent=2)
            fh.write("\n")
    print(text)
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser():
    parser = argparse.ArgumentParser(
        prog="sentigen",
        description="Unified generative sentiment analysis: data, pre-training, "
                    "fine-tuning, evaluation, and bias reports.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_io(p, corpus=True, registry=True, out=True):
        if corpus:
            p.add_argument("--corpus", required=True, help="JSONL corpus path")
        if registry:
            p.add_argument("--registry", required=True, help="registry JSON path")
        if out:
            p.add_argument("--out", required=True, help="output directory")

    def add_train(p):
        add_io(p)
        p.add_argument("--config", help="JSON config file (train/model sections)")
        p.add_argument("--seed", type=int, help="seed override")
        p.add_argument("--resume", help="resume from this mid-run checkpoint")

    p = sub.add_parser("make-corpus", help="write a deterministic synthetic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--per-task", type=int, default=6, dest="per_task")
    p.set_defaults(func=cmd_make_corpus)

    p = sub.add_parser("validate", help="parse and validate a corpus against its registry")
    add_io(p, out=False)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("pretrain1", help="stage-one pre-training on polarity pair pools")
    add_train(p)
    p.set_defaults(func=cmd_pretrain1)

    p = sub.add_parser("pretrain2", help="stage-two pre-training with pseudo labels")
    add_train(p)
    p.add_argument("--init", help="stage-one checkpoint to start from")
    p.set_defaults(func=cmd_pretrain2)

    p = sub.add_parser("finetune", help="answer-generation fine-tuning")
    add_train(p)
    p.add_argument("--init", help="pre-trained checkpoint to start from")
    p.add_argument("--val-corpus", dest="val_corpus", help="held-out corpus for epoch validation")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("eval", help="generate, decode and score a corpus")
    add_io(p, out=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", help="optional directory for eval.json")
    p.add_argument("--max-new", type=int, default=8, dest="max_new")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export-embeddings", help="write pooled encoder vectors per record")
    add_io(p)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_export_embeddings)

    p = sub.add_parser("bias-report", help="pairwise annotation-transfer bias scores")
    p.add_argument("--acc-matrix", dest="acc_matrix",
                   help="accuracy matrix JSON (default: bundled published table)")
    p.add_argument("--embeddings", help="embeddings.jsonl from export-embeddings")
    p.add_argument("--correspondence", help="label correspondence JSON")
    p.add_argument("--out", help="optional directory for bias_report.json")
    p.set_defaults(func=cmd_bias_report)

    return parser


def main(argv=None):
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 2
    except SentigenError as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
