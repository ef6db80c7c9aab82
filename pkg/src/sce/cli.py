"""Command line: ``sce <clean|split|build-vocab|train|eval|ablate|report|toy> [flags]``.

Exit codes: 0 success, 1 usage, 2 data error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__
from . import data as D
from . import metrics as M
from . import model as nn
from . import trainer as TR
from .tokenizer import VocabFormatError, load_vocab, save_vocab, train_bpe

log = logging.getLogger("sce")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
SPLIT_FILES = {"train": "train.jsonl", "validation": "validation.jsonl", "test": "test.jsonl"}
VOCAB_FILE = "vocab.txt"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _digest(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def write_manifest(path: Path, command: str, config: dict, inputs, seeds, artifacts) -> None:
    manifest = {
        "command": command,
        "config": config,
        "inputs": {str(p): _digest(Path(p)) for p in inputs},
        "seeds": list(seeds),
        "artifacts": sorted(str(a) for a in artifacts),
        "tool_version": __version__,
    }
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _default_seed() -> int:
    return int(os.environ.get("SCE_SEED", "0"))


# ---------------------------------------------------------------------------
# configuration

_MODEL_KEYS = {f.name for f in dataclasses.fields(nn.ModelConfig)} - {"vocab_size", "max_len"}
_TRAIN_KEYS = {f.name for f in dataclasses.fields(TR.TrainConfig)}


def _preset(full_scale: bool) -> dict:
    model = nn.ModelConfig.full_scale() if full_scale else nn.ModelConfig()
    train = TR.TrainConfig.full_scale() if full_scale else TR.TrainConfig()
    cfg = {k: v for k, v in model.to_dict().items() if k in _MODEL_KEYS}
    cfg.update(train.to_dict())
    return cfg


def effective_config(args) -> dict:
    """Preset, then ``SCE_SEED``, then the --config file, then explicit flags."""
    cfg = _preset(getattr(args, "paper", False))
    cfg["seed"] = _default_seed()
    cfg["runs"] = getattr(args, "default_runs", 1)
    cfg["resplit"] = False
    if getattr(args, "config", None):
        loaded = json.loads(Path(args.config).read_text(encoding="utf-8"))
        if isinstance(loaded.get("config"), dict):
            loaded = loaded["config"]  # accept a run manifest
        unknown = set(loaded) - _MODEL_KEYS - _TRAIN_KEYS - {"runs", "resplit", "max_lens"}
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        cfg.update({k: v for k, v in loaded.items() if k != "max_lens"})
    flags = {
        "seed": "seed", "max_len": "max_len", "lr": "learning_rate", "epochs": "epochs",
        "batch_size": "batch_size", "runs": "runs", "p_replace": "p_replace",
    }
    for attr, key in flags.items():
        val = getattr(args, attr, None)
        if val is not None:
            cfg[key] = val
    if getattr(args, "augment", False):
        cfg["augment"] = True
    if getattr(args, "resplit", False):
        cfg["resplit"] = True
    if cfg["runs"] < 1:
        raise UsageError("--runs must be >= 1")
    return cfg


def _configs(cfg: dict, vocab_size: int):
    model = nn.ModelConfig.from_dict({**{k: cfg[k] for k in _MODEL_KEYS if k in cfg},
                                      "vocab_size": vocab_size, "max_len": cfg["max_len"]})
    return model, TR.TrainConfig.from_dict(cfg)


def _load_data_dir(data_dir: Path, need_vocab: bool = True):
    for name in SPLIT_FILES.values():
        if not (data_dir / name).exists():
            raise FileNotFoundError(f"{data_dir / name} not found; run `sce split` first")
    split = D.SplitResult(*(D.read_jsonl(data_dir / f) for f in SPLIT_FILES.values()), seed=-1)
    vocab = None
    if need_vocab:
        vpath = data_dir / VOCAB_FILE
        if not vpath.exists():
            raise FileNotFoundError(
                f"{vpath} not found; run `sce build-vocab {data_dir}` before training")
        vocab = load_vocab(vpath)
    return split, vocab


def _lexicon(args, cfg):
    if not cfg.get("augment"):
        return None
    return D.SynonymLexicon.from_file(args.lexicon) if getattr(args, "lexicon", None) \
        else D.SynonymLexicon.demo()


# ---------------------------------------------------------------------------
# tables


def _cells(agg) -> dict:
    return {} if agg is None else agg


def experiment_tables(rows) -> str:
    """rows: (label, ExperimentResult-like dict) -> Validation and Test tables."""
    out = []
    for key, title in (("validation", "Validation Set"), ("test", "Test Set")):
        body = [(label, _cells(res.get(key))) for label, res in rows]
        out.append(M.render_table(body, first_column="Max_Len", title=title))
    notes = [f"* {label}: {len(res['failures'])} run(s) failed"
             for label, res in rows if res.get("failures")]
    return "\n".join(out) + ("\n".join(notes) + "\n" if notes else "")


def _agg_from_json(d):
    if d is None:
        return None
    return {k: (v["mean"], v["std"]) if isinstance(v, dict) else v for k, v in d.items()}


def _row(label, res: TR.ExperimentResult):
    lab = f"{label}*" if res.failures else str(label)
    return lab, {"validation": res.validation, "test": res.test, "failures": res.failures}


# ---------------------------------------------------------------------------
# commands


def cmd_clean(args) -> int:
    src, dst = Path(args.input), Path(args.output)
    rules = D.CleaningRules.from_dict(json.loads(Path(args.rules).read_text())) if args.rules \
        else D.CleaningRules()
    if args.min_tokens is not None:
        rules.min_tokens = args.min_tokens
    records = D.read_csv_corpus(src)
    kept, report = D.clean_corpus(records, rules)
    dst.parent.mkdir(parents=True, exist_ok=True)
    D.write_jsonl(kept, dst)
    write_manifest(dst.with_name(dst.name + ".manifest.json"), "clean",
                   {"min_tokens": rules.min_tokens}, [src], [], [dst])
    print(json.dumps(report.to_dict(), sort_keys=True))
    return EXIT_OK


def cmd_split(args) -> int:
    src, out = Path(args.input), Path(args.out_dir)
    seed = _default_seed() if args.seed is None else args.seed
    ratios = tuple(float(x) for x in args.ratios.split(","))
    result = D.stratified_split(D.read_jsonl(src), ratios, seed)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for key, name in SPLIT_FILES.items():
        D.write_jsonl(getattr(result, key), out / name)
        paths.append(out / name)
    write_manifest(out / "manifest.json", "split", {"ratios": list(ratios)}, [src], [seed], paths)
    print(json.dumps(dict(zip(SPLIT_FILES, result.sizes()))))
    return EXIT_OK


def cmd_build_vocab(args) -> int:
    data_dir = Path(args.data_dir)
    train_path = data_dir / SPLIT_FILES["train"]
    if not train_path.exists():
        raise FileNotFoundError(f"{train_path} not found; run `sce split` first")
    vocab = train_bpe([r.text for r in D.read_jsonl(train_path)], args.vocab_size)
    out = Path(args.out) if args.out else data_dir / VOCAB_FILE
    save_vocab(vocab, out)
    print(json.dumps({"vocab_size": vocab.size, "merges": len(vocab.merges), "path": str(out)}))
    return EXIT_OK


def _run_experiment(split, vocab, cfg, lexicon, out_dir, jobs, max_len=None):
    if max_len is not None:
        cfg = {**cfg, "max_len": max_len}
    model_cfg, train_cfg = _configs(cfg, vocab.size)
    return TR.multi_seed_run(split, vocab, model_cfg, train_cfg, n_runs=cfg["runs"],
                             base_seed=cfg["seed"], out_dir=out_dir, jobs=jobs, lexicon=lexicon,
                             resplit=cfg.get("resplit", False))


def cmd_train(args) -> int:
    data_dir, out = Path(args.data_dir), Path(args.out)
    cfg = effective_config(args)
    split, vocab = _load_data_dir(data_dir)
    out.mkdir(parents=True, exist_ok=True)
    res = _run_experiment(split, vocab, cfg, _lexicon(args, cfg), out, args.jobs)
    (out / "aggregate.json").write_text(json.dumps(res.to_dict(), indent=2) + "\n", encoding="utf-8")
    table = experiment_tables([_row(cfg["max_len"], res)])
    (out / "table.txt").write_text(table, encoding="utf-8")
    seeds = [cfg["seed"] + i for i in range(cfg["runs"])]
    artifacts = [out / "aggregate.json", out / "table.txt"]
    artifacts += [out / f"run-{s.seed}" for s in res.summaries]
    inputs = [data_dir / f for f in SPLIT_FILES.values()] + [data_dir / VOCAB_FILE]
    write_manifest(out / "manifest.json", "train", cfg, inputs, seeds, artifacts)
    print(table, end="")
    if not res.summaries:
        return EXIT_NUMERIC if any("NumericalError" in f["error"] for f in res.failures) else EXIT_DATA
    return EXIT_OK


def cmd_eval(args) -> int:
    run_dir, data_dir = Path(args.run_dir), Path(args.data_dir)
    split, vocab = _load_data_dir(data_dir)
    params, manifest = nn.load_checkpoint(run_dir / "checkpoint.bin", requires_grad=False)
    report = TR.evaluate(params, getattr(split, args.split), vocab, params.config.max_len)
    print(json.dumps(report.to_dict(), sort_keys=True))
    return EXIT_OK


def cmd_ablate(args) -> int:
    data_dir, out = Path(args.data_dir), Path(args.out)
    cfg = effective_config(args)
    max_lens = [int(x) for x in args.max_lens.split(",")]
    cfg["max_lens"] = max_lens
    split, vocab = _load_data_dir(data_dir)
    lexicon = _lexicon(args, cfg)
    out.mkdir(parents=True, exist_ok=True)
    rows, cells = [], {}
    for L in max_lens:
        res = _run_experiment(split, vocab, cfg, lexicon, out / f"max_len-{L}", args.jobs, max_len=L)
        rows.append(_row(L, res))
        cells[str(L)] = res.to_dict()
    table = experiment_tables(rows)
    (out / "ablation.txt").write_text(table, encoding="utf-8")
    (out / "ablation.json").write_text(json.dumps({"max_lens": max_lens, "cells": cells}, indent=2) + "\n",
                                       encoding="utf-8")
    inputs = [data_dir / f for f in SPLIT_FILES.values()] + [data_dir / VOCAB_FILE]
    seeds = [cfg["seed"] + i for i in range(cfg["runs"])]
    write_manifest(out / "manifest.json", "ablate", cfg, inputs, seeds,
                   [out / "ablation.txt", out / "ablation.json"] + [out / f"max_len-{L}" for L in max_lens])
    print(table, end="")
    return EXIT_OK


def _load_result_dir(d: Path):
    """(label prefix, rows, tool_version) from a train or ablate output directory."""
    manifest = json.loads((d / "manifest.json").read_text()) if (d / "manifest.json").exists() else {}
    rows = []
    if (d / "ablation.json").exists():
        payload = json.loads((d / "ablation.json").read_text())
        for L in payload["max_lens"]:
            cell = payload["cells"][str(L)]
            rows.append((L, cell))
    elif (d / "aggregate.json").exists():
        cell = json.loads((d / "aggregate.json").read_text())
        rows.append((manifest.get("config", {}).get("max_len", "?"), cell))
    else:
        raise FileNotFoundError(f"{d} holds neither aggregate.json nor ablation.json")
    return rows, manifest.get("tool_version")


def cmd_report(args) -> int:
    dirs = [Path(p) for p in args.dirs]
    if not dirs:
        raise UsageError("report needs at least one run or ablation directory")
    versions = {}
    table_rows = []
    merged = {}
    for d in dirs:
        rows, version = _load_result_dir(d)
        versions[str(d)] = version
        for L, cell in rows:
            label = f"{L}*" if cell.get("failures") else str(L)
            if len(dirs) > 1:
                label = f"{d.name}:{label}"
            table_rows.append((label, {"validation": _agg_from_json(cell.get("validation")),
                                       "test": _agg_from_json(cell.get("test")),
                                       "failures": cell.get("failures", [])}))
            merged.setdefault(str(d), {})[str(L)] = {k: cell.get(k) for k in ("validation", "test", "failures")}
    text = experiment_tables(table_rows)
    warnings = []
    if len({v for v in versions.values()}) > 1:
        warnings.append(f"conflicting tool versions: {versions}")
        text = f"WARNING: {warnings[-1]}\n" + text
    print(text, end="")
    if args.json:
        Path(args.json).write_text(json.dumps({"sources": merged, "tool_versions": versions,
                                               "warnings": warnings}, indent=2) + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_toy(args) -> int:
    seed = _default_seed() if args.seed is None else args.seed
    D.write_csv_corpus(D.make_toy_corpus(args.n, seed), args.output)
    return EXIT_OK


# ---------------------------------------------------------------------------


def _add_train_flags(p):
    p.add_argument("data_dir", help="directory with train/validation/test.jsonl and vocab.txt")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", help="flat JSON config (or a previous run manifest)")
    p.add_argument("--paper", action="store_true",
                   help="full-scale preset: batch 200, lr 1e-6, 35 epochs, Max_Len 256, d=768, 12 layers")
    p.add_argument("--seed", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--runs", type=int)
    p.add_argument("--augment", action="store_true", help="synonym-replacement augmentation")
    p.add_argument("--p-replace", type=float)
    p.add_argument("--lexicon", help="word<TAB>syn1,syn2 file (default: bundled demo lexicon)")
    p.add_argument("--resplit", action="store_true",
                   help="re-draw the 8:1:1 split with each run's seed")
    p.add_argument("--jobs", type=int, default=1, help="parallel runs")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sce", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("clean", help="clean a text,class CSV into JSONL")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--rules", help="JSON cleaning rules (min_tokens, emoticon_ranges)")
    p.add_argument("--min-tokens", type=int)
    p.set_defaults(func=cmd_clean)

    p = sub.add_parser("split", help="stratified 8:1:1 split")
    p.add_argument("input")
    p.add_argument("out_dir")
    p.add_argument("--seed", type=int)
    p.add_argument("--ratios", default="8,1,1")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("build-vocab", help="train the BPE vocabulary on train.jsonl")
    p.add_argument("data_dir")
    p.add_argument("--vocab-size", type=int, default=4000)
    p.add_argument("--out")
    p.set_defaults(func=cmd_build_vocab)

    p = sub.add_parser("train", help="train one or more seeded runs")
    _add_train_flags(p)
    p.add_argument("--max-len", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a run checkpoint")
    p.add_argument("run_dir")
    p.add_argument("data_dir")
    p.add_argument("--split", choices=list(SPLIT_FILES), default="test")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="Max_Len ablation")
    _add_train_flags(p)
    p.add_argument("--max-lens", default="64,128,256")
    p.set_defaults(func=cmd_ablate, default_runs=5)

    p = sub.add_parser("report", help="consolidate run/ablation directories")
    p.add_argument("dirs", nargs="*")
    p.add_argument("--json", help="write the consolidated report as JSON")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("toy", help="write a synthetic planted-keyword corpus CSV")
    p.add_argument("output")
    p.add_argument("--n", type=int, default=2000)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_toy)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"sce: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TR.NumericalError as exc:
        print(f"sce: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (D.DataError, VocabFormatError, nn.CheckpointError, FileNotFoundError,
            IsADirectoryError, json.JSONDecodeError, UnicodeDecodeError) as exc:
        print(f"sce: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
