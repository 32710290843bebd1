"""Command-line entry point: one subcommand per pipeline stage.

Every run writes one ``*.manifest.json`` next to its primary output with the
resolved configuration, seeds and sha256 checksums of inputs and outputs.
A manifest can be passed back through ``--config`` to repeat the run.

Config precedence: explicit flag > config file > built-in default.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import asdict, fields
from pathlib import Path
from typing import Any, Sequence

import yaml

from . import __version__

log = logging.getLogger("faithd2t")

DATA_ENV = "FAITHD2T_DATA"  # default --data path; paths are the only env overrides


class StageError(RuntimeError):
    pass


# -- helpers --------------------------------------------------------------------


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _utc(ts: float) -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime(ts))


def load_config_file(path: str | Path | None) -> dict:
    """YAML or JSON mapping; a run manifest contributes its ``config`` section."""
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            data = yaml.safe_load(fh)
    except OSError as exc:
        raise StageError(f"cannot read config {path}: {exc.strerror}") from None
    except yaml.YAMLError as exc:
        raise StageError(f"config {path} is not valid YAML/JSON: {exc}") from None
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise StageError(f"config {path} must be a mapping")
    if "subcommand" in data and isinstance(data.get("config"), dict):
        return dict(data["config"])
    return data


def resolve(args: argparse.Namespace, keys: Sequence[str], defaults: dict) -> dict:
    """flag > config file > default, for each key."""
    cfg = load_config_file(getattr(args, "config", None))
    section = cfg.get(args.command.replace("-", "_"), None)
    if isinstance(section, dict):
        cfg = {**{k: v for k, v in cfg.items() if not isinstance(v, dict)}, **section}
    unknown = sorted(set(cfg) - set(keys))
    if unknown:
        raise StageError(f"unknown config keys for {args.command}: {unknown}")
    out = {}
    for k in keys:
        flag = getattr(args, k, None)
        out[k] = flag if flag is not None else cfg.get(k, defaults.get(k))
    return out


def write_manifest(
    path: str | Path,
    command: str,
    config: dict,
    inputs: Sequence[str | Path],
    outputs: Sequence[str | Path],
    started: float,
    seeds: dict | None = None,
) -> Path:
    manifest = {
        "subcommand": command,
        "version": __version__,
        "config": config,
        "seeds": seeds or ({"seed": config["seed"]} if "seed" in config else {}),
        "inputs": {str(p): sha256_file(p) for p in inputs if p is not None and Path(p).is_file()},
        "outputs": {str(p): sha256_file(p) for p in outputs if Path(p).is_file()},
        "started": _utc(started),
        "finished": _utc(time.time()),
    }
    path = Path(path)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def _manifest_path(out: str | Path) -> Path:
    out = Path(out)
    return out / "manifest.json" if out.is_dir() else out.with_name(out.name + ".manifest.json")


def _require(cfg: dict, *keys: str) -> None:
    missing = [k for k in keys if cfg.get(k) in (None, "")]
    if missing:
        raise StageError("missing required setting(s): " + ", ".join("--" + k.replace("_", "-") for k in missing))


def _write_json(path: str | Path, obj: Any) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


# -- subcommands ------------------------------------------------------------------


def cmd_synth(args) -> int:
    from .corpus import SyntheticSpec, dump_dataset, generate_synthetic

    spec_keys = [f.name for f in fields(SyntheticSpec)]
    keys = ["out", *spec_keys]
    # --n is the short name for n_examples
    if args.n is not None:
        args.n_examples = args.n
    cfg = resolve(args, keys, {"seed": 0, "n_examples": 100})
    _require(cfg, "out")
    spec = SyntheticSpec.from_dict({k: cfg[k] for k in spec_keys if cfg[k] is not None})
    started = time.time()
    dump_dataset(generate_synthetic(spec), cfg["out"])
    resolved = {"out": cfg["out"], **asdict(spec)}
    write_manifest(_manifest_path(cfg["out"]), "synth", resolved, [], [cfg["out"]], started)
    return 0


def _load_examples(path):
    from .corpus import load_dataset

    if path is None:
        raise StageError(f"no dataset given (--data or ${DATA_ENV})")
    return load_dataset(path)


def _recognizer(name: str | None, path: str | None):
    from .entities import load_recognizer

    if name in (None, "table") and path is None:
        return None
    return load_recognizer(name or "file", path=path) if path else load_recognizer(name)


def cmd_perturb(args) -> int:
    from .corpus import Vocabulary
    from .model import load_checkpoint
    from .perturb import perturb_corpus

    keys = ["data", "out", "method", "size", "seed", "checkpoint", "top_p", "k_samples",
            "label_scheme", "recognizer", "entities"]
    cfg = resolve(args, keys, {"data": os.environ.get(DATA_ENV), "method": "knowledge", "size": "medium",
                               "seed": 0, "top_p": 0.9, "k_samples": 10, "label_scheme": "prefix",
                               "recognizer": "table"})
    _require(cfg, "out")
    started = time.time()
    examples = _load_examples(cfg["data"])
    model = None
    if cfg["method"] == "model":
        _require(cfg, "checkpoint")
        model = load_checkpoint(cfg["checkpoint"])
        model.eval()
        vocab = model.vocab
    else:
        vocab = Vocabulary.from_examples(examples)
    store = perturb_corpus(
        examples, cfg["method"], cfg["size"], vocab=vocab, seed=cfg["seed"],
        recognizer=_recognizer(cfg["recognizer"], cfg["entities"]), model=model,
        top_p=cfg["top_p"], k_samples=cfg["k_samples"], label_scheme=cfg["label_scheme"],
    )
    store.write(cfg["out"])
    log.info("%d perturbations for %d examples, %d excluded", store.total(), len(examples), len(store.excluded))
    write_manifest(_manifest_path(cfg["out"]), "perturb", cfg,
                   [cfg["data"], cfg["checkpoint"], cfg["entities"]], [cfg["out"]], started)
    return 0


def _train_keys():
    from .trainer import TrainConfig

    return [f.name for f in fields(TrainConfig) if f.name not in ("mode", "checkpoint_dir")]


def _train_config(cfg: dict, mode: str, out_dir: str):
    from .trainer import TrainConfig

    values = {k: cfg[k] for k in _train_keys() if cfg.get(k) is not None}
    try:
        return TrainConfig(mode=mode, checkpoint_dir=out_dir, **values)
    except (TypeError, ValueError) as exc:
        raise StageError(str(exc)) from None


def _settings(tc) -> dict:
    """Training settings as accepted back by ``--config`` (mode and out dir are implied)."""
    return {k: v for k, v in asdict(tc).items() if k not in ("mode", "checkpoint_dir")}


def _final_checkpoint(result, path: Path, tc) -> None:
    """Copy the last epoch checkpoint to a stable name (or save the model if no epoch ran)."""
    from .model import save_checkpoint

    if result.checkpoints:
        path.write_bytes(Path(result.checkpoints[-1]).read_bytes())
    else:
        path.parent.mkdir(parents=True, exist_ok=True)
        save_checkpoint(result.model, path, extra={"train_config": _settings(tc) | {"mode": tc.mode}, "epoch": 0})


def cmd_train_warmup(args) -> int:
    from .corpus import Vocabulary
    from .trainer import warmup_finetune

    keys = ["data", "out_dir", *_train_keys()]
    cfg = resolve(args, keys, {"data": os.environ.get(DATA_ENV)})
    _require(cfg, "out_dir")
    started = time.time()
    examples = _load_examples(cfg["data"])
    tc = _train_config(cfg, "warmup", cfg["out_dir"])
    vocab = Vocabulary.from_examples(examples)
    result = warmup_finetune(None, examples, vocab, tc)
    out = Path(cfg["out_dir"])
    final = out / "warmup.ckpt"
    _final_checkpoint(result, final, tc)
    resolved = {"data": cfg["data"], "out_dir": cfg["out_dir"], **_settings(tc)}
    outputs = [*result.checkpoints, final, out / "warmup-log.jsonl"]
    write_manifest(out / "manifest.json", "train-warmup", resolved, [cfg["data"]], outputs, started)
    return 0


def cmd_train_r2d2(args) -> int:
    from .perturb import PerturbationStore
    from .model import read_checkpoint, _vocab_from
    from .trainer import r2d2_finetune

    keys = ["data", "out_dir", "warmup", "perturbations", "heldout", "heldout_perturbations", *_train_keys()]
    cfg = resolve(args, keys, {"data": os.environ.get(DATA_ENV)})
    _require(cfg, "out_dir", "warmup", "perturbations")
    started = time.time()
    examples = _load_examples(cfg["data"])
    tc = _train_config(cfg, "r2d2", cfg["out_dir"])
    header, _ = read_checkpoint(cfg["warmup"])
    vocab = _vocab_from(header["vocab"])
    store = PerturbationStore.read(cfg["perturbations"], vocab)
    heldout = held_store = None
    if cfg["heldout"]:
        _require(cfg, "heldout_perturbations")
        heldout = _load_examples(cfg["heldout"])
        held_store = PerturbationStore.read(cfg["heldout_perturbations"], vocab)
    result = r2d2_finetune(cfg["warmup"], examples, store, tc, vocab, heldout, held_store)
    out = Path(cfg["out_dir"])
    final = out / "r2d2.ckpt"
    _final_checkpoint(result, final, tc)
    outputs = [*result.checkpoints, final, out / "r2d2-log.jsonl"]
    if result.heldout:
        _write_json(out / "heldout.json", result.heldout)
        outputs.append(out / "heldout.json")
    resolved = {k: cfg[k] for k in ("data", "out_dir", "warmup", "perturbations", "heldout",
                                    "heldout_perturbations")}
    resolved.update(_settings(tc))
    inputs = [cfg["data"], cfg["warmup"], cfg["perturbations"], cfg["heldout"], cfg["heldout_perturbations"]]
    write_manifest(out / "manifest.json", "train-r2d2", resolved, inputs, outputs, started)
    return 0


def read_predictions(path: str | Path) -> list[str]:
    """One prediction per line: plain text or a JSON object with a ``prediction`` field."""
    preds = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if line.startswith("{"):
                try:
                    rec = json.loads(line)
                except json.JSONDecodeError:
                    rec = None
                if isinstance(rec, dict) and "prediction" in rec:
                    preds.append(str(rec["prediction"]))
                    continue
            preds.append(line)
    return preds


def cmd_evaluate(args) -> int:
    from .corpus import Vocabulary
    from .metrics import corpus_bleu, corpus_ner_metrics
    from .model import load_checkpoint
    from .trainer import generate

    keys = ["data", "pred", "checkpoint", "metrics", "out", "dump", "averaging", "recognizer", "entities"]
    cfg = resolve(args, keys, {"data": os.environ.get(DATA_ENV), "metrics": "ner,bleu",
                               "averaging": "micro", "recognizer": "table"})
    _require(cfg, "out")
    if (cfg["pred"] is None) == (cfg["checkpoint"] is None):
        raise StageError("give exactly one of --pred or --checkpoint")
    metrics = [m.strip() for m in str(cfg["metrics"]).split(",") if m.strip()]
    bad = sorted(set(metrics) - {"ner", "bleu"})
    if bad:
        raise StageError(f"unknown metrics {bad}; available: ner, bleu")
    started = time.time()
    examples = _load_examples(cfg["data"])
    if cfg["checkpoint"]:
        model = load_checkpoint(cfg["checkpoint"])
        vocab = model.vocab
        preds = generate(model, examples, vocab)
    else:
        preds = read_predictions(cfg["pred"])
        vocab = Vocabulary.from_examples(examples)
    if len(preds) != len(examples):
        raise StageError(f"{len(preds)} predictions for {len(examples)} examples")
    summary: dict[str, Any] = {"n": len(examples)}
    outputs = [cfg["out"]]
    if "bleu" in metrics:
        summary["bleu"] = corpus_bleu(preds, [ex.reference for ex in examples])
    if "ner" in metrics:
        rep = corpus_ner_metrics(examples, preds, _recognizer(cfg["recognizer"], cfg["entities"]),
                                 averaging=cfg["averaging"], vocab=vocab)
        summary.update(rep.as_dict())
        if cfg["dump"]:
            with open(cfg["dump"], "w", encoding="utf-8", newline="\n") as fh:
                for ex, p, ev in zip(examples, preds, rep.evidence):
                    fh.write(json.dumps({"table_id": ex.table_id, "prediction": p, "reference": ex.reference,
                                         "entities": ev}, ensure_ascii=False, sort_keys=True) + "\n")
            outputs.append(cfg["dump"])
    _write_json(cfg["out"], summary)
    write_manifest(_manifest_path(cfg["out"]), "evaluate", cfg,
                   [cfg["data"], cfg["pred"], cfg["checkpoint"], cfg["entities"]], outputs, started)
    return 0


def _percentages(value) -> tuple[float, ...]:
    if isinstance(value, (list, tuple)):
        return tuple(float(v) for v in value)
    try:
        return tuple(float(v) for v in str(value).split(",") if v.strip())
    except ValueError:
        raise StageError(f"--percent must be a comma-separated list of numbers, got '{value}'") from None


def cmd_contaminate(args) -> int:
    from .contamination import ContaminationPlan, run_contamination

    keys = ["data", "out", "percent", "seed", "recognizer", "entities"]
    cfg = resolve(args, keys, {"data": os.environ.get(DATA_ENV), "percent": "0,25,50,75,100", "seed": 0,
                               "recognizer": "table"})
    _require(cfg, "out")
    started = time.time()
    examples = _load_examples(cfg["data"])
    plan = ContaminationPlan(_percentages(cfg["percent"]), int(cfg["seed"]))
    table = run_contamination(examples, plan, recognizer=_recognizer(cfg["recognizer"], cfg["entities"]))
    table.write(cfg["out"])
    print(table.format())
    cfg["percent"] = ",".join(f"{p:g}" for p in plan.percentages)
    write_manifest(_manifest_path(cfg["out"]), "contaminate", cfg, [cfg["data"], cfg["entities"]],
                   [cfg["out"]], started)
    return 0


def cmd_report(args) -> int:
    from .metrics import correlation_report

    keys = ["evals", "out", "scatter"]
    cfg = resolve(args, keys, {})
    _require(cfg, "evals", "out")
    started = time.time()
    systems, inputs = [], []
    for item in cfg["evals"]:
        name, _, path = str(item).partition("=")
        if not path:
            name, path = Path(item).stem, item
        try:
            with open(path, encoding="utf-8") as fh:
                summary = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise StageError(f"cannot read evaluation summary {path}: {exc}") from None
        systems.append((name, summary))
        inputs.append(path)
    metric_names = [k for k in ("bleu", "rc", "ri", "rm", "mi", "mm") if all(k in s for _, s in systems)]
    rows = [{"system": n, **{k: s[k] for k in metric_names}} for n, s in systems]
    series = {k: [s[k] for _, s in systems] for k in metric_names}
    corr = correlation_report(series, cfg["scatter"], [n for n, _ in systems]) if len(systems) > 1 else None
    report = {"metrics": metric_names, "rows": rows,
              "correlations": corr.rows() if corr is not None else []}
    _write_json(cfg["out"], report)
    outputs = [cfg["out"]] + ([cfg["scatter"]] if cfg["scatter"] and corr is not None else [])
    write_manifest(_manifest_path(cfg["out"]), "report", cfg, inputs, outputs, started)
    return 0


# -- parser -----------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    """argparse with a one-line usage error (exit 2)."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(2, f"error: {message}\n")


def _train_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("training")
    g.add_argument("--epochs", type=int)
    g.add_argument("--batch-size", dest="batch_size", type=int)
    g.add_argument("--lr", type=float)
    g.add_argument("--optimizer", choices=["adam", "adamw", "adafactor"])
    g.add_argument("--max-grad-norm", dest="max_grad_norm", type=float)
    g.add_argument("--seed", type=int)
    g.add_argument("--token-reduction", dest="token_reduction", choices=["sum", "mean"])
    m = p.add_argument_group("generator shape (used when training from scratch)")
    m.add_argument("--d-model", dest="d_model", type=int)
    m.add_argument("--n-heads", dest="n_heads", type=int)
    m.add_argument("--enc-layers", dest="enc_layers", type=int)
    m.add_argument("--dec-layers", dest="dec_layers", type=int)
    m.add_argument("--d-ff", dest="d_ff", type=int)
    m.add_argument("--dropout", type=float)
    m.add_argument("--dtype", choices=["float32", "float64"])
    m.add_argument("--no-copy", dest="copy", action="store_const", const=False,
                   help="disable the copy (pointer) distribution")
    # r2d2-only fields; warmup accepts and ignores them via TrainConfig
    r = p.add_argument_group("r2d2")
    r.add_argument("--lam", type=float, help="weight of generation losses, in [0, 1]")
    r.add_argument("--discrimination", choices=["none", "sentence", "token"])
    r.add_argument("--unlikelihood", dest="unlikelihood", action="store_const", const=True)
    r.add_argument("--no-unlikelihood", dest="unlikelihood", action="store_const", const=False)
    r.add_argument("--method", choices=["knowledge", "model"], help="recorded with the run")
    r.add_argument("--size", choices=["xsmall", "small", "medium", "large", "full"])
    r.add_argument("--detach-heads", dest="detach_heads", action="store_const", const=True)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="faithd2t", description="Faithful data-to-text training and evaluation pipeline.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, help_):
        p = sub.add_parser(name, help=help_, description=help_)
        p.add_argument("--config", help="YAML/JSON config file or a previous run manifest")
        return p

    p = add("synth", "Generate a seeded synthetic table/question/answer corpus.")
    p.add_argument("--out", help="output dataset (JSONL)")
    p.add_argument("--seed", type=int)
    p.add_argument("--n", type=int, help="number of examples")
    p.add_argument("--n-examples", dest="n_examples", type=int, help=argparse.SUPPRESS)
    p.add_argument("--min-rows", dest="min_rows", type=int)
    p.add_argument("--max-rows", dest="max_rows", type=int)
    p.add_argument("--n-columns", dest="n_columns", type=int)
    p.add_argument("--n-first-names", dest="n_first_names", type=int)
    p.add_argument("--n-last-names", dest="n_last_names", type=int)
    p.add_argument("--n-countries", dest="n_countries", type=int)
    p.add_argument("--n-events", dest="n_events", type=int)
    p.set_defaults(func=cmd_synth, year_range=None, templates=None)

    p = add("perturb", "Build contradictory sentences by entity replacement.")
    p.add_argument("--data", help=f"dataset (default ${DATA_ENV})")
    p.add_argument("--out", help="output perturbation file (JSONL)")
    p.add_argument("--method", choices=["knowledge", "model"])
    p.add_argument("--size", choices=["xsmall", "small", "medium", "large", "full"])
    p.add_argument("--seed", type=int)
    p.add_argument("--checkpoint", help="generator checkpoint (model-based method)")
    p.add_argument("--top-p", dest="top_p", type=float)
    p.add_argument("--k-samples", dest="k_samples", type=int)
    p.add_argument("--label-scheme", dest="label_scheme", choices=["prefix", "replaced"])
    p.add_argument("--recognizer", help="registered recognizer name (default: table)")
    p.add_argument("--entities", help="pre-extracted entity file for the 'file' recognizer")
    p.set_defaults(func=cmd_perturb)

    p = add("train-warmup", "Likelihood-only fine-tuning of a fresh generator.")
    p.add_argument("--data", help=f"training dataset (default ${DATA_ENV})")
    p.add_argument("--out-dir", dest="out_dir", help="checkpoint/log directory")
    _train_flags(p)
    p.set_defaults(func=cmd_train_warmup)

    p = add("train-r2d2", "Fine-tune a warmed-up generator with detection and unlikelihood losses.")
    p.add_argument("--data", help=f"training dataset (default ${DATA_ENV})")
    p.add_argument("--out-dir", dest="out_dir", help="checkpoint/log directory")
    p.add_argument("--warmup", help="warmup checkpoint")
    p.add_argument("--perturbations", help="perturbation file for --data")
    p.add_argument("--heldout", help="held-out dataset for per-epoch AUC")
    p.add_argument("--heldout-perturbations", dest="heldout_perturbations")
    _train_flags(p)
    p.set_defaults(func=cmd_train_r2d2)

    p = add("evaluate", "Score predictions (or a checkpoint's greedy outputs) with entity metrics and BLEU.")
    p.add_argument("--data", help=f"dataset with references (default ${DATA_ENV})")
    p.add_argument("--pred", help="predictions, one per line (text or JSON with 'prediction')")
    p.add_argument("--checkpoint", help="generate predictions from this checkpoint instead")
    p.add_argument("--metrics", help="comma-separated subset of ner,bleu")
    p.add_argument("--averaging", choices=["micro", "macro"])
    p.add_argument("--out", help="summary file (JSON)")
    p.add_argument("--dump", help="per-example entity evidence (JSONL)")
    p.add_argument("--recognizer")
    p.add_argument("--entities")
    p.set_defaults(func=cmd_evaluate)

    p = add("contaminate", "Reliability table of metrics under controlled reference contamination.")
    p.add_argument("--data", help=f"dataset (default ${DATA_ENV})")
    p.add_argument("--out", help="reliability table (JSON)")
    p.add_argument("--percent", help="comma-separated percentages, e.g. 0,25,50,75,100")
    p.add_argument("--seed", type=int)
    p.add_argument("--recognizer")
    p.add_argument("--entities")
    p.set_defaults(func=cmd_contaminate)

    p = add("report", "Combine evaluation summaries into one table with metric correlations.")
    p.add_argument("--eval", dest="evals", action="append", metavar="[NAME=]FILE",
                   help="evaluation summary; repeatable")
    p.add_argument("--out", help="report file (JSON)")
    p.add_argument("--scatter", help="line-delimited (variant, metric, value) points")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (StageError, ValueError, KeyError, OSError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        text = " ".join(str(msg).split()) or type(exc).__name__
        print(f"error: {args.command}: {text}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
