"""Command-line entry point: gen, train, eval, ablate, analyze, budget."""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from . import analysis
from . import tensor as T
from .adaptation import AblationMode, AdaptationBank, build_masks, locate_special_tokens
from .taskgen import Dataset, gen_seq_task, gen_tok_task
from .training import ClassifierHead, HeadKind, TrainConfig, dev_metric_name, evaluate, train
from .transformer import ModelConfig, forward, init_model, load_model, save_model, toy_config

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_MISSING_FILE = 3
EXIT_CONFIG = 4

EXIT_CODES_HELP = f"""exit codes:
  {EXIT_OK}  success
  {EXIT_FAILURE}  unexpected failure
  {EXIT_USAGE}  usage error (unknown flag, bad value, missing argument)
  {EXIT_MISSING_FILE}  an input file or directory does not exist
  {EXIT_CONFIG}  configuration or data violates a constraint (e.g. too many special tokens for P)

errors are printed to stderr as one JSON line: {{"error": ..., "kind": ..., "exit_code": ...}}"""

MANIFEST_NAME = "manifest.json"


class CliError(Exception):
    def __init__(self, message: str, kind: str, code: int):
        super().__init__(message)
        self.kind = kind
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(message, "usage", EXIT_USAGE)


# ---------------------------------------------------------------- manifests

def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int | None
    inputs: list[str] = field(default_factory=list)
    outputs: list[str] = field(default_factory=list)
    wall_time_s: float = 0.0
    metrics: dict = field(default_factory=dict)
    directory: Path | None = None  # where manifest.json lands

    def to_dict(self) -> dict:
        return {
            "command": self.command,
            "config_hash": config_hash(self.config),
            "config": self.config,
            "seed": self.seed,
            "inputs": self.inputs,
            "outputs": self.outputs,
            "wall_time_s": round(self.wall_time_s, 3),
            "metrics": self.metrics,
        }

    def write(self) -> Path:
        self.directory.mkdir(parents=True, exist_ok=True)
        path = self.directory / MANIFEST_NAME
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path


# ---------------------------------------------------------------- helpers

def _resolve(args: argparse.Namespace, defaults: dict) -> dict:
    """defaults < --config file < flags given on the command line."""
    merged = dict(defaults)
    if getattr(args, "config", None):
        path = _existing(args.config)
        try:
            loaded = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise CliError(f"{path}: not valid JSON ({e.msg})", "config", EXIT_CONFIG) from e
        if not isinstance(loaded, dict):
            raise CliError(f"{path}: expected a JSON object", "config", EXIT_CONFIG)
        unknown = sorted(set(loaded) - set(defaults))
        if unknown:
            raise CliError(f"{path}: unknown config keys {unknown}", "config", EXIT_CONFIG)
        merged.update(loaded)
    for key in defaults:
        value = getattr(args, key, None)
        if value is not None:
            merged[key] = value
    return merged


def _existing(path: str | Path) -> Path:
    p = Path(path)
    if not p.exists():
        raise CliError(f"no such file or directory: {p}", "missing_file", EXIT_MISSING_FILE)
    return p


def _load_dataset(path: str) -> Dataset:
    directory = _existing(path)
    for name in ("dataset.json", "train.jsonl", "dev.jsonl"):
        _existing(directory / name)
    return Dataset.load(directory)


def _head_kind(dataset: Dataset) -> HeadKind:
    return HeadKind.TOKEN if dataset.task == "tok" else HeadKind.SEQUENCE


def _backbone(cfg: dict, dataset: Dataset):
    if cfg.get("model"):
        weights, model_config = load_model(_existing(cfg["model"]))
    else:
        model_config = toy_config(dataset.vocab.size, seed=cfg["seed"], max_len=cfg["max_len"])
        weights = init_model(model_config)
    if model_config.vocab_size < dataset.vocab.size:
        raise CliError(f"model vocab {model_config.vocab_size} is smaller than dataset vocab {dataset.vocab.size}",
                       "config", EXIT_CONFIG)
    return weights, model_config


TRAIN_DEFAULTS = {
    "data": None, "out": None, "model": None, "mode": AblationMode.FULL.value, "lr": 5e-3, "epochs": 50,
    "batch_size": 32, "weight_decay": 0.0, "seed": 42, "max_len": 128, "slots": 2, "max_steps": None,
}


def _train_one(cfg: dict, mode: str, out_dir: Path) -> dict:
    """Train a single mode and write its artifacts; returns the final metrics."""
    dataset = _load_dataset(cfg["data"])
    weights, model_config = _backbone(cfg, dataset)
    bank = AdaptationBank(model_config.num_layers, cfg["slots"], model_config.hidden_size, AblationMode(mode),
                          seed=cfg["seed"])
    head = ClassifierHead.create(_head_kind(dataset), model_config.hidden_size, dataset.num_classes,
                                 seed=cfg["seed"])
    tc = TrainConfig(learning_rate=cfg["lr"], batch_size=cfg["batch_size"], epochs=cfg["epochs"],
                     weight_decay=cfg["weight_decay"], seed=cfg["seed"], max_len=cfg["max_len"],
                     max_steps=cfg["max_steps"])
    artifact = train(weights, model_config, bank, head, dataset, tc)
    artifact.save(out_dir)
    save_model(out_dir / "model", weights, model_config)
    run_config = {k: v for k, v in cfg.items() if k not in ("out", "config")}
    run_config["mode"] = mode
    (out_dir / "run_config.json").write_text(json.dumps(run_config, indent=2, sort_keys=True) + "\n")
    metric = dev_metric_name(head.kind)
    final = artifact.history[-1].dev_metric if artifact.history else evaluate(
        weights, model_config, bank, head, dataset.dev, dataset.special_spec(cfg["slots"]),
        dataset.vocab.pad_id, max_len=cfg["max_len"])[metric]
    return {"mode": mode, "metric": metric, "dev": final, "steps": artifact.steps,
            "trainable": bank.num_parameters() + head.num_parameters()}


def _artifacts(out_dir: Path) -> list[str]:
    return [str(out_dir / n) for n in ("adaptation.pastaadp", "head", "metrics.csv", "model", "run_config.json")]


def _load_run(run_dir: str | Path):
    run = _existing(run_dir)
    for name in ("adaptation.pastaadp", "head", "model", "run_config.json"):
        _existing(run / name)
    weights, model_config = load_model(run / "model")
    bank = AdaptationBank.load(run / "adaptation.pastaadp")
    head = ClassifierHead.load(run / "head")
    run_config = json.loads((run / "run_config.json").read_text())
    return weights, model_config, bank, head, run_config


# ---------------------------------------------------------------- commands

GEN_DEFAULTS = {"task": "seq", "out": None, "seed": 42, "n": 4000, "seq_len": 12, "num_classes": 2,
                "difficulty": 1, "num_entity_types": 2, "vocab_size": None, "max_len": 128}


def cmd_gen(args) -> tuple[RunManifest, str]:
    cfg = _resolve(args, GEN_DEFAULTS)
    if not cfg["out"]:
        raise CliError("--out is required", "usage", EXIT_USAGE)
    if cfg["task"] == "seq":
        ds = gen_seq_task(cfg["seed"], cfg["n"], cfg["seq_len"], cfg["num_classes"], cfg["difficulty"],
                          vocab_size=cfg["vocab_size"] or 256, max_len=cfg["max_len"])
    elif cfg["task"] == "tok":
        ds = gen_tok_task(cfg["seed"], cfg["n"], cfg["seq_len"], cfg["num_entity_types"],
                          vocab_size=cfg["vocab_size"] or 64, max_len=cfg["max_len"])
    else:
        raise CliError(f"unknown task {cfg['task']!r}; expected seq or tok", "config", EXIT_CONFIG)
    out = Path(cfg["out"])
    ds.save(out)
    counts = {"train": len(ds.train), "dev": len(ds.dev)}
    manifest = RunManifest("gen", cfg, cfg["seed"], [], [str(out / n) for n in ("train.jsonl", "dev.jsonl",
                                                                                 "dataset.json")],
                           metrics=counts, directory=out)
    return manifest, f"wrote {counts['train']} train / {counts['dev']} dev examples to {out}"


def cmd_train(args) -> tuple[RunManifest, str]:
    cfg = _resolve(args, TRAIN_DEFAULTS)
    for key in ("data", "out"):
        if not cfg[key]:
            raise CliError(f"--{key} is required", "usage", EXIT_USAGE)
    out = Path(cfg["out"])
    result = _train_one(cfg, cfg["mode"], out)
    manifest = RunManifest("train", cfg, cfg["seed"], [cfg["data"]] + ([cfg["model"]] if cfg["model"] else []),
                           _artifacts(out), metrics=result, directory=out)
    return manifest, f"{result['mode']}: dev {result['metric']} {result['dev']:.4f} after {result['steps']} steps"


EVAL_DEFAULTS = {"run": None, "data": None, "split": "dev", "out": None, "batch_size": 64}


def cmd_eval(args) -> tuple[RunManifest, str]:
    cfg = _resolve(args, EVAL_DEFAULTS)
    for key in ("run", "data"):
        if not cfg[key]:
            raise CliError(f"--{key} is required", "usage", EXIT_USAGE)
    weights, model_config, bank, head, run_config = _load_run(cfg["run"])
    dataset = _load_dataset(cfg["data"])
    if cfg["split"] not in ("train", "dev"):
        raise CliError(f"unknown split {cfg['split']!r}", "config", EXIT_CONFIG)
    examples = getattr(dataset, cfg["split"])
    metrics = evaluate(weights, model_config, bank, head, examples, dataset.special_spec(bank.num_slots),
                       dataset.vocab.pad_id, batch_size=cfg["batch_size"], max_len=run_config.get("max_len", 128))
    out = Path(cfg["out"] or Path(cfg["run"]) / "eval")
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    manifest = RunManifest("eval", cfg, run_config.get("seed"), [cfg["run"], cfg["data"]], [str(out / "metrics.json")],
                           metrics=metrics, directory=out)
    return manifest, json.dumps(metrics, sort_keys=True)


def _ablate_worker(job: tuple[dict, str, str]) -> dict:
    cfg, mode, out = job
    return _train_one(cfg, mode, Path(out))


def ablation_table(rows: Sequence[dict]) -> str:
    widths = (max(len("mode"), *(len(AblationMode(r["mode"]).label) for r in rows)), 9, 10)
    lines = [f"{'mode'.ljust(widths[0])}  {'trainable'.rjust(widths[1])}  {'dev'.rjust(widths[2])}"]
    for r in rows:
        lines.append(f"{AblationMode(r['mode']).label.ljust(widths[0])}  {str(r['trainable']).rjust(widths[1])}  "
                     f"{100 * r['dev']:>{widths[2]}.2f}")
    return "\n".join(lines) + "\n"


def cmd_ablate(args) -> tuple[RunManifest, str]:
    cfg = _resolve(args, {**TRAIN_DEFAULTS, "jobs": 1})
    for key in ("data", "out"):
        if not cfg[key]:
            raise CliError(f"--{key} is required", "usage", EXIT_USAGE)
    _load_dataset(cfg["data"])  # fail fast before spawning workers
    out = Path(cfg["out"])
    modes = [m.value for m in AblationMode]
    base = {k: v for k, v in cfg.items() if k != "jobs"}
    jobs = [(base, m, str(out / m)) for m in modes]
    if cfg["jobs"] > 1:
        with ProcessPoolExecutor(max_workers=cfg["jobs"]) as pool:
            rows = list(pool.map(_ablate_worker, jobs))
    else:
        rows = [_ablate_worker(j) for j in jobs]
    out.mkdir(parents=True, exist_ok=True)
    csv_lines = ["mode,trainable,dev_metric"] + [f"{r['mode']},{r['trainable']},{r['dev']:.10f}" for r in rows]
    (out / "ablation.csv").write_text("\n".join(csv_lines) + "\n")
    table = ablation_table(rows)
    (out / "ablation.txt").write_text(table)
    outputs = [str(out / "ablation.csv"), str(out / "ablation.txt")] + [str(out / m) for m in modes]
    manifest = RunManifest("ablate", cfg, cfg["seed"], [cfg["data"]], outputs,
                           metrics={r["mode"]: r["dev"] for r in rows} | {"metric": rows[0]["metric"]},
                           directory=out)
    return manifest, table.rstrip("\n")


ANALYZE_DEFAULTS = {"run": None, "data": None, "out": None, "split": "dev", "index": 0, "num_sequences": 1,
                    "svg": False}


def cmd_analyze(args) -> tuple[RunManifest, str]:
    cfg = _resolve(args, ANALYZE_DEFAULTS)
    for key in ("run", "data"):
        if not cfg[key]:
            raise CliError(f"--{key} is required", "usage", EXIT_USAGE)
    weights, model_config, bank, head, run_config = _load_run(cfg["run"])
    dataset = _load_dataset(cfg["data"])
    examples = getattr(dataset, cfg["split"])
    start, count = cfg["index"], cfg["num_sequences"]
    if count < 1 or start < 0 or start + count > len(examples):
        raise CliError(f"sequences [{start}, {start + count}) fall outside the {cfg['split']} split "
                       f"of {len(examples)}", "config", EXIT_CONFIG)
    spec = dataset.special_spec(bank.num_slots)
    traces, positions = [], []
    with T.no_grad():
        for ex in examples[start:start + count]:
            locs = locate_special_tokens(ex.token_ids, spec)
            masks = build_masks(locs, bank, len(ex.token_ids), model_config.num_layers, model_config.hidden_size)
            traces.append(forward(weights, model_config, ex.token_ids, masks))
            positions.append(analysis.special_targets(ex.token_ids, dataset.vocab.cls_id, dataset.vocab.sep_id))
    if count == 1:
        report = analysis.detect_vertical_heads(traces[0], positions[0])
    else:
        report = analysis.detect_vertical_heads_batch(traces, positions)
    nm = analysis.norm_map(bank)
    out = Path(cfg["out"] or Path(cfg["run"]) / "analysis")
    out.mkdir(parents=True, exist_ok=True)
    (out / "vertical_heads.csv").write_text(report.to_csv())
    (out / "norm_map.csv").write_text(nm.to_csv())
    (out / "summary.txt").write_text(report.count_line() + "\n")
    outputs = [str(out / n) for n in ("vertical_heads.csv", "norm_map.csv", "summary.txt")]
    if cfg["svg"]:
        (out / "vertical_heads.svg").write_text(analysis.vertical_heads_svg(report))
        (out / "norm_map.svg").write_text(analysis.norm_map_svg(nm))
        outputs += [str(out / "vertical_heads.svg"), str(out / "norm_map.svg")]
    metrics = {"vertical": report.num_vertical, "heads": len(report.heads), "batch_averaged": report.batch_averaged,
               "max_norm": float(nm.matrix.max()) if nm.matrix.size else 0.0}
    manifest = RunManifest("analyze", cfg, run_config.get("seed"), [cfg["run"], cfg["data"]], outputs,
                           metrics=metrics, directory=out)
    return manifest, report.count_line()


BUDGET_DEFAULTS = {"L": 24, "d": 1024, "m": None, "P": 2, "T": 20, "r": 64, "backbone_total": None,
                   "out": None}


def cmd_budget(args) -> tuple[RunManifest | None, str]:
    cfg = _resolve(args, BUDGET_DEFAULTS)
    d = cfg["d"]
    model_config = ModelConfig(num_layers=cfg["L"], hidden_size=d, num_heads=1, ffn_size=cfg["m"] or 4 * d)
    budgets = analysis.param_budget(model_config, r=cfg["r"], T=cfg["T"], P=cfg["P"])
    table = analysis.budget_table(budgets, cfg["backbone_total"])
    metrics = {b.method: b.count for b in budgets}
    manifest = None
    if cfg["out"]:
        out = Path(cfg["out"])
        out.mkdir(parents=True, exist_ok=True)
        (out / "budget.txt").write_text(table)
        manifest = RunManifest("budget", cfg, None, [], [str(out / "budget.txt")], metrics=metrics,
                               directory=out)
    return manifest, table.rstrip("\n")


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pastakit", description="Special-token adaptation experiments on a frozen toy encoder.",
                     epilog=EXIT_CODES_HELP, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text, epilog=EXIT_CODES_HELP,
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        p.add_argument("--config", help="JSON file of option values; explicit flags override it")
        return p

    p = add("gen", "generate a synthetic dataset (train.jsonl, dev.jsonl, dataset.json)")
    p.add_argument("--task", choices=["seq", "tok"], help="sequence or token classification (default seq)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int, help="generator seed (default 42)")
    p.add_argument("--n", type=int, help="number of examples (default 4000)")
    p.add_argument("--seq-len", dest="seq_len", type=int, help="content tokens per example (default 12)")
    p.add_argument("--num-classes", dest="num_classes", type=int, help="seq task classes (default 2)")
    p.add_argument("--difficulty", type=int, help="seq task: up to 2*difficulty+1 planted keys (default 1)")
    p.add_argument("--num-entity-types", dest="num_entity_types", type=int, help="tok task entity types (default 2)")
    p.add_argument("--vocab-size", dest="vocab_size", type=int, help="vocabulary size (default 256 seq, 64 tok)")
    p.add_argument("--max-len", dest="max_len", type=int, help="maximum sequence length (default 128)")

    def training_flags(p):
        p.add_argument("--data", help="dataset directory written by gen")
        p.add_argument("--out", help="output directory")
        p.add_argument("--model", help="saved backbone directory (default: fresh seeded toy backbone)")
        p.add_argument("--lr", type=float, help="AdamW learning rate (default 5e-3)")
        p.add_argument("--epochs", type=int, help="training epochs (default 50)")
        p.add_argument("--batch-size", dest="batch_size", type=int, help="batch size (default 32)")
        p.add_argument("--weight-decay", dest="weight_decay", type=float, help="decoupled weight decay (default 0)")
        p.add_argument("--seed", type=int, help="seed for backbone, head init and shuffling (default 42)")
        p.add_argument("--max-len", dest="max_len", type=int, help="maximum sequence length (default 128)")
        p.add_argument("--slots", type=int, help="special-token slots P per layer (default 2)")
        p.add_argument("--max-steps", dest="max_steps", type=int, help="stop after this many optimizer steps")

    p = add("train", "train adaptation vectors and a classifier head on a frozen backbone")
    training_flags(p)
    p.add_argument("--mode", choices=[m.value for m in AblationMode], help="which vectors to train (default full)")

    p = add("eval", "evaluate a trained run on a dataset split")
    p.add_argument("--run", help="run directory written by train")
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--split", choices=["train", "dev"], help="split to score (default dev)")
    p.add_argument("--out", help="output directory (default RUN/eval)")
    p.add_argument("--batch-size", dest="batch_size", type=int, help="evaluation batch size (default 64)")

    p = add("ablate", "train all five modes and print a comparison table")
    training_flags(p)
    p.add_argument("--jobs", type=int, help="parallel worker processes (default 1)")

    p = add("analyze", "vertical-head report and adaptation norm map for a trained run")
    p.add_argument("--run", help="run directory written by train")
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--out", help="output directory (default RUN/analysis)")
    p.add_argument("--split", choices=["train", "dev"], help="split to draw sequences from (default dev)")
    p.add_argument("--index", type=int, help="first sequence to analyze (default 0)")
    p.add_argument("--num-sequences", dest="num_sequences", type=int,
                   help="sequences to average over (default 1, a single sample)")
    p.add_argument("--svg", action="store_const", const=True, help="also write SVG heatmaps")

    p = add("budget", "trainable-parameter comparison across methods")
    p.add_argument("--L", type=int, help="layers (default 24)")
    p.add_argument("--d", type=int, help="hidden size (default 1024)")
    p.add_argument("--m", type=int, help="FFN intermediate size (default 4*d)")
    p.add_argument("--P", type=int, help="special-token slots (default 2)")
    p.add_argument("--T", type=int, help="prompt length for P-tuning v2 (default 20)")
    p.add_argument("--r", type=int, help="adapter bottleneck size (default 64)")
    p.add_argument("--backbone-total", dest="backbone_total", type=int,
                   help="backbone parameter count; adds a fraction column")
    p.add_argument("--out", help="also write budget.txt and a manifest here")
    return parser


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate, "analyze": cmd_analyze,
            "budget": cmd_budget}


def _fail(message: str, kind: str, code: int) -> int:
    print(json.dumps({"error": message, "kind": kind, "exit_code": code}), file=sys.stderr)
    return code


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            raise CliError("a command is required", "usage", EXIT_USAGE)
        if args.verbose:
            logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
        started = time.perf_counter()
        manifest, summary = COMMANDS[args.command](args)
        if manifest is not None:
            manifest.wall_time_s = time.perf_counter() - started
            manifest.write()
        print(summary)
        return EXIT_OK
    except CliError as e:
        return _fail(str(e), e.kind, e.code)
    except FileNotFoundError as e:
        return _fail(str(e), "missing_file", EXIT_MISSING_FILE)
    except ValueError as e:  # includes ShapeError and CapacityError
        return _fail(str(e), "config", EXIT_CONFIG)
    except Exception as e:  # noqa: BLE001
        return _fail(f"{type(e).__name__}: {e}", "failure", EXIT_FAILURE)


if __name__ == "__main__":
    sys.exit(main())
