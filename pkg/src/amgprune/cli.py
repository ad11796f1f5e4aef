"""Command-line pipeline: train, calibrate, prune, finetune, report, export-attn.

Settings come from built-in defaults, then an optional flat ``key = value``
config file, then command-line flags (highest precedence). Every command
writes into ``<out-dir>/<command>-seed<seed>-<hash>/``, where the hash
covers the settings the command uses plus the hashes of its input
checkpoints, and lists each artifact's sha256 in ``manifest.json``.
Timestamps live only in the manifest's ``timestamps`` field, so all other
outputs are byte-identical across reruns.

Exit codes: 0 success, 1 other package error, 2 usage or config error,
3 infeasible pruning plan, 4 training divergence.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__, checkpoint
from . import criteria as C
from .cost import analytical_cost, instrumented_cost
from .data import SyntheticDataset, load_npz
from .engine import PruneConfig, prune, weight_scores
from .errors import AmgError, CheckpointError, ConfigError, ContractError, DivergenceError, InfeasiblePlanError
from .train import TrainConfig, accuracy, finetune, train
from .vit import ModelSpec, VitModel

log = logging.getLogger("amgprune")

EXIT_OK, EXIT_ERROR, EXIT_USAGE, EXIT_INFEASIBLE, EXIT_DIVERGED = 0, 1, 2, 3, 4

# key -> (type, default)
SETTINGS: dict[str, tuple[type, object]] = {
    "seed": (int, 0),
    # model
    "image_size": (int, 16),
    "patch_size": (int, 4),
    "channels": (int, 1),
    "embed_dim": (int, 32),
    "layers": (int, 4),
    "heads": (int, 4),
    "head_dim": (int, 8),
    "mlp_ratio": (float, 2.0),
    "num_classes": (int, 4),
    "init": (str, "fan_in"),
    # data
    "dataset": (str, "synthetic"),
    "train_size": (int, 2048),
    "val_size": (int, 256),
    "calib_size": (int, 128),
    "noise": (float, 0.5),
    "amplitude": (float, 1.0),
    # training from scratch
    "epochs": (int, 50),
    "batch_size": (int, 32),
    "learning_rate": (float, 0.1),
    "weight_decay": (float, 1e-4),
    # calibration and pruning
    "calib_batch_size": (int, 64),
    "head_rate": (float, 0.0),
    "token_rate": (float, 0.0),
    "lambda": (float, 0.0),
    "iterations": (int, 4),
    "criterion": (str, "entropy"),
    "interleave_epochs": (int, 0),
    "probe_size": (int, 4),
    # fine-tuning
    "finetune_epochs": (int, 30),
    "finetune_learning_rate": (float, 1e-4),
    "finetune_weight_decay": (float, 1e-3),
    "alpha": (float, 0.5),
}

_DATA_KEYS = ["dataset", "train_size", "val_size", "calib_size", "noise", "amplitude"]
_MODEL_KEYS = ["image_size", "patch_size", "channels", "embed_dim", "layers", "heads", "head_dim",
               "mlp_ratio", "num_classes", "init"]
_FT_KEYS = ["finetune_epochs", "finetune_learning_rate", "finetune_weight_decay", "alpha", "batch_size"]
COMMAND_KEYS = {
    "train": ["seed", *_MODEL_KEYS, *_DATA_KEYS, "epochs", "batch_size", "learning_rate", "weight_decay"],
    "calibrate": ["seed", "calib_batch_size", "lambda"],
    "prune": ["seed", "calib_batch_size", "head_rate", "token_rate", "lambda", "iterations", "criterion",
              "interleave_epochs", "probe_size", *_FT_KEYS],
    "finetune": ["seed", *_FT_KEYS],
    "report": ["seed", "probe_size"],
    "export-attn": ["seed", "calib_batch_size", "lambda"],
}

# flag dest -> settings key
FLAGS = {
    "seed": ("--seed", int, "random seed"),
    "epochs": ("--epochs", int, "training epochs"),
    "learning_rate": ("--learning-rate", float, "training learning rate"),
    "head_rate": ("--head-rate", float, "fraction of heads to remove"),
    "token_rate": ("--token-rate", float, "fraction of key/value tokens to remove"),
    "lambda": ("--lambda", float, "layer weight coefficient"),
    "iterations": ("--iterations", int, "head pruning iterations"),
    "criterion": ("--criterion", str, "entropy or taylor"),
    "interleave_epochs": ("--interleave-epochs", int, "fine-tune epochs between head iterations"),
    "finetune_epochs": ("--finetune-epochs", int, "fine-tuning epochs"),
    "alpha": ("--alpha", float, "distillation weight"),
}
COMMAND_FLAGS = {
    "train": ["seed", "epochs", "learning_rate"],
    "calibrate": ["seed", "lambda"],
    "prune": ["seed", "head_rate", "token_rate", "lambda", "iterations", "criterion", "interleave_epochs", "alpha"],
    "finetune": ["seed", "finetune_epochs", "alpha"],
    "report": ["seed"],
    "export-attn": ["seed", "lambda"],
}


def _convert(key: str, raw: str, where: str):
    kind = SETTINGS[key][0]
    try:
        return kind(raw)
    except ValueError:
        raise ConfigError(f"{where}: {key} expects {kind.__name__}, got {raw!r}") from None


def read_config(path) -> dict:
    """Parse a flat ``key = value`` file; ``#`` starts a comment."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    out = {}
    for n, line in enumerate(path.read_text().splitlines(), start=1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        where = f"{path}:{n}"
        if "=" not in text:
            raise ConfigError(f"{where}: expected 'key = value', got {text!r}")
        key, raw = (s.strip() for s in text.split("=", 1))
        if key not in SETTINGS:
            raise ConfigError(f"{where}: unknown key {key!r}")
        if key in out:
            raise ConfigError(f"{where}: duplicate key {key!r}")
        out[key] = _convert(key, raw, where)
    return out


def resolve_settings(args) -> dict:
    cfg = {k: v for k, (_, v) in SETTINGS.items()}
    if args.config:
        cfg.update(read_config(args.config))
    for item in args.set or []:
        key, sep, raw = item.partition("=")
        key = key.strip()
        if not sep or key not in SETTINGS:
            raise ConfigError(f"--set {item!r}: expected KEY=VALUE with a known key")
        cfg[key] = _convert(key, raw.strip(), "--set")
    for key in COMMAND_FLAGS[args.command]:
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    return cfg


def _sha(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


class Run:
    """One command invocation: run directory, artifact hashes and the manifest."""

    def __init__(self, command: str, cfg: dict, out_dir, inputs: dict[str, Path]):
        self.command = command
        self.config = {k: cfg[k] for k in COMMAND_KEYS[command]}
        self.inputs = {name: {"path": str(p), "sha256": checkpoint.file_hash(p)} for name, p in inputs.items()}
        key = json.dumps({"command": command, "config": self.config,
                          "inputs": {k: v["sha256"] for k, v in self.inputs.items()}}, sort_keys=True)
        self.dir = Path(out_dir) / f"{command}-seed{cfg['seed']}-{_sha(key.encode())[:12]}"
        self.dir.mkdir(parents=True, exist_ok=True)
        self.artifacts: dict[str, str] = {}
        self.started = datetime.now(timezone.utc).isoformat()

    def write(self, name: str, data: bytes | str) -> Path:
        raw = data.encode("utf-8") if isinstance(data, str) else data
        path = self.dir / name
        path.write_bytes(raw)
        self.artifacts[name] = _sha(raw)
        return path

    def finish(self) -> Path:
        manifest = {
            "format": "amg-run-1",
            "tool": "amgprune",
            "version": __version__,
            "command": self.command,
            "seed": self.config["seed"],
            "config": self.config,
            "inputs": self.inputs,
            "artifacts": dict(sorted(self.artifacts.items())),
            "timestamps": {"started": self.started, "finished": datetime.now(timezone.utc).isoformat()},
        }
        (self.dir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
        return self.dir


def _dataset_meta(cfg: dict) -> dict:
    if cfg["dataset"] == "synthetic":
        ds = SyntheticDataset(image_size=cfg["image_size"], patch_size=cfg["patch_size"], channels=cfg["channels"],
                              num_classes=cfg["num_classes"], train_size=cfg["train_size"], val_size=cfg["val_size"],
                              calib_size=cfg["calib_size"], amplitude=cfg["amplitude"], noise=cfg["noise"],
                              seed=cfg["seed"])
        return {"kind": "synthetic", **ds.to_dict()}
    path = Path(cfg["dataset"])
    if not path.is_file():
        raise ConfigError(f"dataset file not found: {path}")
    return {"kind": "npz", "path": str(path), "sha256": checkpoint.file_hash(path)}


def load_dataset(meta: dict) -> dict:
    if not meta:
        raise ConfigError("checkpoint carries no dataset description")
    if meta["kind"] == "synthetic":
        return SyntheticDataset(**{k: v for k, v in meta.items() if k != "kind"}).generate()
    if checkpoint.file_hash(meta["path"]) != meta["sha256"]:
        raise ConfigError(f"dataset file {meta['path']} changed since the checkpoint was trained")
    return load_npz(meta["path"])


def _load_ckpt(path) -> tuple[VitModel, dict]:
    if not Path(path).is_file():
        raise ConfigError(f"checkpoint not found: {path}")
    return checkpoint.load(path)


def _jsonl(records) -> str:
    return "".join(json.dumps(r) + "\n" for r in records)


def _calib_batches(data: dict, batch_size: int):
    x, y = data["calib"]
    return [(x[i:i + batch_size], y[i:i + batch_size]) for i in range(0, len(x), batch_size)]


def _scores_csv(scores) -> str:
    lines = ["kind,layer,unit,raw,weighted\n"]
    for s in scores:
        unit = s.original_id if s.original_id is not None else s.unit_id
        weighted = "" if s.weighted is None else repr(float(s.weighted))
        lines.append(f"{s.unit_kind},{s.layer},{unit},{float(s.raw)!r},{weighted}\n")
    return "".join(lines)


def _attention_csv(capture, gradients: bool) -> str:
    lines = ["layer,head,row,col,value\n"]
    for layer in sorted(capture.layers):
        maps = capture.gradient(layer) if gradients else capture.attention(layer)
        cols = capture.kv_indices(layer)
        for h in range(maps.shape[0]):
            for r in range(maps.shape[1]):
                lines.extend(f"{layer},{h},{r},{tok},{float(maps[h, r, c])!r}\n" for c, tok in enumerate(cols))
    return "".join(lines)


def _cost_csv(report) -> str:
    layers = report.to_dict()["layers"]
    lines = [",".join(layers[0]) + "\n"]
    lines.extend(",".join("" if v is None else str(v) for v in lc.values()) + "\n" for lc in layers)
    return "".join(lines)


# ---- commands ---------------------------------------------------------------

def cmd_train(args, cfg) -> Path:
    spec = ModelSpec.uniform(image_size=cfg["image_size"], patch_size=cfg["patch_size"], embed_dim=cfg["embed_dim"],
                             layers=cfg["layers"], heads=cfg["heads"], head_dim=cfg["head_dim"],
                             mlp_ratio=cfg["mlp_ratio"], num_classes=cfg["num_classes"], channels=cfg["channels"])
    meta = {"dataset": _dataset_meta(cfg)}
    data = load_dataset(meta["dataset"])
    run = Run("train", cfg, args.out_dir, {})
    model = VitModel.init(spec, seed=cfg["seed"], scheme=cfg["init"])
    tc = TrainConfig(epochs=cfg["epochs"], batch_size=cfg["batch_size"], learning_rate=cfg["learning_rate"],
                     weight_decay=cfg["weight_decay"], alpha=0.0, seed=cfg["seed"])
    records = train(model, tc, data)
    run.write("train_log.jsonl", _jsonl(records))
    run.write("model.ckpt", checkpoint.dumps(model, meta))
    run.write("cost.json", analytical_cost(model.spec).to_json())
    return run.finish()


def _capture(model, data, cfg):
    return C.calibrate(model, _calib_batches(data, cfg["calib_batch_size"]))


def cmd_calibrate(args, cfg) -> Path:
    model, meta = _load_ckpt(args.checkpoint)
    data = load_dataset(meta.get("dataset"))
    run = Run("calibrate", cfg, args.out_dir, {"checkpoint": Path(args.checkpoint)})
    cap = _capture(model, data, cfg)
    scores = weight_scores(C.head_scores(cap, model) + C.token_scores(cap), cfg["lambda"], model.spec.layers)
    run.write("scores.csv", _scores_csv(scores))
    summary = {
        "format": "amg-calibration-1",
        "samples": cap.samples(0),
        "layers": [
            {"layer": l, "head_entropy": [C.head_entropy(cap, l, h) for h in range(cap.num_heads(l))],
             "max_entropy": C.max_entropy(*cap.attention(l).shape[-2:])}
            for l in sorted(cap.layers)
        ],
    }
    run.write("calibration.json", json.dumps(summary, indent=2) + "\n")
    return run.finish()


def cmd_export_attn(args, cfg) -> Path:
    model, meta = _load_ckpt(args.checkpoint)
    data = load_dataset(meta.get("dataset"))
    run = Run("export-attn", cfg, args.out_dir, {"checkpoint": Path(args.checkpoint)})
    cap = _capture(model, data, cfg)
    run.write("attention.csv", _attention_csv(cap, gradients=False))
    run.write("attention_grad.csv", _attention_csv(cap, gradients=True))
    scores = weight_scores(C.head_scores(cap, model) + C.token_scores(cap), cfg["lambda"], model.spec.layers)
    run.write("scores.csv", _scores_csv(scores))
    return run.finish()


def _train_config_ft(cfg, epochs=None) -> TrainConfig:
    return TrainConfig(epochs=cfg["finetune_epochs"] if epochs is None else epochs, batch_size=cfg["batch_size"],
                       learning_rate=cfg["finetune_learning_rate"], weight_decay=cfg["finetune_weight_decay"],
                       alpha=cfg["alpha"], seed=cfg["seed"])


def cmd_prune(args, cfg) -> Path:
    model, meta = _load_ckpt(args.checkpoint)
    data = load_dataset(meta.get("dataset"))
    pc = PruneConfig(head_rate=cfg["head_rate"], token_rate=cfg["token_rate"], lam=cfg["lambda"],
                     head_iterations=cfg["iterations"], criterion=cfg["criterion"])
    pc.validate(model.spec.layers)
    run = Run("prune", cfg, args.out_dir, {"checkpoint": Path(args.checkpoint)})
    between = None
    if cfg["interleave_epochs"] > 0:
        teacher = model.clone()

        def between(m):
            finetune(m, teacher, _train_config_ft(cfg, cfg["interleave_epochs"]), data)

    probe = data["calib"][0][:max(cfg["probe_size"], 1)]
    report = prune(model, pc, *data["calib"], probe=probe, between_steps=between,
                   batch_size=cfg["calib_batch_size"])
    run.write("model.ckpt", checkpoint.dumps(model, meta))
    run.write("prune_report.json", report.to_json())
    run.write("cost_before.json", report.cost_before.to_json())
    run.write("cost_after.json", report.cost_after.to_json())
    return run.finish()


def cmd_finetune(args, cfg) -> Path:
    model, meta = _load_ckpt(args.checkpoint)
    teacher, _ = _load_ckpt(args.teacher)
    data = load_dataset(meta.get("dataset"))
    run = Run("finetune", cfg, args.out_dir, {"checkpoint": Path(args.checkpoint), "teacher": Path(args.teacher)})
    xv, yv = data["val"]
    before = accuracy(model, xv, yv)
    records = finetune(model, teacher, _train_config_ft(cfg), data)
    run.write("finetune_log.jsonl", _jsonl(records))
    run.write("model.ckpt", checkpoint.dumps(model, meta))
    summary = {"format": "amg-finetune-1", "teacher_val_acc": accuracy(teacher, xv, yv),
               "pruned_val_acc": before, "finetuned_val_acc": accuracy(model, xv, yv)}
    run.write("summary.json", json.dumps(summary, indent=2) + "\n")
    return run.finish()


def cmd_report(args, cfg) -> Path:
    model, meta = _load_ckpt(args.checkpoint)
    run = Run("report", cfg, args.out_dir, {"checkpoint": Path(args.checkpoint)})
    if meta.get("dataset"):
        probe = load_dataset(meta["dataset"])["calib"][0][:max(cfg["probe_size"], 1)]
    else:
        s = model.spec
        probe = np.zeros((1, s.channels, s.image_size, s.image_size))
    report = instrumented_cost(model, probe)
    run.write("cost.json", report.to_json())
    run.write("cost.csv", _cost_csv(report))
    sys.stdout.write(report.render())
    return run.finish()


COMMANDS = {
    "train": cmd_train,
    "calibrate": cmd_calibrate,
    "prune": cmd_prune,
    "finetune": cmd_finetune,
    "report": cmd_report,
    "export-attn": cmd_export_attn,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="amgprune", description="Attention-map-guided ViT pruning pipeline.")
    parser.add_argument("--version", action="version", version=f"amgprune {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    helps = {
        "train": "train a baseline model on the configured dataset",
        "calibrate": "score heads and tokens of a checkpoint on its calibration split",
        "prune": "prune heads and/or key/value tokens of a checkpoint",
        "finetune": "fine-tune a pruned checkpoint against its teacher",
        "report": "print and export the cost of a checkpoint",
        "export-attn": "export averaged attention and gradient maps as CSV",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text, description=text)
        if name != "train":
            p.add_argument("checkpoint", help="input checkpoint (amg-ckpt-1)")
        if name == "finetune":
            p.add_argument("--teacher", required=True, help="unpruned teacher checkpoint")
        p.add_argument("--config", help="flat key = value settings file")
        p.add_argument("--out-dir", default="runs", help="parent directory for run directories (default: runs)")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any setting")
        p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
        for key in COMMAND_FLAGS[name]:
            flag, kind, text = FLAGS[key]
            p.add_argument(flag, dest=key, type=kind, default=None, help=text)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_settings(args)
        run_dir = COMMANDS[args.command](args, cfg)
    except InfeasiblePlanError as exc:
        print(f"amgprune: infeasible plan: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except DivergenceError as exc:
        print(f"amgprune: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ConfigError, ContractError, CheckpointError) as exc:
        print(f"amgprune: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except AmgError as exc:
        print(f"amgprune: {exc}", file=sys.stderr)
        return EXIT_ERROR
    print(run_dir)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
