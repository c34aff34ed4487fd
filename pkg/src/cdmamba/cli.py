"""Command-line entry point: train, eval, predict, gradcheck, synth, ablate.

Config files are plain text ``key = value`` lines with ``#`` comments.
Every key has a default; unknown keys are rejected. Exit codes: 0 success,
1 usage/config error, 2 data error, 3 verification failure.
"""

from __future__ import annotations

import argparse
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import (DataError, SamplePair, confusion_overlay, list_ids, load_inputs,
                   load_pair, read_manifest, save_mask, save_overlay, save_pair,
                   synth_generate, write_manifest)
from .model import CDMamba, ModelConfig, load_checkpoint, save_checkpoint
from .training import LossConfig, evaluate, load_state, train_loop, LOG_HEADER, total_loss
from .verify import SUITES, run_suite


class ConfigError(Exception):
    """Bad config key, value, or command usage."""


def _parse_bool(value: str) -> bool:
    lowered = value.lower()
    if lowered in ("true", "1", "yes", "on"):
        return True
    if lowered in ("false", "0", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {value!r}")


def _parse_int_tuple(value: str) -> tuple:
    value = value.strip()
    if not value:
        return ()
    try:
        return tuple(int(v) for v in value.split(","))
    except ValueError as exc:
        raise ConfigError(f"expected comma-separated integers, got {value!r}") from exc


# key -> (parser, default); defaults follow the published settings wherever
# one exists (architecture, gate, dims, loss coefficients, Adam), with
# desk-scale schedule defaults (epochs 50, batch 4).
CONFIG_SCHEMA = {
    "data_dir": (str, ""),
    "split": (str, "train"),
    "synthetic": (_parse_bool, True),
    "synth_n": (int, 8),
    "synth_size": (int, 32),
    "input_channels": (int, 3),
    "stem_channels": (int, 16),
    "stage_channels": (_parse_int_tuple, (16, 32, 64, 128)),
    "stage_depths": (_parse_int_tuple, (1, 2, 2, 4)),
    "decoder_depths": (_parse_int_tuple, (1, 1, 1)),
    "aglgf_stages": (_parse_int_tuple, (1, 2)),
    "num_classes": (int, 2),
    "expand": (int, 2),
    "d_state": (int, 16),
    "conv1d_kernel": (int, 4),
    "conv2d_kernel": (int, 3),
    "gate_activation": (str, "relu"),
    "lgf_dim_multiplier": (float, 2.0),
    "ssm_skip": (_parse_bool, True),
    "lambda1": (float, 0.5),
    "lambda2": (float, 0.5),
    "dice_smoothing": (float, 1.0),
    "lr": (float, 1e-4),
    "beta1": (float, 0.9),
    "beta2": (float, 0.999),
    "adam_eps": (float, 1e-8),
    "epochs": (int, 50),
    "batch_size": (int, 4),
    "seed": (int, 0),
    "out_dir": (str, "runs/latest"),
    "checkpoint": (str, ""),
    "debug_guard": (_parse_bool, False),
}


def parse_config(path: str | None) -> dict:
    """Load a key=value config; None yields pure defaults."""
    cfg = {key: default for key, (_, default) in CONFIG_SCHEMA.items()}
    if path is None:
        return cfg
    if not os.path.isfile(path):
        raise ConfigError(f"config file not found: {path}")
    with open(path) as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw.rstrip()!r}")
            key, value = key.strip(), value.strip()
            if key not in CONFIG_SCHEMA:
                raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
            parser, _ = CONFIG_SCHEMA[key]
            try:
                cfg[key] = parser(value)
            except (ValueError, ConfigError) as exc:
                raise ConfigError(f"{path}:{lineno}: bad value for {key!r}: {exc}") from exc
    return cfg


def render_config(cfg: dict) -> str:
    lines = []
    for key in CONFIG_SCHEMA:
        value = cfg[key]
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        elif isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def model_config_from(cfg: dict) -> ModelConfig:
    try:
        return ModelConfig(
            input_channels=cfg["input_channels"],
            stem_channels=cfg["stem_channels"],
            stage_channels=cfg["stage_channels"],
            stage_depths=cfg["stage_depths"],
            decoder_depths=cfg["decoder_depths"],
            aglgf_stages=cfg["aglgf_stages"],
            num_classes=cfg["num_classes"],
            expand=cfg["expand"],
            d_state=cfg["d_state"],
            conv1d_kernel=cfg["conv1d_kernel"],
            conv2d_kernel=cfg["conv2d_kernel"],
            gate_activation=cfg["gate_activation"],
            lgf_dim_multiplier=cfg["lgf_dim_multiplier"],
            ssm_skip=cfg["ssm_skip"],
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def loss_config_from(cfg: dict) -> LossConfig:
    try:
        return LossConfig(cfg["lambda1"], cfg["lambda2"], cfg["dice_smoothing"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def load_dataset(cfg: dict) -> list:
    if cfg["data_dir"]:
        root = cfg["data_dir"]
        if cfg["split"] == "all":
            ids = list_ids(root)
        else:
            ids = read_manifest(root, cfg["split"])
        return [load_pair(root, i) for i in ids]
    if not cfg["synthetic"]:
        raise ConfigError("no data_dir given and synthetic=false")
    return synth_generate(cfg["synth_n"], cfg["synth_size"], cfg["seed"])


def _percent(values) -> str:
    return " / ".join(f"{100.0 * v:.2f}" for v in values)


# ---------------------------------------------------------------------------
# commands

def cmd_train(cfg: dict) -> int:
    samples = load_dataset(cfg)
    model = CDMamba(model_config_from(cfg), seed=cfg["seed"])
    os.makedirs(cfg["out_dir"], exist_ok=True)
    with open(os.path.join(cfg["out_dir"], "config_resolved.txt"), "w") as f:
        f.write(render_config(cfg))
    print(f"training on {len(samples)} pairs, {model.param_count()} parameters")

    ad.set_debug_guard(cfg["debug_guard"])
    try:
        result = train_loop(
            model, samples, epochs=cfg["epochs"], batch_size=cfg["batch_size"],
            seed=cfg["seed"], loss_cfg=loss_config_from(cfg), lr=cfg["lr"],
            beta1=cfg["beta1"], beta2=cfg["beta2"], adam_eps=cfg["adam_eps"],
            progress=lambda _epoch, line: print(line))
    finally:
        ad.set_debug_guard(True)

    log_path = os.path.join(cfg["out_dir"], "train_log.csv")
    with open(log_path, "w") as f:
        f.write(LOG_HEADER + "\n")
        f.writelines(line + "\n" for line in result.log_lines)

    load_state(model, result.best_state)  # retain the best-F1 weights
    ckpt_path = os.path.join(cfg["out_dir"], "model_best.ckpt")
    save_checkpoint(ckpt_path, model)
    print(f"best train F1 {result.best_f1:.4f} at epoch {result.best_epoch}")
    print(f"wrote {log_path} and {ckpt_path}")
    return 0


def _require_checkpoint(cfg: dict, args) -> str:
    path = args.checkpoint or cfg["checkpoint"]
    if not path:
        raise ConfigError("a checkpoint is required (--checkpoint or config key)")
    if not os.path.isfile(path):
        raise DataError(f"checkpoint not found: {path}")
    return path


def cmd_eval(cfg: dict, args) -> int:
    model = load_checkpoint(_require_checkpoint(cfg, args))
    samples = load_dataset(cfg)
    report = evaluate(model, samples)
    m = report.metrics
    lines = [
        "Pre / Rec / F1 / IoU / OA (%)",
        _percent((m.precision, m.recall, m.f1, m.iou, m.oa)),
        f"samples: {report.n_samples}",
        f"degenerate ground-truth masks (no change): {report.degenerate_masks}",
        f"pixels: {report.counts.total} (TP={report.counts.tp} TN={report.counts.tn} "
        f"FP={report.counts.fp} FN={report.counts.fn})",
    ]
    if m.degenerate:
        lines.append("note: some metric had an empty denominator and was reported as 0")
    text = "\n".join(lines)
    print(text)
    os.makedirs(cfg["out_dir"], exist_ok=True)
    with open(os.path.join(cfg["out_dir"], "eval_report.txt"), "w") as f:
        f.write(text + "\n")
    return 0


def cmd_predict(cfg: dict, args) -> int:
    model = load_checkpoint(_require_checkpoint(cfg, args))
    root = cfg["data_dir"]
    if not root:
        raise ConfigError("predict needs data_dir pointing at a pair directory")
    ids = list_ids(root)
    out_dir = cfg["out_dir"]
    os.makedirs(out_dir, exist_ok=True)
    max_workers = max(1, int(os.environ.get("CDMAMBA_THREADS", "1")))

    def run_one(sample_id: str) -> bool:
        t1, t2, gt = load_inputs(root, sample_id)
        pred = model.predict(t1, t2)
        save_mask(os.path.join(out_dir, f"{sample_id}_mask.png"), pred)
        if gt is None:
            return False
        save_overlay(os.path.join(out_dir, f"{sample_id}_overlay.png"),
                     confusion_overlay(pred, gt))
        return True

    if max_workers > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            overlaid = list(pool.map(run_one, ids))
    else:
        overlaid = [run_one(i) for i in ids]
    skipped = len(ids) - sum(overlaid)
    print(f"wrote {len(ids)} masks to {out_dir}")
    if skipped:
        print(f"no ground truth for {skipped} pair(s); overlays skipped for those")
    return 0


def cmd_gradcheck(scope: str) -> int:
    scopes = list(SUITES) if scope == "all" else [scope]
    failed = False
    for s in scopes:
        results, ok = run_suite(s)
        failed |= not ok
        for r in results:
            status = "PASS" if r.error <= r.tolerance else "FAIL"
            print(f"[{status}] {s}/{r.name}: max_rel_err={r.error:.3e} tol={r.tolerance:.0e}")
        worst = max(results, key=lambda r: r.error)
        print(f"{s}: worst {worst.name} at {worst.error:.3e}")
    return 3 if failed else 0


def cmd_synth(cfg: dict) -> int:
    samples = synth_generate(cfg["synth_n"], cfg["synth_size"], cfg["seed"])
    out = cfg["out_dir"]
    for s in samples:
        save_pair(out, s)
    ids = [s.id for s in samples]
    n_train = max(1, round(0.75 * len(ids)))
    n_val = max(0, (len(ids) - n_train + 1) // 2)
    write_manifest(out, "train", ids[:n_train])
    write_manifest(out, "val", ids[n_train:n_train + n_val])
    write_manifest(out, "test", ids[n_train + n_val:])
    print(f"wrote {len(ids)} synthetic pairs to {out}")
    return 0


# the published ablation axes: fusion stages, gate activation, L-GF width,
# loss coefficients
ABLATION_AXES = {
    "aglgf_stages": [(), (1,), (1, 2), (1, 2, 3), (1, 2, 3, 4)],
    "gate_activation": ["silu", "relu", "leakyrelu", "sigmoid"],
    "lgf_dim_multiplier": [1.0, 1.5, 2.0],
    "loss_coefficients": [(1.0, 0.0), (0.0, 1.0), (0.5, 0.5), (0.5, 1.0), (1.0, 0.5)],
}


def cmd_ablate(cfg: dict) -> int:
    os.makedirs(cfg["out_dir"], exist_ok=True)
    sample = synth_generate(1, cfg["synth_size"], cfg["seed"])[0]
    t1, t2 = Tensor(sample.t1), Tensor(sample.t2)
    rows = ["axis,setting,parameters,logit_checksum,initial_loss"]
    for axis, settings in ABLATION_AXES.items():
        for setting in settings:
            variant = dict(cfg)
            if axis == "loss_coefficients":
                variant["lambda1"], variant["lambda2"] = setting
                label = f"l1={setting[0]}/l2={setting[1]}"
            else:
                variant[axis] = setting
                label = ",".join(str(v) for v in setting) if isinstance(setting, tuple) else str(setting)
                label = label or "none"
            model = CDMamba(model_config_from(variant), seed=variant["seed"])
            with ad.no_grad():
                logits = model(t1, t2)
                loss, _, _ = total_loss(logits, sample.gt, loss_config_from(variant))
            checksum = float(np.abs(logits.data).sum())
            rows.append(f"{axis},{label},{model.param_count()},{checksum!r},{loss.item()!r}")
            print(rows[-1])
    path = os.path.join(cfg["out_dir"], "ablation.csv")
    with open(path, "w") as f:
        f.writelines(r + "\n" for r in rows)
    print(f"wrote {path}")
    return 0


# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit(2), which is the data-error code
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cdmamba", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, text in (
        ("train", "train a model and write the best-F1 checkpoint plus the epoch log"),
        ("eval", "run the metric suite over a dataset with a checkpoint"),
        ("predict", "write predicted masks and confusion-colored overlays"),
        ("gradcheck", "finite-difference verification of the differentiable stack"),
        ("synth", "generate a synthetic bi-temporal dataset on disk"),
        ("ablate", "sweep the published ablation axes and emit one CSV"),
    ):
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", default=None, help="key = value config file")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", default=None, help="override the output directory")
        if name in ("eval", "predict"):
            p.add_argument("--checkpoint", default=None, help="checkpoint file to load")
        if name == "gradcheck":
            p.add_argument("--scope", default="all", choices=sorted(SUITES) + ["all"])
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cfg = parse_config(args.config)
        if args.seed is not None:
            cfg["seed"] = args.seed
        if args.out is not None:
            cfg["out_dir"] = args.out
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "eval":
            return cmd_eval(cfg, args)
        if args.command == "predict":
            return cmd_predict(cfg, args)
        if args.command == "gradcheck":
            return cmd_gradcheck(args.scope)
        if args.command == "synth":
            return cmd_synth(cfg)
        if args.command == "ablate":
            return cmd_ablate(cfg)
        raise ConfigError(f"unknown command {args.command!r}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
