"""Command-line entry point.

Verbs: gen-data, train, eval, spectrum, verify. Run configs are canonical
JSON with strict key checking (unknown keys are errors). Exit codes:
0 success, 1 verification failure, 2 config/usage error, 3 solver failure,
4 training divergence.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import pde_data, verify
from .checkpoint import canonical_json, load_checkpoint, save_checkpoint
from .operator import MixerKind, ModelConfig, build_model
from .pde_data import DRConfig, DarcyConfig, SWEConfig, SolverError
from .train_eval import (
    TrainConfig,
    TrainingDiverged,
    config_hash,
    depth_profile,
    evaluate_metrics,
    fit,
    loss_curve_to_csv,
    spectrum_profile,
    spectrum_to_csv,
)

EXIT_OK = 0
EXIT_VERIFY_FAIL = 1
EXIT_CONFIG = 2
EXIT_SOLVER = 3
EXIT_DIVERGED = 4

CONFIG_VERSION = 1

_TASK_CONFIGS = {"darcy": DarcyConfig, "sw2d": SWEConfig, "dr2d": DRConfig}

# model input/output channel counts per task
_TASK_CHANNELS = {"darcy": (2, 1), "sw2d": (10, 91), "dr2d": (20, 182)}


class ConfigError(ValueError):
    pass


def _check_keys(section: dict, allowed: set[str], where: str):
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(sorted(unknown))}")


_DATA_KEYS = {"n_train", "n_test"}
_MODEL_KEYS = {"d_v", "depth", "mixer_kind", "coord_dim", "rollout",
               "input_window", "precision", "n_state", "expand",
               "use_residual", "scan_axis", "q"}
_TRAIN_KEYS = {"steps", "batch_size", "lr", "weight_decay", "warmup_steps",
               "loss", "checkpoint_every", "schedule", "betas"}


def load_run_config(path) -> dict:
    try:
        with open(path, "rb") as fh:
            cfg = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}")
    _check_keys(cfg, {"version", "task", "data", "model", "train",
                      "out_dir", "seed", "dataset"}, "config")
    if cfg.get("version", CONFIG_VERSION) != CONFIG_VERSION:
        raise ConfigError(f"unsupported config version {cfg.get('version')}")
    task = cfg.get("task")
    if task not in _TASK_CONFIGS:
        raise ConfigError(f"task must be one of {sorted(_TASK_CONFIGS)}, got {task!r}")
    if "seed" not in cfg:
        raise ConfigError("seed is mandatory (no implicit entropy)")
    data = dict(cfg.get("data", {}))
    gen_fields = {f for f in _TASK_CONFIGS[task].__dataclass_fields__} - {"seed"}
    _check_keys(data, _DATA_KEYS | gen_fields, "data")
    _check_keys(cfg.get("model", {}), _MODEL_KEYS, "model")
    _check_keys(cfg.get("train", {}), _TRAIN_KEYS, "train")
    return cfg


def _gen_config(cfg: dict):
    task = cfg["task"]
    data = dict(cfg.get("data", {}))
    n_train = data.pop("n_train", 90)
    n_test = data.pop("n_test", 10)
    try:
        gen_cfg = _TASK_CONFIGS[task](seed=cfg["seed"], **_listify(data))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid data config: {exc}")
    return gen_cfg, n_train, n_test


def _listify(d: dict) -> dict:
    return {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}


def _model_config(cfg: dict) -> ModelConfig:
    task = cfg["task"]
    d_a, d_u = _TASK_CHANNELS[task]
    try:
        return ModelConfig(d_a=d_a, d_u=d_u, **cfg.get("model", {}))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid model config: {exc}")


def _train_config(cfg: dict) -> TrainConfig:
    try:
        return TrainConfig(seed=cfg["seed"], **cfg.get("train", {}))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid train config: {exc}")


def _out_dir(cfg: dict, args) -> Path:
    out = Path(args.out or cfg.get("out_dir", "."))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _dataset_tensors(sset: pde_data.SampleSet, ids):
    xs = torch.stack([torch.from_numpy(np.ascontiguousarray(
        sset.samples[i][0].data)).float() for i in ids])
    ys = torch.stack([torch.from_numpy(np.ascontiguousarray(
        sset.samples[i][1].data)).float() for i in ids])
    return xs, ys


def _forward_chunks(model, xs: torch.Tensor, size: int = 32) -> torch.Tensor:
    """Inference over xs in slices of `size` samples; one forward over a
    large sample set can exceed memory."""
    with torch.no_grad():
        return torch.cat([model(xs[i:i + size])
                          for i in range(0, xs.shape[0], size)])


def cmd_gen_data(args) -> int:
    cfg = load_run_config(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    gen_cfg, n_train, n_test = _gen_config(cfg)
    out = _out_dir(cfg, args)
    sset = pde_data.build_sampleset(cfg["task"], n_train, n_test, gen_cfg)
    path = out / f"{cfg['task']}.mnod"
    pde_data.write_sampleset(sset, path)
    manifest = {
        "task": cfg["task"],
        "dataset": str(path),
        "split_manifest": f"{path}.split.json",
        "n_train": n_train,
        "n_test": n_test,
        "seed": cfg["seed"],
    }
    (out / "gen_manifest.json").write_bytes(canonical_json(manifest))
    print(f"wrote {path} ({n_train} train / {n_test} test)")
    return EXIT_OK


def _resolve_dataset(cfg: dict, args, out: Path) -> Path:
    ds = getattr(args, "dataset", None) or cfg.get("dataset")
    if ds is None:
        ds = out / f"{cfg['task']}.mnod"
    ds = Path(ds)
    if not ds.exists():
        raise ConfigError(f"dataset file not found: {ds}")
    return ds


def cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    out = _out_dir(cfg, args)
    ds_path = _resolve_dataset(cfg, args, out)
    sset = pde_data.read_sampleset(ds_path)
    train_x, train_y = _dataset_tensors(sset, sset.split["train"])
    test_x, test_y = _dataset_tensors(sset, sset.split["test"])

    tr_cfg = _train_config(cfg)
    ckpt_path = out / "checkpoint.mno1"
    curve_path = out / "loss_curve.csv"

    prev_curve: list[tuple[int, float]] = []
    start_step = 0
    if args.resume:
        model, extra = load_checkpoint(args.resume)
        start_step = int(extra.get("step", 0))
        if curve_path.exists():
            lines = curve_path.read_text().strip().splitlines()[1:]
            prev_curve = [(int(s), float(v)) for s, v in
                          (ln.split(",") for ln in lines)]
    else:
        model = build_model(_model_config(cfg), seed=cfg["seed"])

    remaining = tr_cfg.steps - start_step
    if remaining < 0:
        raise ConfigError("checkpoint step exceeds configured steps")

    def save(step):
        save_checkpoint(ckpt_path, model, extra={"step": start_step + step})

    save(0)  # initialization checkpoint; retained on divergence at step 1
    run_cfg = TrainConfig(**{**tr_cfg.__dict__, "steps": remaining})
    try:
        result = fit(model, train_x, train_y, run_cfg, checkpoint_fn=save)
    except TrainingDiverged as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    curve = prev_curve + [(start_step + s, v) for s, v in result.loss_curve]
    curve_path.write_text(loss_curve_to_csv(curve))
    save_checkpoint(ckpt_path, model, extra={"step": tr_cfg.steps})

    preds = _forward_chunks(model, test_x).numpy()
    report = evaluate_metrics(list(preds), list(test_y.numpy()),
                              task=cfg["task"], config_hash=config_hash(cfg))
    (out / "metrics_test.csv").write_text(report.to_csv())
    (out / "metrics_test.json").write_text(report.to_json())
    print(f"final train RL2 {result.final_train_rl2:.4e}; "
          f"test nRMSE {report.mean_nrmse:.4e}")
    return EXIT_OK


def cmd_eval(args) -> int:
    if not os.path.exists(args.checkpoint):
        print(f"error: checkpoint file not found: {args.checkpoint}", file=sys.stderr)
        return EXIT_CONFIG
    if not os.path.exists(args.dataset):
        print(f"error: dataset file not found: {args.dataset}", file=sys.stderr)
        return EXIT_CONFIG
    model, _ = load_checkpoint(args.checkpoint)
    sset = pde_data.read_sampleset(args.dataset)
    ids = sset.split[args.split]
    xs, ys = _dataset_tensors(sset, ids)
    if xs.shape[-1] != model.config.d_a:
        print(f"error: dataset has {xs.shape[-1]} input channels, model "
              f"expects {model.config.d_a}", file=sys.stderr)
        return EXIT_CONFIG
    preds = _forward_chunks(model, xs).numpy()
    report = evaluate_metrics(list(preds), list(ys.numpy()),
                              task=sset.provenance.get("task", ""),
                              config_hash=config_hash(model.config.to_dict()))
    out = Path(args.out) if args.out else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
        (out / f"metrics_{args.split}.csv").write_text(report.to_csv())
        (out / f"metrics_{args.split}.json").write_text(report.to_json())
    print(report.to_json())
    return EXIT_OK


def cmd_spectrum(args) -> int:
    if not os.path.exists(args.checkpoint):
        print(f"error: checkpoint file not found: {args.checkpoint}", file=sys.stderr)
        return EXIT_CONFIG
    model, _ = load_checkpoint(args.checkpoint)
    sset = pde_data.read_sampleset(args.dataset)
    ids = sset.split["test"][:args.n_samples]
    xs, _ = _dataset_tensors(sset, ids)
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)

    all_profiles = []
    depth_rows = []
    for i in range(xs.shape[0]):
        taps: list = []
        with torch.no_grad():
            model(xs[i], taps=taps)
        maps = [t[1].squeeze(0).double().numpy() if t[1].dim() == 4
                else t[1].double().numpy() for t in taps]
        all_profiles.append(spectrum_profile(maps))
        depth_rows.append(depth_profile(model, xs[i]))

    mean_log = np.mean([p.log_amplitude for p in all_profiles], axis=0)
    mean_profile = all_profiles[0]
    mean_profile.log_amplitude = mean_log
    mean_profile.delta_log_amplitude = mean_log[:, -1] - mean_log[:, 0]
    (out / "spectrum_layers.csv").write_text(spectrum_to_csv(mean_profile))

    lines = ["depth,tag,delta_log_amplitude"]
    n = len(depth_rows)
    for j in range(len(depth_rows[0])):
        depth, tag, _ = depth_rows[0][j]
        mean_delta = float(np.mean([depth_rows[i][j][2] for i in range(n)]))
        lines.append(f"{depth!r},{tag},{mean_delta!r}")
    (out / "spectrum_depth.csv").write_text("\n".join(lines) + "\n")
    print(f"wrote spectrum CSVs to {out} (averaged over {len(ids)} samples)")
    return EXIT_OK


def cmd_verify(args) -> int:
    verdicts = verify.run_all(corrupt_adjoint=args.corrupt_adjoint)
    for v in verdicts:
        status = "pass" if v["passed"] else "FAIL"
        print(f"[{status}] {v['property']}: {v['detail']}")
    if args.json:
        Path(args.json).write_text(json.dumps(verdicts, indent=2))
    if all(v["passed"] for v in verdicts):
        print(f"all {len(verdicts)} properties passed")
        return EXIT_OK
    failed = [v["property"] for v in verdicts if not v["passed"]]
    print(f"FAILED: {', '.join(failed)}", file=sys.stderr)
    return EXIT_VERIFY_FAIL


def _apply_threads(args):
    cap = args.threads or os.environ.get("MNO_THREADS")
    if cap:
        torch.set_num_threads(int(cap))


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mno", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="override config seed")
        p.add_argument("--threads", type=int, default=None,
                       help="cap worker threads (or MNO_THREADS)")

    p = sub.add_parser("gen-data", help="generate a dataset file + manifest")
    p.add_argument("--config", required=True)
    common(p)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train a model per config")
    p.add_argument("--config", required=True)
    p.add_argument("--dataset", default=None, help="dataset file (MNOD)")
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    common(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--split", choices=["train", "test"], default="test")
    common(p)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("spectrum", help="per-layer Fourier feature diagnostics")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--n-samples", type=int, default=1)
    common(p)
    p.set_defaults(fn=cmd_spectrum)

    p = sub.add_parser("verify", help="run all property suites")
    p.add_argument("--json", default=None, help="write machine-readable verdicts")
    p.add_argument("--corrupt-adjoint", action="store_true",
                   help=argparse.SUPPRESS)  # negative-control fixture
    p.add_argument("--threads", type=int, default=None)
    p.set_defaults(fn=cmd_verify)

    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _apply_threads(args)
        return args.fn(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SolverError as exc:
        print(f"error: solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
