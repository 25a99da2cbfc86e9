"""Command-line entry point: ``mind <subcommand> [options]``.

Configuration is one JSON document with four sections::

    {
      "seed": 0,
      "data":  {"path": null, "synthetic": {<SyntheticSpec fields>}},
      "model": {<ModelConfig fields, minus input_dims/task/n_classes/seed>},
      "train": {<TrainConfig fields, minus seed>},
      "ablate": [],
      "workers": 1
    }

Missing keys take their defaults, ``--set section.key=value`` overrides any key
and ``--seed`` overrides ``seed``.  When ``data.path`` is null the synthetic
recipe is generated in memory with the master seed.  A run manifest written
by ``train`` can be passed back through ``--config`` to repeat the run.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np

from mind import __version__
from mind.data import (
    SPLITS,
    Dataset,
    FeatureFileError,
    SpecError,
    SyntheticSpec,
    batches,
    dataset_digest,
    generate_synthetic,
    load_features,
    write_features,
)
from mind.losses import LOSS_TERMS
from mind.networks import MODALITIES, CheckpointError, ConfigError, ModelConfig, load_checkpoint, save_checkpoint
from mind.training import (
    MetricsReport,
    TrainConfig,
    TrainingDiverged,
    ablation_specs,
    derive_seed,
    evaluate,
    format_ablation_table,
    run_ablation_suite,
    train,
)

OUT_DIR_ENV = "MIND_OUT_DIR"
DEFAULT_OUT_DIR = "mind-runs"
MANIFEST_KIND = "mind-run-manifest"

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_DIVERGED = 0, 1, 2, 3

_AUX = [t for t in LOSS_TERMS if t != "task"]
ABLATE_FLAGS: dict[str, tuple[dict, dict]] = {
    **{f"no-{t}": ({"disabled_losses": [t]}, {}) for t in _AUX},
    "only-task": ({"disabled_losses": _AUX}, {}),
    "mute-invariant": ({"mute_invariant": True}, {}),
    "mute-specific": ({"mute_specific": True}, {}),
    "no-visual": ({"drop_modalities": ["V"]}, {}),
    "no-audio": ({"drop_modalities": ["A"]}, {}),
    "no-text": ({"drop_modalities": ["T"]}, {}),
    "non-disentangled": ({"disabled_losses": _AUX}, {"fusion": "raw"}),
}

_MODEL_OWN = ("input_dims", "task", "n_classes", "seed")


class UsageError(ValueError):
    pass


# -- configuration ------------------------------------------------------------------
def default_config() -> dict:
    spec = SyntheticSpec().to_dict()
    spec.pop("seed")
    model = {k: v for k, v in ModelConfig().to_dict().items() if k not in _MODEL_OWN}
    tcfg = TrainConfig().to_dict()
    tcfg.pop("seed")
    return {
        "seed": 0,
        "data": {"path": None, "synthetic": spec},
        "model": model,
        "train": tcfg,
        "ablate": [],
        "workers": 1,
    }


def _merge(base: dict, update: dict, where: str = "") -> dict:
    for k, v in update.items():
        if k not in base:
            raise UsageError(f"unknown config key {where + k!r}")
        if isinstance(base[k], dict) and isinstance(v, dict) and k != "dims":
            _merge(base[k], v, f"{where}{k}.")
        else:
            base[k] = v
    return base


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(cfg: dict, assignment: str) -> None:
    if "=" not in assignment:
        raise UsageError(f"--set expects key=value, got {assignment!r}")
    key, value = assignment.split("=", 1)
    *path, leaf = key.strip().split(".")
    node = cfg
    for part in path:
        if not isinstance(node.get(part), dict):
            raise UsageError(f"unknown config key {key!r}")
        node = node[part]
    if leaf not in node:
        raise UsageError(f"unknown config key {key!r}")
    node[leaf] = _parse_value(value)


def load_config(path: str | None, overrides: list[str] = (), seed: int | None = None, ablate: list[str] = ()) -> dict:
    cfg = default_config()
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as err:
            raise UsageError(f"cannot read config {path}: {err}") from err
        if isinstance(doc, dict) and doc.get("kind") == MANIFEST_KIND:
            doc = doc["config"]
        _merge(cfg, doc)
    for item in overrides:
        apply_override(cfg, item)
    if seed is not None:
        cfg["seed"] = seed
    for flag in ablate:
        if flag not in ABLATE_FLAGS:
            raise UsageError(f"unknown --ablate flag {flag!r}; choose from {sorted(ABLATE_FLAGS)}")
        if flag not in cfg["ablate"]:
            cfg["ablate"].append(flag)
    return cfg


def _spec_from(cfg: dict) -> SyntheticSpec:
    spec = SyntheticSpec.from_dict({**cfg["data"]["synthetic"], "seed": cfg["seed"]})
    spec.validate()
    return spec


def resolve_dataset(cfg: dict, override_path: str | None = None) -> Dataset:
    path = override_path or cfg["data"]["path"]
    if path:
        return load_features(path)
    return generate_synthetic(_spec_from(cfg))


def build_configs(cfg: dict, ds: Dataset) -> tuple[ModelConfig, TrainConfig]:
    model = dict(cfg["model"])
    tcfg = dict(cfg["train"])
    for flag in cfg["ablate"]:
        t_changes, m_changes = ABLATE_FLAGS[flag]
        for k, v in t_changes.items():
            if isinstance(v, list):
                tcfg[k] = sorted(set(tcfg.get(k) or []) | set(v))
            else:
                tcfg[k] = v
        model.update(m_changes)
    try:
        mcfg = ModelConfig(input_dims=ds.dims, task=ds.task, n_classes=ds.n_classes, seed=cfg["seed"], **model)
        tc = TrainConfig(seed=cfg["seed"], **tcfg)
    except TypeError as err:
        raise UsageError(f"bad config section: {err}") from err
    except ValueError as err:
        raise ConfigError(str(err)) from err
    return mcfg, tc


def _out_dir(args) -> Path:
    out = Path(args.out_dir or os.environ.get(OUT_DIR_ENV) or DEFAULT_OUT_DIR)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _dump_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _check_compatible(model_cfg: ModelConfig, ds: Dataset, ckpt: str, data_name: str) -> None:
    if model_cfg.input_dims != ds.dims:
        raise ConfigError(
            f"checkpoint {ckpt} expects input dims {model_cfg.input_dims} "
            f"but dataset {data_name} has {ds.dims}"
        )
    if model_cfg.task != ds.task or model_cfg.out_dim != (1 if ds.task == "regression" else ds.n_classes):
        raise ConfigError(
            f"checkpoint {ckpt} is a {model_cfg.task} model with {model_cfg.out_dim} outputs "
            f"but dataset {data_name} is {ds.task} with {ds.n_classes} classes"
        )


def format_metrics(report: MetricsReport, title: str) -> str:
    rows = [(k, v) for k, v in report.summary().items() if k != "corr_degenerate"]
    width = max(len(k) for k, _ in rows) + 2
    lines = [title, "-" * max(len(title), width + 10)]
    for k, v in rows:
        lines.append(f"{k.ljust(width)}{v if isinstance(v, int) else format(v, '.4f'):>10}")
    if report.corr_degenerate:
        lines.append("note: predictions or labels have zero variance, corr reported as 0")
    return "\n".join(lines) + "\n"


# -- subcommands --------------------------------------------------------------------
def cmd_synth(args) -> int:
    cfg = load_config(args.config, args.set, args.seed)
    spec = _spec_from(cfg)
    ds = generate_synthetic(spec)
    out = Path(args.out) if args.out else _out_dir(args) / "dataset.mndf"
    out.parent.mkdir(parents=True, exist_ok=True)
    write_features(ds, out)
    manifest = {
        "kind": "mind-synth-manifest",
        "version": __version__,
        "seed": spec.seed,
        "spec": spec.to_dict(),
        "spec_sha256": spec.digest(),
        "dataset_sha256": dataset_digest(ds),
        "output": out.name,
    }
    _dump_json(out.parent / f"{out.name}.manifest.json", manifest)
    print(f"wrote {ds.n_samples} samples to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.set, args.seed, args.ablate)
    if args.print_config:
        print(json.dumps(cfg, indent=2, sort_keys=True))
        return EXIT_OK
    if cfg["data"]["path"]:
        cfg["data"]["path"] = str(Path(cfg["data"]["path"]).resolve())
    ds = resolve_dataset(cfg)
    mcfg, tcfg = build_configs(cfg, ds)
    out = _out_dir(args)
    digest = dataset_digest(ds)

    manifest = {
        "kind": MANIFEST_KIND,
        "version": __version__,
        "seed": cfg["seed"],
        "config": cfg,
        "dataset_sha256": digest,
        "artifacts": {
            "checkpoint": "checkpoint.mndp",
            "losses": "losses.jsonl",
            "history": "history.jsonl",
            "metrics": "metrics.json",
            "report": "metrics.txt",
        },
    }
    step_fh = open(out / "losses.jsonl", "w")
    hist_fh = open(out / "history.jsonl", "w")

    def on_epoch(entry: dict) -> None:
        hist_fh.write(json.dumps(entry, sort_keys=True) + "\n")
        if not args.quiet:
            v = entry["valid"]
            score = v.get("mae", v.get("acc2", v.get("acc")))
            print(f"epoch {entry['epoch']:4d}  loss {entry['train_loss']['total']:.5g}  valid {score:.4f}", flush=True)

    def finish(result, status: str, best_epoch: int) -> None:
        meta = {
            "forward_options": result.forward_options,
            "train": tcfg.to_dict(),
            "best_epoch": best_epoch,
            "dataset_sha256": digest,
            "status": status,
        }
        save_checkpoint(out / "checkpoint.mndp", result.model, result.optimizer.state_arrays(), meta)
        manifest["status"] = status
        _dump_json(out / "manifest.json", manifest)

    try:
        with step_fh, hist_fh, np.errstate(over="ignore", invalid="ignore"):
            result = train(
                ds, mcfg, tcfg,
                on_step=lambda r: step_fh.write(json.dumps(r, sort_keys=True) + "\n"),
                on_epoch=on_epoch,
            )
    except TrainingDiverged as err:
        finish(err.result, "diverged", err.result.best_epoch)
        print(f"mind: training diverged ({err}); kept the last good checkpoint in {out}", file=sys.stderr)
        return EXIT_DIVERGED

    split = "valid" if ds.split("valid").n_samples else "train"
    metrics = {"split": split, "best_epoch": result.best_epoch, "metrics": result.report.summary()}
    _dump_json(out / "metrics.json", metrics)
    (out / "metrics.txt").write_text(format_metrics(result.report, f"{split} metrics (best epoch {result.best_epoch})"))
    finish(result, "ok", result.best_epoch)
    print(format_metrics(result.report, f"{split} metrics (best epoch {result.best_epoch})"), end="")
    return EXIT_OK


def _load_for_inference(args):
    if not args.checkpoint:
        raise UsageError("--checkpoint is required")
    model, _, meta = load_checkpoint(args.checkpoint)
    if args.dataset:
        ds, name = load_features(args.dataset), args.dataset
    else:
        cfg = load_config(args.config, args.set, args.seed)
        ds, name = resolve_dataset(cfg), cfg["data"]["path"] or "synthetic recipe"
    _check_compatible(model.config, ds, args.checkpoint, name)
    return model, meta, ds


def cmd_eval(args) -> int:
    model, meta, ds = _load_for_inference(args)
    report = evaluate(model, ds, args.split, forward_options=meta.get("forward_options"))
    text = format_metrics(report, f"{args.split} metrics")
    print(text, end="")
    out = _out_dir(args)
    _dump_json(out / f"eval_{args.split}.json", {"split": args.split, "metrics": report.summary()})
    (out / f"eval_{args.split}.txt").write_text(text)
    return EXIT_OK


def cmd_dump_embeddings(args) -> int:
    model, _, ds = _load_for_inference(args)
    part = ds if args.split == "all" else ds.split(args.split)
    rng = np.random.default_rng(args.fixed_noise_seed)  # None draws fresh OS entropy
    out = Path(args.out) if args.out else _out_dir(args) / "embeddings.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    d_k = model.config.d_k
    rows = 0
    with open(out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample", "modality", "component", "label"] + [f"e{i}" for i in range(d_k)])
        for b in batches(part, 256, train=False):
            res = model.forward_full(b, rng)
            for comp_name, comp in (("S", res.S), ("P", res.P), ("N", res.N)):
                for m in MODALITIES:
                    for idx, label, vec in zip(b.index, b.y, comp[m].data):
                        writer.writerow([int(idx), m, comp_name, repr(float(label))] + [repr(float(v)) for v in vec])
                        rows += 1
    print(f"wrote {rows} rows to {out}")
    return EXIT_OK


def cmd_verify(args) -> int:
    from mind.verify import format_results, run_checks

    results = run_checks()
    print(format_results(results))
    return EXIT_OK if all(r.passed for r in results) else EXIT_FAIL


def cmd_ablate(args) -> int:
    cfg = load_config(args.config, args.set, args.seed, args.ablate)
    if cfg["data"]["path"]:
        cfg["data"]["path"] = str(Path(cfg["data"]["path"]).resolve())
    ds = resolve_dataset(cfg)
    mcfg, tcfg = build_configs(cfg, ds)
    out = _out_dir(args)
    specs = ablation_specs()
    workers = args.workers if args.workers is not None else int(cfg["workers"])
    with np.errstate(over="ignore", invalid="ignore"):
        rows = run_ablation_suite(ds, mcfg, tcfg, specs=specs, workers=workers)
    table = format_ablation_table(rows, ds.task)
    (out / "ablation.txt").write_text(table)
    with open(out / "ablation.jsonl", "w") as fh:
        for r in rows:
            rec = {
                "name": r.name,
                "group": r.group,
                "master_seed": cfg["seed"],
                "seed": r.seed,
                "disabled_losses": r.disabled_losses,
                "metrics": r.report.summary(),
            }
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    _dump_json(
        out / "manifest.json",
        {
            "kind": "mind-ablation-manifest",
            "version": __version__,
            "seed": cfg["seed"],
            "config": cfg,
            "dataset_sha256": dataset_digest(ds),
            "row_seeds": {s.name: derive_seed(cfg["seed"], s.name) for s in specs},
            "artifacts": {"table": "ablation.txt", "rows": "ablation.jsonl"},
        },
    )
    print(table, end="")
    return EXIT_OK


# -- argument parsing ---------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file or a run manifest")
    common.add_argument("--seed", type=int, help="master seed (overrides the config)")
    common.add_argument("--out-dir", help=f"output directory (default ${OUT_DIR_ENV} or ./{DEFAULT_OUT_DIR})")
    common.add_argument(
        "--ablate", action="append", default=[], choices=sorted(ABLATE_FLAGS), metavar="FLAG",
        help="ablation switch, repeatable: " + ", ".join(sorted(ABLATE_FLAGS)),
    )
    common.add_argument("--fixed-noise-seed", type=int, help="seed for the noise branch when exporting embeddings")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")

    parser = argparse.ArgumentParser(prog="mind", description="Disentangled multimodal representation toolkit")
    parser.add_argument("--version", action="version", version=f"mind {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    p.add_argument("--out", help="output .mndf file, or a suffix-less path for a CSV directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", parents=[common], help="train a model")
    p.add_argument("--print-config", action="store_true", help="print the resolved config and exit")
    p.add_argument("--quiet", action="store_true", help="no per-epoch progress lines")
    p.set_defaults(func=cmd_train)

    for name, func, helptext in (
        ("eval", cmd_eval, "evaluate a checkpoint"),
        ("dump-embeddings", cmd_dump_embeddings, "export S/P/N vectors as CSV"),
    ):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--dataset", help="MNDF file or CSV directory (default: the config's data section)")
        splits = SPLITS if name == "eval" else SPLITS + ("all",)
        p.add_argument("--split", choices=splits, default="test" if name == "eval" else "all")
        if name == "dump-embeddings":
            p.add_argument("--out", help="output CSV path")
        p.set_defaults(func=func)

    p = sub.add_parser("verify", parents=[common], help="run gradient and oracle checks")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("ablate", parents=[common], help="run the ablation suite")
    p.add_argument("--workers", type=int, help="parallel worker processes")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, ConfigError, SpecError) as err:
        print(f"mind: error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (FeatureFileError, CheckpointError, FileNotFoundError) as err:
        print(f"mind: error: {err}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
