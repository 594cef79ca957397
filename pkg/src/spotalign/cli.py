"""Command-line surface: simulate, train, eval, predict, render.

Run configs are INI files with [data]/[model]/[loss]/[train]/[out] sections;
unknown sections or keys are hard errors, and the fully-defaulted effective
config is echoed into the output directory of every training run.

Exit codes: 0 ok, 2 config error, 3 data error, 4 numeric failure, 5 I/O
error.  Errors print one line to stderr: ``error: <category>: <message>``.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import configparser
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import data_io, evaluation, model, render, trainer
from .errors import ConfigError, ContractError, DataError, NumericError, ShapeError

_SYNTH_KEYS = {
    "n_spots": ("n_spots", int),
    "n_slides": ("n_slides", int),
    "latent": ("latent_dim", int),
    "genes": ("n_genes", int),
    "rho": ("rho", float),
    "sigma": ("sigma", float),
    "seed": ("seed", int),
    "d_in": ("d_in", int),
    "count_scale": ("count_scale", float),
}

_MODEL_KEYS = {
    "d": ("d", int),
    "d_in": ("d_in", int),
    "heads": ("heads", int),
    "neighbor_blocks": ("neighbor_blocks", int),
    "global_blocks": ("global_blocks", int),
    "fusion_blocks": ("fusion_blocks", int),
    "d_ff": ("d_ff", int),
    "dropout": ("dropout", float),
    "neighbor_tokens": ("neighbor_tokens", int),
    "fusion_mode": ("fusion_mode", str),
}

_LOSS_KEYS = {
    "tau": ("tau", float),
    "tau_ig": ("tau_ig", float),
    "lambda": ("lam", float),
    "k": ("k", int),
    "target_mode": ("target_mode", str),
}

_TRAIN_KEYS = {
    "lr": ("lr", float),
    "decay": ("decay", float),
    "decay_every": ("decay_every", int),
    "batch": ("batch_size", int),
    "epochs": ("epochs", int),
    "seed": ("seed", int),
    "folds": ("n_folds", int),
    "multi_ins_weight": ("multi_ins_weight", float),
    "cluster_refresh": ("cluster_refresh", str),
    "kmeans_n_init": ("kmeans_n_init", int),
}


def _read_ini(path) -> configparser.ConfigParser:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        with open(path) as f:
            parser.read_file(f)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except configparser.Error as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from exc
    return parser


def _section(parser, name, keymap) -> dict:
    """Typed extraction of one section; unknown keys are hard errors."""
    if name not in parser:
        return {}
    out = {}
    for key, value in parser[name].items():
        if key not in keymap:
            raise ConfigError(f"unknown key {key!r} in section [{name}]")
        field, cast = keymap[key]
        try:
            out[field] = cast(value)
        except ValueError as exc:
            raise ConfigError(f"bad value for {name}.{key}: {value!r}") from exc
    return out


def _reject_unknown_sections(parser, allowed) -> None:
    unknown = set(parser.sections()) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")


def _echo_config(path, sections: dict[str, dict]) -> None:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    for name, mapping in sections.items():
        parser[name] = {k: str(v) for k, v in mapping.items()}
    with open(path, "w") as f:
        parser.write(f)


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(args) -> int:
    parser = _read_ini(args.spec)
    _reject_unknown_sections(parser, {"synth"})
    if "synth" not in parser:
        raise ConfigError("simulate spec needs a [synth] section")
    spec = data_io.SynthSpec(**_section(parser, "synth", _SYNTH_KEYS))
    study = data_io.synth_generate(spec)
    manifest = data_io.write_study(study, args.out)
    print(f"manifest={manifest}")
    return 0


def _load_run_config(path):
    parser = _read_ini(path)
    _reject_unknown_sections(parser, {"data", "model", "loss", "train", "out"})
    if "data" not in parser or "manifest" not in parser["data"]:
        raise ConfigError("config needs [data] manifest = <path>")
    unknown = set(parser["data"]) - {"manifest"}
    if unknown:
        raise ConfigError(f"unknown key {sorted(unknown)[0]!r} in section [data]")
    if "out" not in parser or "dir" not in parser["out"]:
        raise ConfigError("config needs [out] dir = <path>")
    unknown = set(parser["out"]) - {"dir"}
    if unknown:
        raise ConfigError(f"unknown key {sorted(unknown)[0]!r} in section [out]")

    manifest = (Path(path).parent / parser["data"]["manifest"]).resolve()
    out_dir = Path(parser["out"]["dir"])
    if not out_dir.is_absolute():
        out_dir = (Path(path).parent / out_dir).resolve()
    model_kwargs = _section(parser, "model", _MODEL_KEYS)
    loss_kwargs = _section(parser, "loss", _LOSS_KEYS)
    train_kwargs = _section(parser, "train", _TRAIN_KEYS)
    return manifest, out_dir, model_kwargs, loss_kwargs, train_kwargs


def _train_one_fold(payload):
    fold_id, plan, batches, model_cfg, train_cfg = payload
    return fold_id, trainer.train_fold(fold_id, plan, batches, model_cfg, train_cfg)


def cmd_train(args) -> int:
    manifest, out_dir, model_kwargs, loss_kwargs, train_kwargs = _load_run_config(args.config)
    batches = data_io.load_study(manifest)
    if not batches:
        raise DataError(f"manifest {manifest} lists no samples")
    n_genes = batches[0].n_genes
    d_in = batches[0].local_feat.shape[1]
    tokens = batches[0].neighbor_feat.shape[1]

    model_kwargs.setdefault("d_in", d_in)
    model_kwargs.setdefault("neighbor_tokens", tokens)
    try:
        model_cfg = model.ModelConfig(n_genes=n_genes, **model_kwargs)
        train_cfg = trainer.TrainConfig(**{**loss_kwargs, **train_kwargs})
    except ContractError as exc:
        raise ConfigError(str(exc)) from exc

    plan = trainer.make_folds(
        [(b.sample_id, b.patient_id) for b in batches], train_cfg.n_folds, train_cfg.seed
    )

    out_dir.mkdir(parents=True, exist_ok=True)
    _echo_config(
        out_dir / "effective_config.ini",
        {
            "data": {"manifest": manifest},
            "model": asdict(model_cfg),
            "train": asdict(train_cfg),
            "out": {"dir": out_dir},
        },
    )

    fold_ids = sorted(plan.folds)
    payloads = [(f, plan, batches, model_cfg, train_cfg) for f in fold_ids]
    if args.jobs > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = dict(pool.map(_train_one_fold, payloads))
    else:
        results = dict(map(_train_one_fold, payloads))

    reports = []
    for fold_id in fold_ids:
        result = results[fold_id]
        model.save_checkpoint(out_dir / f"fold{fold_id}_best.gdml", result.params_best, model_cfg)
        model.save_checkpoint(out_dir / f"fold{fold_id}_final.gdml", result.params_final, model_cfg)
        (out_dir / f"fold{fold_id}_train.log").write_text(
            "".join(line + "\n" for line in result.log_lines)
        )
        test_batches = [b for b in batches if b.sample_id in set(plan.folds[fold_id])]
        if test_batches:
            reports.append(
                trainer.evaluate_fold(fold_id, result.params_best, model_cfg, test_batches)
            )

    if reports:
        hpg = evaluation.select_hpg(reports, top=min(50, n_genes))
        summary = evaluation.aggregate(reports, hpg)
        evaluation.write_report_csv(out_dir / "report.csv", reports, summary)
        text = evaluation.format_report_text(reports, summary)
        (out_dir / "summary.txt").write_text(text)
        print(text, end="")
    return 0


def _batches_by_id(manifest_path):
    batches = data_io.load_study(manifest_path)
    if not batches:
        raise DataError(f"manifest {manifest_path} lists no samples")
    return {b.sample_id: b for b in batches}


def cmd_eval(args) -> int:
    if (args.checkpoint is None) == (args.predictions is None):
        raise ConfigError("eval needs exactly one of --checkpoint or --predictions")
    by_id = _batches_by_id(args.manifest)
    pairs = []
    if args.checkpoint is not None:
        params, model_cfg = model.load_checkpoint(args.checkpoint)
        for sid in sorted(by_id):
            b = by_id[sid]
            pairs.append((b.expression, trainer.infer(params, model_cfg, b)))
    else:
        entries = data_io.read_container(args.predictions)
        for sid in sorted(by_id):
            key = f"pred:{sid}"
            if key not in entries:
                raise DataError(f"{args.predictions}: missing entry {key!r}")
            pred = entries[key]
            if pred.shape != by_id[sid].expression.shape:
                raise DataError(
                    f"{args.predictions}: {key} has shape {pred.shape}, "
                    f"expected {by_id[sid].expression.shape}"
                )
            pairs.append((by_id[sid].expression, pred))

    report = evaluation.build_fold_report(0, pairs)
    hpg = evaluation.select_hpg([report], top=min(50, report.n_genes))
    summary = evaluation.aggregate([report], hpg)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    evaluation.write_report_csv(out_dir / "report.csv", [report], summary)
    text = evaluation.format_report_text([report], summary)
    (out_dir / "summary.txt").write_text(text)
    print(text, end="")
    return 0


def cmd_predict(args) -> int:
    params, model_cfg = model.load_checkpoint(args.checkpoint)
    by_id = _batches_by_id(args.manifest)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries: dict[str, np.ndarray] = {}
    for sid in sorted(by_id):
        b = by_id[sid]
        entries[f"pred:{sid}"] = trainer.infer(params, model_cfg, b)
        entries[f"coords:{sid}"] = b.coords
    data_io.write_container(out_dir / "predictions.gdml", entries)

    manifest_dir = Path(args.manifest).parent
    parser = data_io.read_manifest(args.manifest)
    gene_file = manifest_dir / parser["study"]["genes"]
    data_io.write_gene_list(out_dir / "genes.txt", data_io.read_gene_list(gene_file))
    print(f"predictions={out_dir / 'predictions.gdml'}")
    return 0


def cmd_render(args) -> int:
    entries = data_io.read_container(args.predictions)
    sample_ids = sorted(k.split(":", 1)[1] for k in entries if k.startswith("pred:"))
    if not sample_ids:
        raise DataError(f"{args.predictions}: no prediction entries")
    sid = args.sample or sample_ids[0]
    if f"pred:{sid}" not in entries:
        raise DataError(f"{args.predictions}: no prediction for sample {sid!r}")

    genes_path = Path(args.genes) if args.genes else Path(args.predictions).parent / "genes.txt"
    gene_names = data_io.read_gene_list(genes_path)
    if args.gene not in gene_names:
        raise DataError(f"gene {args.gene!r} not in {genes_path}")
    gi = gene_names.index(args.gene)

    pred = entries[f"pred:{sid}"]
    coords = entries[f"coords:{sid}"]
    render.render_hex_svg(coords, pred[:, gi], args.out, title=f"{sid} {args.gene}")
    print(f"svg={args.out}")
    return 0


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="spotalign",
        description="Bimodal spot-image/expression alignment: simulate, train, evaluate, predict, render.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="write a synthetic study from a [synth] spec file")
    p.add_argument("--spec", required=True, help="INI file with a [synth] section")
    p.add_argument("--out", required=True, help="output directory (default: none)")
    p.set_defaults(fn=cmd_simulate)

    p = sub.add_parser("train", help="run patient-grouped cross-validation training")
    p.add_argument("--config", required=True, help="run config INI (default: none)")
    p.add_argument("--jobs", type=int, default=1, help="parallel fold processes (default: 1)")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint or precomputed predictions")
    p.add_argument("--checkpoint", help="model checkpoint container (default: none)")
    p.add_argument("--predictions", help="predictions container (default: none)")
    p.add_argument("--manifest", required=True, help="study manifest (default: none)")
    p.add_argument("--out", required=True, help="output directory (default: none)")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("predict", help="write a predictions container for a study")
    p.add_argument("--checkpoint", required=True, help="model checkpoint (default: none)")
    p.add_argument("--manifest", required=True, help="study manifest (default: none)")
    p.add_argument("--out", required=True, help="output directory (default: none)")
    p.set_defaults(fn=cmd_predict)

    p = sub.add_parser("render", help="render one (sample, gene) hex heatmap SVG")
    p.add_argument("--predictions", required=True, help="predictions container (default: none)")
    p.add_argument("--gene", required=True, help="gene name to render (default: none)")
    p.add_argument("--sample", help="sample id (default: first in container)")
    p.add_argument("--genes", help="gene list path (default: genes.txt beside predictions)")
    p.add_argument("--out", required=True, help="output SVG path (default: none)")
    p.set_defaults(fn=cmd_render)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return 2
    except ContractError as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return 2
    except (DataError, ShapeError) as exc:
        print(f"error: data: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"error: numeric: {exc}", file=sys.stderr)
        return 4
    except OSError as exc:
        print(f"error: io: {exc}", file=sys.stderr)
        return 5


if __name__ == "__main__":
    sys.exit(main())
