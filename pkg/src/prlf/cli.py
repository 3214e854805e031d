"""
Command-line entry point.

Commands: gen-data, train, eval, sweep-intra, sweep-inter, ablate,
phase-diag, plot. Every command resolves its configuration with
precedence flag > PRLF_* environment variable > --config file > default,
writes its outputs into --out, and leaves a manifest.json recording the
resolved config, input/output content hashes and summary numbers.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import config as cfgmod
from . import datagen, evalbench, svgplot
from .datagen import SynthConfig, subset_from_string
from .encoders import MODALITIES
from .errors import ConfigError, ContractViolation, DataFormatError, NumericError
from .manifest import RunManifest
from .model import ABLATIONS, Ablation, ModelDims, ModelHyper, Predictor
from .seeding import derive_seed, make_rng
from .training import TrainConfig, fit, load_checkpoint, save_checkpoint

MODEL_ABLATIONS = ("wo-cmi", "wo-fimi", "wo-amre", "wo-pi")
LOSS_ABLATIONS = ("wo-uni", "wo-phase")

# Flags with environment-variable mirrors (PRLF_<NAME>), plus their types.
_ENV_CASTS = {
    "config": str, "seed": int, "out": str, "p": float, "subset": str,
    "steps": int, "ablate": str, "epochs": int, "data": str, "val": str,
    "checkpoint": str, "samples": int, "rates": str, "seeds": int,
    "steps_sweep": str, "table": None,
}


def _apply_env(args: argparse.Namespace) -> None:
    for dest, cast in _ENV_CASTS.items():
        if getattr(args, dest, None) is not None:
            continue
        raw = os.environ.get(cfgmod.ENV_PREFIX + dest.upper())
        if raw is None or not hasattr(args, dest):
            continue
        if cast is None:  # list-valued flags: comma-separated in the env
            setattr(args, dest, raw.split(","))
        else:
            try:
                setattr(args, dest, cast(raw))
            except ValueError:
                raise ConfigError(
                    f"environment {cfgmod.ENV_PREFIX}{dest.upper()}={raw!r}: "
                    f"expected {cast.__name__}") from None


def _resolved(args: argparse.Namespace) -> dict:
    file_values = cfgmod.load_config_file(args.config) if args.config else {}
    overrides: dict = {"run": {}, "training": {}}
    if getattr(args, "seed", None) is not None:
        overrides["run"]["seed"] = args.seed
    if getattr(args, "epochs", None) is not None:
        overrides["training"]["epochs"] = args.epochs
    if getattr(args, "steps", None) is not None:
        overrides["training"]["steps"] = args.steps
    return cfgmod.resolve(file_values, overrides)


def _require_file(path: str, what: str) -> str:
    if not os.path.isfile(path):
        raise _UsageError(f"{what} not found: {path}")
    return path


def _out_dir(args) -> str:
    if not args.out:
        raise _UsageError("--out is required")
    os.makedirs(args.out, exist_ok=True)
    return args.out


class _UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# command implementations
# ---------------------------------------------------------------------------


def _synth_config(cfg: dict, samples: int, seed: int) -> SynthConfig:
    d = cfg["datagen"]
    return SynthConfig(
        samples=samples,
        classes=d["classes"],
        seq_lens={"V": d["seq_len_v"], "A": d["seq_len_a"], "L": d["seq_len_l"]},
        feat_dims={"V": d["feat_dim_v"], "A": d["feat_dim_a"], "L": d["feat_dim_l"]},
        noise_scale=d["noise_scale"],
        key_frames=d["key_frames"],
        informative_probs={"V": d["informative_v"], "A": d["informative_a"],
                           "L": d["informative_l"]},
        with_scores=d["with_scores"],
        seed=seed,
    )


def cmd_gen_data(args) -> int:
    cfg = _resolved(args)
    out = _out_dir(args)
    seed = cfg["run"]["seed"]
    total = args.samples if args.samples is not None else cfg["datagen"]["samples"]
    n_train = round(total * cfg["datagen"]["train_fraction"])
    n_val = round(total * cfg["datagen"]["val_fraction"])
    n_test = total - n_train - n_val
    if min(n_train, n_val, n_test) < 1:
        raise _UsageError(f"split of {total} samples leaves an empty split")

    manifest = RunManifest("gen-data", cfg)
    balance = {}
    for split, prefix, count in (("train", "tr", n_train), ("val", "va", n_val),
                                 ("test", "te", n_test)):
        ds = datagen.generate(_synth_config(cfg, count, seed), split=split,
                              id_prefix=prefix)
        path = os.path.join(out, f"{split}.jsonl")
        datagen.save(ds, path)
        manifest.add_artifact(path)
        manifest.add_artifact(path + datagen.TRUTH_SUFFIX)
        labels = [s.label for s in ds.samples]
        balance[split] = {str(c): labels.count(c) / len(labels)
                          for c in range(ds.classes)}
    manifest.summary = {"samples": {"train": n_train, "val": n_val, "test": n_test},
                        "class_balance": balance}
    manifest.write(out)
    print(f"gen-data: wrote {total} samples to {out}")
    return 0


def _train_config(cfg: dict, classes: int, ablate: str) -> TrainConfig:
    t = cfg["training"]
    eta1 = 0.0 if ablate == "wo-uni" else t["eta1"]
    eta2 = 0.0 if ablate == "wo-phase" else t["eta2"]
    return TrainConfig(eta1=eta1, eta2=eta2, gamma=t["gamma"], steps=t["steps"],
                       lr=t["lr"], momentum=t["momentum"], optimizer=t["optimizer"],
                       epochs=t["epochs"], batch_size=t["batch_size"],
                       p_train=t["p_train"], classes=classes, seed=cfg["run"]["seed"])


def _model_parts(cfg: dict, dataset) -> tuple[ModelDims, ModelHyper]:
    m = cfg["model"]
    first = dataset.samples[0]
    dims = ModelDims(tokens=m["tokens"], dim=m["dim"], classes=dataset.classes,
                     seq_lens={mm: first.sequences[mm].shape[0] for mm in MODALITIES},
                     feat_dims={mm: first.sequences[mm].shape[1] for mm in MODALITIES})
    hyper = ModelHyper(steps=cfg["training"]["steps"], gamma=cfg["training"]["gamma"],
                       dropout=m["dropout"],
                       scalar_fusion_weight=m["scalar_fusion_weight"],
                       shared_decomposer=m["shared_decomposer"],
                       token_gate=m["token_gate"],
                       fisher_mode=m["fisher_mode"])
    return dims, hyper


def _fit_from_config(cfg: dict, dataset, ablate: str, val_dataset=None):
    tc = _train_config(cfg, dataset.classes, ablate)
    dims, hyper = _model_parts(cfg, dataset)
    model_ablation = Ablation(ablate if ablate in MODEL_ABLATIONS else "none")
    return fit(dataset, tc, dims=dims, hyper=hyper, ablation=model_ablation,
               val_dataset=val_dataset)


def _mu_summary(result) -> dict:
    last = result.history[-1]
    return {
        "mean_mu": [float(v) for v in last.mean_mu],
        "dominant_fraction": last.dominant_fraction,
        "mean_w": [float(v) for v in last.mean_w],
        "frozen_w": [float(v) for v in result.frozen_w],
    }


def cmd_train(args) -> int:
    cfg = _resolved(args)
    out = _out_dir(args)
    ablate = args.ablate or "none"
    if ablate not in ABLATIONS:
        raise _UsageError(f"unknown ablation {ablate!r}; choose from {ABLATIONS}")
    data_path = _require_file(args.data, "dataset")
    dataset = datagen.load(data_path)
    val_dataset = None
    manifest = RunManifest("train", cfg)
    manifest.add_input(data_path)
    if args.val:
        val_dataset = datagen.load(_require_file(args.val, "validation dataset"))
        manifest.add_input(args.val)

    result = _fit_from_config(cfg, dataset, ablate, val_dataset=val_dataset)

    ckpt_path = os.path.join(out, "checkpoint.prlf")
    save_checkpoint(ckpt_path, result)
    log_path = os.path.join(out, "loss_log.tsv")
    with open(log_path, "w", encoding="utf-8") as fh:
        fh.write("epoch\tmask_seed\ttotal\ttask\tuni\tphase\tw_v\tw_a\tw_l\n")
        for h in result.history:
            fh.write("\t".join([str(h.epoch), str(h.mask_seed), repr(h.loss_total),
                                repr(h.loss_task), repr(h.loss_uni),
                                repr(h.loss_phase)]
                               + [repr(float(v)) for v in h.mean_w]) + "\n")
    manifest.add_artifact(ckpt_path)
    manifest.add_artifact(log_path)
    manifest.summary = {
        "ablation": ablate,
        "final_loss": result.history[-1].loss_total,
        "mu_stats": _mu_summary(result),
        "val_metrics": result.val_metrics,
    }
    manifest.write(out)
    final = result.history[-1].loss_total
    print(f"train: {cfg['training']['epochs']} epochs, final loss {final:.6f}, "
          f"checkpoint {ckpt_path}")
    return 0


def _masked_samples(dataset, p: float | None, subset: str | None, seed: int):
    samples = dataset.samples
    if subset:
        available = subset_from_string(subset)
        samples = [datagen.apply_inter_mask(s, available) for s in samples]
    if p is not None and p > 0:
        samples = [datagen.apply_intra_mask(s, p, make_rng(seed, "intra", s.id))
                   for s in samples]
    return samples


def cmd_eval(args) -> int:
    cfg = _resolved(args)
    out = _out_dir(args)
    ckpt = load_checkpoint(_require_file(args.checkpoint, "checkpoint"))
    dataset = datagen.load(_require_file(args.data, "dataset"))
    seed = cfg["run"]["seed"]
    samples = _masked_samples(dataset, args.p, args.subset, seed)
    result = evalbench.evaluate(ckpt.predictor(), samples,
                                f1_mode=cfg["eval"]["f1_mode"])
    condition = args.subset or (f"p={args.p:g}" if args.p is not None else "full")
    mae = "-" if result.mae is None else f"{result.mae:.6f}"
    print(f"eval[{condition}]\tf1={result.f1:.6f}\tacc2={result.acc2:.6f}"
          f"\tmae={mae}\tn={result.n}")

    manifest = RunManifest("eval", cfg)
    manifest.add_input(args.checkpoint)
    manifest.add_input(args.data)
    metrics_path = os.path.join(out, "metrics.json")
    import json

    with open(metrics_path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"condition": condition, **result.as_dict()},
                            sort_keys=True, indent=2) + "\n")
    manifest.add_artifact(metrics_path)
    manifest.summary = {"condition": condition, **result.as_dict()}
    manifest.write(out)
    return 0


def _eval_seeds(cfg: dict, args) -> list[int]:
    count = args.seeds if args.seeds is not None else cfg["eval"]["seeds"]
    base = cfg["run"]["seed"]
    return [derive_seed(base, "eval-seed", i) for i in range(count)]


def _sweep_summary(rows) -> list[dict]:
    return [{"condition": r.condition, "mean_f1": r.mean_f1, "std_f1": r.std_f1,
             "mean_acc": r.mean_acc, "mean_mae": r.mean_mae} for r in rows]


def cmd_sweep_intra(args) -> int:
    cfg = _resolved(args)
    out = _out_dir(args)
    ckpt = load_checkpoint(_require_file(args.checkpoint, "checkpoint"))
    dataset = datagen.load(_require_file(args.data, "dataset"))
    rates = cfgmod.parse_rate_list(args.rates or cfg["eval"]["rates"])
    rows = evalbench.sweep_intra(ckpt.predictor(), dataset, rates=rates,
                                 seeds=_eval_seeds(cfg, args),
                                 f1_mode=cfg["eval"]["f1_mode"])
    table = os.path.join(out, "sweep_intra.tsv")
    evalbench.write_sweep_table(table, rows)
    manifest = RunManifest("sweep-intra", cfg)
    manifest.add_input(args.checkpoint)
    manifest.add_input(args.data)
    manifest.add_artifact(table)
    manifest.summary = {"rows": _sweep_summary(rows)}
    manifest.write(out)
    for r in rows:
        print(f"{r.condition}\tf1={r.mean_f1:.6f}±{r.std_f1:.6f}")
    return 0


def cmd_sweep_inter(args) -> int:
    cfg = _resolved(args)
    out = _out_dir(args)
    ckpt = load_checkpoint(_require_file(args.checkpoint, "checkpoint"))
    dataset = datagen.load(_require_file(args.data, "dataset"))
    rows = evalbench.sweep_inter(ckpt.predictor(), dataset,
                                 seeds=_eval_seeds(cfg, args),
                                 f1_mode=cfg["eval"]["f1_mode"])
    table = os.path.join(out, "sweep_inter.tsv")
    evalbench.write_sweep_table(table, rows)
    manifest = RunManifest("sweep-inter", cfg)
    manifest.add_input(args.checkpoint)
    manifest.add_input(args.data)
    manifest.add_artifact(table)
    manifest.summary = {"rows": _sweep_summary(rows)}
    manifest.write(out)
    for r in rows:
        print(f"{r.condition}\tf1={r.mean_f1:.6f}")
    return 0


def cmd_ablate(args) -> int:
    cfg = _resolved(args)
    out = _out_dir(args)
    dataset = datagen.load(_require_file(args.data, "dataset"))
    test_path = args.val or args.data
    test_dataset = datagen.load(_require_file(test_path, "evaluation dataset"))
    p = args.p if args.p is not None else 0.5
    seeds = _eval_seeds(cfg, args)

    if args.steps_sweep:
        try:
            step_grid = [int(tok) for tok in args.steps_sweep.split(",")]
        except ValueError:
            raise _UsageError(f"bad --steps-sweep {args.steps_sweep!r}")
        variants = [(f"steps={k}", "none", k) for k in step_grid]
    elif args.ablate == "all":
        variants = [(name, name, None) for name in ABLATIONS]
    else:
        name = args.ablate or "none"
        if name not in ABLATIONS:
            raise _UsageError(f"unknown ablation {name!r}; choose from {ABLATIONS}")
        variants = [("none", "none", None)] if name == "none" else [
            ("none", "none", None), (name, name, None)]

    manifest = RunManifest("ablate", cfg)
    manifest.add_input(args.data)
    if args.val:
        manifest.add_input(args.val)
    rows = []
    mu_stats = {}
    for label, ablate_name, steps_override in variants:
        variant_cfg = {**cfg, "training": dict(cfg["training"])}
        if steps_override is not None:
            variant_cfg["training"]["steps"] = steps_override
        result = _fit_from_config(variant_cfg, dataset, ablate_name)
        predictor = Predictor(result.model, result.frozen_w)
        f1s = []
        for seed in seeds:
            masked = evalbench.mask_dataset_intra(test_dataset, p, seed)
            f1s.append(evalbench.evaluate(predictor, masked,
                                          f1_mode=cfg["eval"]["f1_mode"]).f1)
        rows.append((label, float(np.mean(f1s)), float(np.std(f1s)), f1s))
        mu_stats[label] = _mu_summary(result)
        print(f"ablate[{label}]\tf1@p={p:g}: {np.mean(f1s):.6f}±{np.std(f1s):.6f}")

    table = os.path.join(out, "ablate.tsv")
    with open(table, "w", encoding="utf-8") as fh:
        fh.write("variant\tmean_f1\tstd_f1\tf1_values\n")
        for label, mean_f1, std_f1, f1s in rows:
            fh.write(f"{label}\t{mean_f1!r}\t{std_f1!r}\t"
                     + ",".join(repr(v) for v in f1s) + "\n")
    manifest.add_artifact(table)
    manifest.summary = {
        "p": p,
        "rows": [{"variant": lbl, "mean_f1": m, "std_f1": s}
                 for lbl, m, s, _ in rows],
        "mu_stats": mu_stats,
    }
    manifest.write(out)
    return 0


def cmd_phase_diag(args) -> int:
    cfg = _resolved(args)
    out = _out_dir(args)
    ckpt = load_checkpoint(_require_file(args.checkpoint, "checkpoint"))
    dataset = datagen.load(_require_file(args.data, "dataset"))
    rates = cfgmod.parse_rate_list(args.rates or cfg["eval"]["phase_rates"])
    seed = cfg["run"]["seed"]
    rows = []
    for p in rates:
        angle, skipped = evalbench.phase_difference(ckpt.predictor(), dataset, p,
                                                    seed=seed)
        rows.append((p, angle, skipped))
        print(f"phase[p={p:g}]\tmean_angle_deg={angle:.4f}\tskipped={skipped}")
    table = os.path.join(out, "phase_diag.tsv")
    with open(table, "w", encoding="utf-8") as fh:
        fh.write("p\tmean_angle_deg\tskipped\n")
        for p, angle, skipped in rows:
            fh.write(f"{p:g}\t{angle!r}\t{skipped}\n")
    manifest = RunManifest("phase-diag", cfg)
    manifest.add_input(args.checkpoint)
    manifest.add_input(args.data)
    manifest.add_artifact(table)
    manifest.summary = {"rows": [{"p": p, "mean_angle_deg": a, "skipped": s}
                                 for p, a, s in rows]}
    manifest.write(out)
    return 0


def cmd_plot(args) -> int:
    cfg = _resolved(args)
    out = _out_dir(args)
    if not args.table:
        raise _UsageError("--table is required (one or more sweep tables)")
    series = []
    manifest = RunManifest("plot", cfg)
    for path in args.table:
        _require_file(path, "sweep table")
        manifest.add_input(path)
        rows = evalbench.read_sweep_table(path)
        xs, ys = [], []
        for row in rows:
            cond = row["condition"]
            if not cond.startswith("p="):
                continue
            xs.append(float(cond[2:]))
            ys.append(float(row["mean_f1"]))
        if not xs:
            raise _UsageError(f"{path}: no intra-rate rows (condition 'p=...') to plot")
        label = os.path.splitext(os.path.basename(path))[0]
        series.append((label, xs, ys))
    svg_path = os.path.join(out, "plot.svg")
    svgplot.write_line_plot(svg_path, series, xlabel="drop rate p",
                            ylabel="F1", title="F1 under intra-modality missingness")
    manifest.add_artifact(svg_path)
    manifest.summary = {"series": [lbl for lbl, _, _ in series]}
    manifest.write(out)
    print(f"plot: wrote {svg_path}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="prlf",
        description="Progressive multimodal fusion under missing modalities: "
                    "data generation, training, evaluation sweeps.",
        epilog="Every flag can also be set via environment variables with the "
               "PRLF_ prefix (e.g. PRLF_SEED=7). Precedence: flag > environment "
               "> config file > default.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser, out_required: bool = True):
        p.add_argument("--config", help="INI config file")
        p.add_argument("--seed", type=int, help="master seed")
        p.add_argument("--out", required=False, help="output directory")

    p = sub.add_parser("gen-data", help="generate synthetic train/val/test datasets")
    common(p)
    p.add_argument("--samples", type=int, help="total samples across splits")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    common(p)
    p.add_argument("--data", help="training dataset (.jsonl)")
    p.add_argument("--val", help="validation dataset (.jsonl)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--steps", type=int, help="interaction iterations")
    p.add_argument("--ablate", help=f"one of {', '.join(ABLATIONS)}")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint, print the metric row")
    common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--p", type=float, help="intra-modality drop rate")
    p.add_argument("--subset", help="available modalities, e.g. 'la' or 'lav'")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep-intra", help="F1 across drop rates")
    common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--rates", help="comma-separated drop rates")
    p.add_argument("--seeds", type=int, help="number of evaluation seeds")
    p.set_defaults(func=cmd_sweep_intra)

    p = sub.add_parser("sweep-inter", help="F1 across availability subsets")
    common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--seeds", type=int)
    p.set_defaults(func=cmd_sweep_inter)

    p = sub.add_parser("ablate", help="train and score ablation variants")
    common(p)
    p.add_argument("--data", help="training dataset")
    p.add_argument("--val", help="evaluation dataset (defaults to --data)")
    p.add_argument("--ablate", help="variant name, or 'all'")
    p.add_argument("--steps-sweep", dest="steps_sweep",
                   help="comma-separated steps grid, e.g. 1,2,3,4,5")
    p.add_argument("--p", type=float, help="evaluation drop rate (default 0.5)")
    p.add_argument("--seeds", type=int)
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("phase-diag", help="masked-vs-complete feature angles")
    common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--rates", help="comma-separated drop rates")
    p.set_defaults(func=cmd_phase_diag)

    p = sub.add_parser("plot", help="render F1-vs-p curves from sweep tables")
    common(p)
    p.add_argument("--table", action="append", help="sweep table (repeatable)")
    p.set_defaults(func=cmd_plot)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse uses exit code 2 for usage errors
        return int(exc.code or 0)
    try:
        _apply_env(args)
        for dest in ("data", "checkpoint"):
            if hasattr(args, dest) and getattr(args, dest) is None:
                raise _UsageError(f"--{dest} is required")
        return args.func(args)
    except (_UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (DataFormatError, ContractViolation, NumericError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
