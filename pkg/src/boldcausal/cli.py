"""Command-line interface: simulate, train, infer, evaluate, gc-baseline, flops, export.

Every run writes ``<output>.manifest.json`` (or ``manifest.json`` inside an
output directory) recording the command, configuration, seed and input
digests. ``CMB_SEED`` in the environment overrides any seed.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .io import RunConfig, desk_config, read_container, write_container, write_manifest

log = logging.getLogger("boldcausal")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _seed(args_seed: int | None, cfg_seed: int) -> int:
    env = os.environ.get("CMB_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise UsageError(f"CMB_SEED must be an integer, got {env!r}") from None
    return cfg_seed if args_seed is None else args_seed


def _config(path) -> RunConfig:
    return RunConfig.load(path) if path else desk_config()


def _manifest_for(out: Path) -> Path:
    return out / "manifest.json" if out.is_dir() else out.with_name(out.name + ".manifest.json")


def _parse_range(text: str) -> list[int]:
    try:
        if ".." in text:
            lo, hi = text.split("..", 1)
            return list(range(int(lo), int(hi) + 1))
        return [int(v) for v in text.split(",")]
    except ValueError:
        raise UsageError(f"bad range {text!r}; use LO..HI or a comma list") from None


def _split_index(n: int, split: str) -> np.ndarray:
    from .training import split_indices

    if split == "all":
        return np.arange(n)
    return split_indices(n)[split]


# -- subcommands -------------------------------------------------------------

def cmd_simulate(args) -> int:
    from .simgen import DatasetConfig, generate_dataset

    cfg = _config(args.config)
    seed = _seed(args.seed, cfg.seed)
    dcfg = DatasetConfig(n_samples=args.n_samples or cfg.n_samples, n_roi=args.n_roi or cfg.n_roi,
                         duration=cfg.duration, dt=cfg.dt, tr=cfg.tr)
    out = Path(args.out)
    generate_dataset(dcfg, base_seed=seed, out=out, workers=args.workers)
    write_manifest(_manifest_for(out), "simulate", dcfg.to_dict(), seed)
    print(f"wrote {dcfg.n_samples} samples with {dcfg.n_roi} ROIs to {out}")
    return EXIT_OK


def _train_config(cfg: RunConfig, args, seed: int):
    from .training import TrainConfig

    return TrainConfig(
        stage=args.stage, ablation=args.ablation, seed=seed,
        lr_stage1=cfg.learning_rate_stage1, lr_stage2=cfg.learning_rate_stage2,
        lr_stage3=cfg.learning_rate_stage3, batch_size=cfg.batch_size,
        epochs=args.epochs or cfg.epochs, weight_decay=cfg.weight_decay, warmup_epochs=cfg.warmup_epochs,
        grad_clip=cfg.gradient_clip, d_model=cfg.d_model, d_state=cfg.d_state, d_conv=cfg.d_conv,
        expand=cfg.expand, dropout=cfg.dropout, stage2_input=args.stage2_input,
    )


def cmd_train(args) -> int:
    from .training import Curriculum, prepare, save_checkpoint

    cfg = _config(args.config)
    seed = _seed(args.seed, cfg.seed)
    tcfg = _train_config(cfg, args, seed)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dataset = read_container(args.data)
    cur = Curriculum(tcfg, prepare(dataset, tcfg.splits))
    cur.run()
    cur.log.write(out / "metrics.csv")
    save_checkpoint(out / "checkpoint.cmb", cur)
    test = cur.evaluate("test") if len(cur.data.splits["test"]) else {}
    (out / "summary.json").write_text(json.dumps({"test": test, "config": tcfg.to_dict()}, indent=2) + "\n")
    write_manifest(_manifest_for(out), "train", tcfg.to_dict(), seed, inputs=[args.data])
    print(f"test accuracy {test.get('accuracy', float('nan')):.4f}; outputs in {out}")
    return EXIT_OK


def cmd_infer(args) -> int:
    from .training import load_checkpoint

    dataset = read_container(args.data)
    cur = load_checkpoint(args.checkpoint, dataset)
    idx = _split_index(len(dataset["bold"]), args.split)
    from .deconv import zscore

    S, delays = cur.predict_bold(zscore(dataset["bold"][idx]))
    out = Path(args.out)
    write_container(out, {"S": S, "delays": delays, "index": idx.astype(np.int64)},
                    meta={"kind": "prediction", "source": "model", "split": args.split})
    write_manifest(_manifest_for(out), "infer", {"split": args.split}, cur.cfg.seed,
                   inputs=[args.checkpoint, args.data])
    print(f"wrote predictions for {len(idx)} samples to {out}")
    return EXIT_OK


def _load_pred(path, truth: dict):
    pred = read_container(path)
    if "S" not in pred:
        raise ValueError(f"{path} holds no 'S' tensor")
    idx = pred.get("index", np.arange(len(pred["S"])))
    if idx.max(initial=-1) >= len(truth["coupling"]):
        raise ValueError("prediction indices exceed the truth dataset")
    return pred, idx


def cmd_evaluate(args) -> int:
    from .metrics import (F1Config, Pathway, causality_accuracy, coupling_loss, discretize, jaccard, kprr,
                          link_f1, select_thresholds)

    truth = read_container(args.truth)
    pred, idx = _load_pred(args.pred, truth)
    W = truth["coupling"][idx]
    S = pred["S"]
    C_pred = pred["C"] if "C" in pred else discretize(S, args.tau_self)
    C_true = discretize(W, args.tau_self)
    pathway = Pathway.from_json(args.pathway) if args.pathway else None
    metrics = {
        "n_samples": int(len(idx)),
        "causality_accuracy": causality_accuracy(C_pred, C_true),
        "coupling_loss": coupling_loss(S, W) if "C" not in pred else None,
        "jaccard": jaccard(C_pred, C_true),
    }
    if pathway is not None:
        metrics["kprr"] = kprr(C_pred, pathway)
    f1_kw = {"normalize": args.normalize, "dominant_rule": args.dominant}
    if pathway is not None and args.omega == "within-pathway":
        f1_kw.update(omega="within-pathway", pathway=pathway)
    if args.fit_thresholds_on:
        vpred, vidx = _load_pred(args.fit_thresholds_on, truth)
        tp, tn, obj = select_thresholds(list(vpred["S"]), list(discretize(truth["coupling"][vidx], args.tau_self)),
                                        F1Config(**f1_kw))
        metrics.update(tau_pos=tp, tau_neg=tn, threshold_objective=obj)
        f1_kw.update(tau_pos=tp, tau_neg=tn)
    metrics.update(link_f1(S, C_true, F1Config(**f1_kw)))
    out = Path(args.out)
    out.write_text(json.dumps(metrics, indent=2) + "\n")
    per = out.with_suffix(".csv")
    with open(per, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "causality_accuracy", "coupling_loss"])
        for k, i in enumerate(idx):
            w.writerow([int(i), causality_accuracy(C_pred[k], C_true[k]),
                        "" if "C" in pred else float(np.abs(S[k] - W[k]).mean())])
    write_manifest(_manifest_for(out), "evaluate", vars_clean(args), None, inputs=[args.pred, args.truth])
    print(json.dumps({k: metrics[k] for k in ("causality_accuracy", "jaccard")}))
    return EXIT_OK


def cmd_gc(args) -> int:
    from .granger import gc_graph

    cfg = _config(args.config)
    data = read_container(args.data)
    idx = _split_index(len(data["bold"]), args.split)
    order = args.order or cfg.gc_order
    alpha = args.alpha or cfg.gc_alpha
    results = [gc_graph(data["bold"][i], order, alpha) for i in idx]
    out = Path(args.out)
    out.write_text(json.dumps({"order": order, "alpha": alpha, "index": idx.tolist(),
                               "results": [r.to_dict() for r in results]}) + "\n")
    if args.pred_out:
        write_container(args.pred_out, {"S": np.stack([r.F for r in results]),
                                        "C": np.stack([r.graph for r in results]),
                                        "index": idx.astype(np.int64)},
                        meta={"kind": "prediction", "source": "granger", "order": order, "alpha": alpha})
    write_manifest(_manifest_for(out), "gc-baseline", {"order": order, "alpha": alpha, "split": args.split},
                   None, inputs=[args.data])
    print(f"tested {len(idx)} samples; results in {out}")
    return EXIT_OK


def cmd_flops(args) -> int:
    from .condmamba import MambaConfig
    from .flops import flops_table, linear_fit, write_flops_csv

    cfg = _config(args.config)
    ns = _parse_range(args.roi_range)
    if min(ns) < 2:
        raise UsageError("ROI counts must be >= 2")
    mc = MambaConfig(d_model=cfg.d_model, d_state=cfg.d_state, d_conv=cfg.d_conv, expand=cfg.expand)
    reports = flops_table(mc, ns, args.seq_len)
    out = Path(args.out)
    write_flops_csv(out, reports)
    if args.figure:
        from .plotting import flops_figure

        flops_figure(args.figure, ns, [r.total for r in reports])
    _, _, r2 = linear_fit(ns, [r.total for r in reports])
    write_manifest(_manifest_for(out), "flops", {"roi_range": ns, "seq_len": args.seq_len, **mc.to_dict()}, None)
    print(f"R^2 of linear fit: {r2:.6f}")
    return EXIT_OK


def cmd_export(args) -> int:
    from .metrics import discretize
    from .plotting import coupling_heatmaps, normalize_for_display, training_curves

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    truth = read_container(args.truth)
    pred, idx = _load_pred(args.pred, truth)
    picks = _parse_range(args.samples) if args.samples else list(range(min(3, len(idx))))
    for k in picks:
        if not 0 <= k < len(idx):
            raise UsageError(f"sample {k} outside the prediction set (size {len(idx)})")
        i = int(idx[k])
        W, S = truth["coupling"][i], pred["S"][k]
        stem = out / f"coupling_{i:05d}"
        with open(stem.with_suffix(".csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["source", "target", "true", "predicted", "true_display", "predicted_display",
                        "true_class", "predicted_class"])
            Wn, Sn = normalize_for_display(W), normalize_for_display(S)
            Ct, Cp = discretize(W), discretize(S)
            for a in range(W.shape[0]):
                for b in range(W.shape[1]):
                    w.writerow([a, b, W[a, b], S[a, b], Wn[a, b], Sn[a, b], int(Ct[a, b]), int(Cp[a, b])])
        coupling_heatmaps(stem.with_suffix(".svg"), {"ground truth": W, "predicted": S},
                          title=f"sample {i}")
    if args.log:
        with open(args.log, newline="") as fh:
            rows = list(csv.DictReader(fh))
        training_curves(out / "training_curves.svg", rows)
    write_manifest(_manifest_for(out), "export", {"samples": picks}, None, inputs=[args.pred, args.truth])
    print(f"exported {len(picks)} figures to {out}")
    return EXIT_OK


def vars_clean(args) -> dict:
    return {k: v for k, v in vars(args).items() if k != "func"}


# -- parser ------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    from .training import ABLATIONS, STAGES

    p = _Parser(prog="boldcausal", description="BOLD deconvolution and causal graph inference")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", help="generate a synthetic dataset container")
    s.add_argument("--n-roi", type=int)
    s.add_argument("--n-samples", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("train", help="run the training curriculum")
    s.add_argument("--data", required=True)
    s.add_argument("--stage", choices=STAGES, default="all")
    s.add_argument("--ablation", choices=ABLATIONS, default="none")
    s.add_argument("--stage2-input", choices=("estimate", "truth"), default="estimate")
    s.add_argument("--epochs", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--config")
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("infer", help="predict coupling and delays with a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--split", choices=("train", "val", "test", "all"), default="test")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("evaluate", help="score predictions against ground truth")
    s.add_argument("--pred", required=True)
    s.add_argument("--truth", required=True)
    s.add_argument("--pathway")
    s.add_argument("--omega", choices=("global", "within-pathway"), default="global")
    s.add_argument("--dominant", action="store_true")
    s.add_argument("--normalize", action="store_true")
    s.add_argument("--fit-thresholds-on", help="prediction container of the validation split")
    s.add_argument("--tau-self", type=float, default=0.1)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("gc-baseline", help="conditional Granger causality on BOLD")
    s.add_argument("--data", required=True)
    s.add_argument("--split", choices=("train", "val", "test", "all"), default="test")
    s.add_argument("--order", type=int)
    s.add_argument("--alpha", type=float)
    s.add_argument("--config")
    s.add_argument("--pred-out", help="also write a prediction container for evaluate")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_gc)

    s = sub.add_parser("flops", help="analytic FLOPs table over ROI counts")
    s.add_argument("--roi-range", default="3..8")
    s.add_argument("--seq-len", type=int, default=375)
    s.add_argument("--config")
    s.add_argument("--figure")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_flops)

    s = sub.add_parser("export", help="coupling heatmaps (SVG) with CSV tables")
    s.add_argument("--pred", required=True)
    s.add_argument("--truth", required=True)
    s.add_argument("--samples", help="positions in the prediction set, e.g. 0,1,2 or 0..4")
    s.add_argument("--log", help="training metrics CSV for a loss-curve figure")
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_export)
    return p


def run_cli(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"boldcausal: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:       # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"boldcausal: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (KeyError, ValueError, OSError, RuntimeError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"boldcausal: {args.command} failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(run_cli())
