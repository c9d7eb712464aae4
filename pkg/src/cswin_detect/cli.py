"""Command-line entry points: synth, pretrain, finetune, predict, eval, gradcheck.

Every subcommand takes ``--config <json>`` and ``--seed``. Failures print a
one-line JSON object ``{"error", "message", "exit_code"}`` on stderr and
exit with a code that identifies the failure class (see ``EXIT_CODES``).
"""
from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from pathlib import Path


EXIT_CODES = {
    "ok": 0,
    "internal": 1,
    "usage": 2,
    "io": 3,
    "config": 4,
    "architecture": 5,
    "diverged": 6,
    "check_failed": 7,
}


class CliError(Exception):
    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind
        self.code = EXIT_CODES[kind]


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        _report("usage", message)
        sys.exit(EXIT_CODES["usage"])


def _report(kind, message):
    print(json.dumps({"error": kind, "message": message, "exit_code": EXIT_CODES[kind]}), file=sys.stderr)


def _dump(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n")


def _read_json(path, what):
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError as e:
        raise CliError("io", f"{what} not found: {path}") from e
    except (OSError, json.JSONDecodeError) as e:
        raise CliError("io", f"cannot read {what} {path}: {e}") from e


def _config(args, cls, extra_keys=()):
    """Build ``cls`` from the --config file; ``--seed`` wins over the file."""
    raw = _read_json(args.config, "config") if args.config else {}
    if not isinstance(raw, dict):
        raise CliError("config", "config must be a JSON object")
    extra = {k: raw.pop(k) for k in list(raw) if k in extra_keys}
    if args.seed is not None and "seed" in getattr(cls, "__dataclass_fields__", {}):
        raw["seed"] = args.seed
    try:
        return cls(**raw), extra
    except (TypeError, ValueError) as e:
        raise CliError("config", f"invalid {cls.__name__}: {e}") from e


# -- subcommands -----------------------------------------------------------

def cmd_synth(args):
    from .data import SynthConfig, synth

    cfg, _ = _config(args, SynthConfig)
    seed = 0 if args.seed is None else args.seed
    manifest = synth(args.n, seed, args.out, cfg)
    return {"cases": len(manifest["cases"]), "out": str(args.out)}


def _dataset(path):
    from .data import load_dataset

    try:
        return load_dataset(path)
    except FileNotFoundError as e:
        raise CliError("io", f"data not found: {e.filename or path}") from e
    except (OSError, json.JSONDecodeError, KeyError) as e:
        raise CliError("io", f"cannot read data in {path}: {e}") from e


def cmd_pretrain(args):
    from .pretrain import PretrainConfig, pretrain, save_pretrained

    cfg, _ = _config(args, PretrainConfig)
    ds = _dataset(args.data)
    try:
        res = pretrain(ds.images, cfg)
    except ValueError as e:
        raise CliError("config", str(e)) from e
    save_pretrained(args.out, res, cfg)
    _dump(args.history or f"{args.out}.history.json", res.history)
    return {"checkpoint": str(args.out), "epochs": len(res.history), "steps": res.steps}


def split_cases(ids, labeled_fraction: float, val_fold: int, seed: int):
    """Validation = cases in ``val_fold``; labeled = seeded subset of the rest."""
    from .finetune import fold_of
    from .numeric import numpy_rng

    val = [i for i, c in enumerate(ids) if fold_of(c) == val_fold]
    pool = [i for i, c in enumerate(ids) if fold_of(c) != val_fold]
    k = max(1, min(len(pool), round(labeled_fraction * len(ids))))
    order = numpy_rng(seed, 4).permutation(len(pool))
    return sorted(pool[j] for j in order[:k]), val


def cmd_finetune(args):
    from .checkpoint import ArchitectureMismatch, CheckpointError
    from .finetune import FinetuneConfig, finetune, save_model

    cfg, extra = _config(args, FinetuneConfig, ("labeled_fraction", "val_fold"))
    if args.init:
        cfg.init = args.init
    frac = args.labeled_fraction if args.labeled_fraction is not None else extra.get("labeled_fraction", 1.0)
    val_fold = args.val_fold if args.val_fold is not None else extra.get("val_fold", 0)
    ds = _dataset(args.data)
    train_idx, val_idx = split_cases(ds.ids, frac, val_fold, cfg.seed)
    tr, va = ds.subset(train_idx), ds.subset(val_idx)
    try:
        res = finetune(tr.images, tr.masks, cfg, va.images if len(va) else None, va.masks if len(va) else None)
    except ArchitectureMismatch as e:
        raise CliError("architecture", str(e)) from e
    except (CheckpointError, FileNotFoundError) as e:
        raise CliError("io", f"cannot load init checkpoint: {e}") from e
    save_model(args.out, res.model, cfg, extra={"train_ids": tr.ids, "val_ids": va.ids})
    _dump(args.history or f"{args.out}.history.json", res.history)
    return {"checkpoint": str(args.out), "train_cases": len(tr), "val_cases": len(va), "steps": res.steps}


def cmd_predict(args):
    from .checkpoint import ArchitectureMismatch, CheckpointError
    from .data import Volume, write_volume
    from .finetune import load_model, predict_probs

    try:
        model = load_model(args.checkpoint)
    except FileNotFoundError as e:
        raise CliError("io", f"checkpoint not found: {args.checkpoint}") from e
    except ArchitectureMismatch as e:
        raise CliError("architecture", str(e)) from e
    except (CheckpointError, KeyError) as e:
        raise CliError("io", f"unusable checkpoint {args.checkpoint}: {e}") from e
    manifest = _read_json(Path(args.data) / "manifest.json", "data manifest")
    ds = _dataset(args.data)
    probs = predict_probs(model, ds.images)
    from .data import PreprocessConfig

    spacing = PreprocessConfig(**manifest.get("preprocess", {})).out_spacing
    out = Path(args.out)
    cases = []
    for cid, p in zip(ds.ids, probs):
        write_volume(out / f"{cid}_det", Volume(p[None], spacing, ("DET",)))
        cases.append({"id": cid, "detection": f"{cid}_det.json"})
    _dump(out / "manifest.json", {"checkpoint": str(args.checkpoint), "cases": cases})
    return {"predictions": len(cases), "out": str(out)}


def _write_csv(path, header, rows):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def cmd_eval(args):
    from .data import PreprocessConfig, preprocess_mask, read_volume
    from .evaluation import EvalSettings, evaluate, evaluate_case

    settings, _ = _config(args, EvalSettings)
    gt_manifest = _read_json(Path(args.data) / "manifest.json", "data manifest")
    pred_manifest = _read_json(Path(args.pred) / "manifest.json", "prediction manifest")
    pcfg = PreprocessConfig(**gt_manifest.get("preprocess", {}))
    preds = {c["id"]: c["detection"] for c in pred_manifest["cases"]}
    records = []
    try:
        for case in gt_manifest["cases"]:
            if case["id"] not in preds:
                raise CliError("io", f"no prediction for case {case['id']}")
            det = read_volume(Path(args.pred) / preds[case["id"]]).data[0]
            gt = preprocess_mask(read_volume(Path(args.data) / case["mask"]), pcfg)
            records.append(evaluate_case(case["id"], det, gt, settings.rel_threshold, settings.min_peak,
                                         settings.connectivity, settings.min_dice))
    except (OSError, ValueError) as e:
        raise CliError("io", f"cannot read evaluation inputs: {e}") from e
    metrics = evaluate(records)
    _dump(args.out, metrics)
    if args.csv:
        d = Path(args.csv)
        for name, cols in (("roc", ("fpr", "tpr", "threshold")), ("pr", ("recall", "precision", "threshold"))):
            _write_csv(d / f"{name}.csv", cols, ([row[c] for c in cols] for row in metrics[f"{name}_curve"]))
    return {"auroc": metrics["auroc"], "ap": metrics["ap"], "out": str(args.out)}


def cmd_gradcheck(args):
    from .gradsuite import TOL, run_suite

    raw = _read_json(args.config, "config") if args.config else {}
    unknown = set(raw) - {"max_elements", "tol", "unet_shape", "unet_elements"}
    if unknown:
        raise CliError("config", f"unknown gradcheck keys: {sorted(unknown)}")
    try:
        report = run_suite(
            seed=0 if args.seed is None else args.seed,
            max_elements=int(raw.get("max_elements", 32)),
            tol=float(raw.get("tol", TOL)),
            unet_shape=tuple(raw.get("unet_shape", (32, 32, 16))),
            unet_elements=int(raw.get("unet_elements", 8)),
        )
    except (TypeError, ValueError) as e:
        raise CliError("config", f"invalid gradcheck config: {e}") from e
    if args.out:
        _dump(args.out, report)
    if not report["passed"]:
        failed = [k for k, v in report["checks"].items() if not v["passed"]]
        raise CliError("check_failed", f"gradient checks failed: {', '.join(failed)}")
    return {"passed": True, "worst": max(c["max_rel_error"] for c in report["checks"].values()), "seconds": report["seconds"]}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cswin-detect", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, fn, help):
        s = sub.add_parser(name, help=help)
        s.add_argument("--config", help="JSON config file")
        s.add_argument("--seed", type=int, help="overrides the seed in the config")
        s.set_defaults(fn=fn)
        return s

    s = add("synth", cmd_synth, "generate synthetic phantoms")
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--out", required=True)

    s = add("pretrain", cmd_pretrain, "self-supervised encoder pretraining")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True, help="checkpoint path")
    s.add_argument("--history", help="loss-history JSON (default: <out>.history.json)")

    s = add("finetune", cmd_finetune, "supervised finetuning")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True, help="checkpoint path")
    s.add_argument("--init", help="'random' or a pretraining checkpoint")
    s.add_argument("--labeled-fraction", type=float)
    s.add_argument("--val-fold", type=int)
    s.add_argument("--history", help="metric-history JSON (default: <out>.history.json)")

    s = add("predict", cmd_predict, "write detection maps")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)

    s = add("eval", cmd_eval, "lesion- and patient-level metrics")
    s.add_argument("--pred", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True, help="metrics JSON path")
    s.add_argument("--csv", help="directory for roc.csv / pr.csv")

    s = add("gradcheck", cmd_gradcheck, "float64 finite-difference suite")
    s.add_argument("--out", help="report JSON path")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    from .training import TrainingDiverged

    try:
        summary = args.fn(args)
    except CliError as e:
        _report(e.kind, str(e))
        return e.code
    except TrainingDiverged as e:
        _report("diverged", str(e))
        return EXIT_CODES["diverged"]
    except Exception as e:  # noqa: BLE001 - last-resort structured report
        _report("internal", f"{type(e).__name__}: {e}")
        return EXIT_CODES["internal"]
    print(json.dumps(summary, sort_keys=True, default=lambda o: None if isinstance(o, float) and math.isnan(o) else str(o)))
    return 0


if __name__ == "__main__":
    sys.exit(main())
