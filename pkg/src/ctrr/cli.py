"""``ctrr`` command line: data generation, noise injection, training, probing and audits.

Exit status is 0 on success, 1 on a domain error (bad config, enumeration limit,
failed verification) and 2 on a usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import audit, info_theory
from .io import atomic_write_text, dumps_json, git_blob_hash
from .model import ArchSpec, load_params, save_params
from .noise import (NoiseSpec, dataset_to_bytes, gen_blobs, gen_blobs_split, load_dataset,
                    save_dataset)
from .training import (RunMetrics, TrainConfig, TrainingError, cluster_cosines, linear_probe,
                       train_run)

log = logging.getLogger("ctrr")


class DomainError(Exception):
    """Raised for invalid configs and inputs; maps to exit status 1."""


def _thread_limit():
    raw = os.environ.get("CTRR_THREADS")
    if not raw:
        return nullcontext()
    try:
        n = int(raw)
    except ValueError:
        raise DomainError(f"CTRR_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise DomainError(f"CTRR_THREADS must be a positive integer, got {raw!r}")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DomainError(f"cannot read JSON config {path}: {exc}") from None


def _load_dataset(path):
    try:
        return load_dataset(path)
    except (OSError, ValueError) as exc:
        raise DomainError(f"cannot read dataset {path}: {exc}") from None


# ---------------------------------------------------------------- subcommands


def cmd_gen_data(a) -> None:
    if a.test_per_class:
        train, test = gen_blobs_split(a.classes, a.per_class, a.test_per_class, a.dim, a.spread,
                                      a.seed, a.separation)
        save_dataset(a.out, train)
        save_dataset(a.test_out or Path(str(a.out) + ".test"), test)
    else:
        save_dataset(a.out, gen_blobs(a.classes, a.per_class, a.dim, a.spread, a.seed, a.separation))


def cmd_inject_noise(a) -> None:
    ds = _load_dataset(a.data)
    cmap = None
    if a.class_map:
        cmap = {int(k): int(v) for k, v in json.loads(a.class_map).items()}
    spec = NoiseSpec(a.kind.replace("-", "_"), a.rate, a.seed, cmap)
    save_dataset(a.out, spec.apply(ds))


def _run_config(a) -> dict:
    cfg = _read_json(a.config)
    unknown = set(cfg) - {"dataset", "test_dataset", "arch", "train"}
    if unknown:
        raise DomainError(f"unknown config keys: {sorted(unknown)}")
    if "dataset" not in cfg:
        raise DomainError("config needs a 'dataset' path")
    base = Path(a.config).parent
    for k in ("dataset", "test_dataset"):
        if cfg.get(k) is not None:
            cfg[k] = str(base / cfg[k])
    return cfg


def cmd_train(a) -> None:
    cfg = _run_config(a)
    data_bytes = Path(cfg["dataset"]).read_bytes()
    ds = _load_dataset(cfg["dataset"])
    test = _load_dataset(cfg["test_dataset"]) if cfg.get("test_dataset") else None
    train_cfg = TrainConfig.from_dict(cfg.get("train", {}))
    arch = ArchSpec(**{"input_dim": ds.dim, "num_classes": ds.num_classes, **cfg.get("arch", {})})
    params, metrics = train_run(train_cfg, ds, arch, test)
    within, between = cluster_cosines(params, ds)
    out = Path(a.out)
    summary = {
        "config": {"dataset": cfg["dataset"], "test_dataset": cfg.get("test_dataset"),
                   "arch": arch.to_dict(), "train": train_cfg.to_dict()},
        "dataset_hash": git_blob_hash(data_bytes),
        "final": metrics.final,
        "best_test_accuracy": metrics.best_test_accuracy,
        "within_class_cosine": within,
        "between_class_cosine": between,
    }
    atomic_write_text(out / "metrics.csv", metrics.to_csv())
    atomic_write_text(out / "summary.json", dumps_json(summary))
    save_params(out / "model.ckpt", arch, params)


def cmd_probe(a) -> None:
    arch, params = load_params(a.checkpoint)
    ds = _load_dataset(a.data)
    test = _load_dataset(a.test) if a.test else None
    probe_cfg = TrainConfig.from_dict({"lam": 0.0, **(_read_json(a.config) if a.config else {})})
    _, metrics = linear_probe(params, ds, probe_cfg, test)
    out = Path(a.out)
    atomic_write_text(out / "probe_metrics.csv", metrics.to_csv())
    atomic_write_text(out / "probe_summary.json", dumps_json({
        "config": probe_cfg.to_dict(), "checkpoint": str(a.checkpoint), "arch": arch.to_dict(),
        "dataset_hash": git_blob_hash(dataset_to_bytes(ds)), "final": metrics.final,
        "best_test_accuracy": metrics.best_test_accuracy,
    }))


def cmd_grad_check(a) -> None:
    if a.samples < 1:
        raise DomainError("--samples must be >= 1")
    atomic_write_text(a.out, dumps_json(audit.grad_check_report(a.samples, a.seed)))


def _shape(text: str) -> tuple[int, int]:
    try:
        k, m = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected KxM, got {text!r}") from None
    return k, m


def _lemma1_tight_case() -> dict:
    p = np.full((1, 4), 0.25)
    r = info_theory.lemma1_bound(p, [0])
    return {"error": r.error, "bound": r.bound, "holds": r.holds,
            "exact": abs(r.error - 0.75) <= 1e-9 and abs(r.bound - 0.75) <= 1e-9}


def cmd_verify_theory(a) -> bool:
    shapes = a.shape or list(info_theory.DEFAULT_SHAPES)
    members = info_theory.eg_family(shapes)
    rows = info_theory.verify_family(members)
    tight = _lemma1_tight_case()
    in_family = [r for r in rows if r["theorem2"]["precondition"]]
    ok = (all(r["theorem2"]["passed"] and r["lemma2"] for r in in_family)
          and all(r["lemma1_all_hold"] for r in rows) and tight["exact"])
    atomic_write_text(a.out, dumps_json({
        "instances": rows,
        "n_instances": len(rows),
        "n_satisfying_precondition": len(in_family),
        "lemma1_tight_uniform_4_class": tight,
        "all_passed": ok,
    }))
    return ok


def cmd_report(a) -> None:
    rows = []
    for run in a.runs:
        run = Path(run)
        try:
            summary = json.loads((run / "summary.json").read_text())
            metrics = RunMetrics.from_csv((run / "metrics.csv").read_text())
        except (OSError, json.JSONDecodeError, KeyError) as exc:
            raise DomainError(f"{run} is not a run directory: {exc}") from None
        t = summary["config"]["train"]
        rows.append({
            "run": str(run), "regularizer": t["regularizer"], "lam": t["lam"], "tau": t["tau"],
            "seed": t["seed"], "epochs": len(metrics.records) - 1,
            "final_test_accuracy": metrics.final["test_accuracy"],
            "final_memorization": metrics.final["memorization"],
            "best_test_accuracy": metrics.best_test_accuracy,
        })
    text = dumps_json({"runs": rows})
    if a.out:
        atomic_write_text(a.out, text)
    else:
        sys.stdout.write(text)


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ctrr", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="Gaussian class blobs")
    g.add_argument("--classes", type=int, required=True)
    g.add_argument("--dim", type=int, required=True)
    g.add_argument("--per-class", type=int, required=True)
    g.add_argument("--spread", type=float, default=1.0)
    g.add_argument("--separation", type=float, default=3.0)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--test-per-class", type=int, default=0)
    g.add_argument("--test-out", type=Path)
    g.add_argument("--out", type=Path, required=True)
    g.set_defaults(func=cmd_gen_data)

    n = sub.add_parser("inject-noise", help="corrupt observed labels")
    n.add_argument("--data", type=Path, required=True)
    n.add_argument("--kind", choices=["symmetric", "asymmetric-pairs", "next-class"],
                   default="symmetric")
    n.add_argument("--rate", type=float, required=True)
    n.add_argument("--seed", type=int, default=0)
    n.add_argument("--class-map", help='JSON object, e.g. \'{"0": 1}\'')
    n.add_argument("--out", type=Path, required=True)
    n.set_defaults(func=cmd_inject_noise)

    t = sub.add_parser("train", help="train from a JSON run config")
    t.add_argument("--config", type=Path, required=True)
    t.add_argument("--out", type=Path, default=Path("run"))
    t.set_defaults(func=cmd_train)

    pr = sub.add_parser("probe", help="fit a fresh classifier on a frozen checkpoint")
    pr.add_argument("--checkpoint", type=Path, required=True)
    pr.add_argument("--data", type=Path, required=True)
    pr.add_argument("--test", type=Path)
    pr.add_argument("--config", type=Path, help="JSON train-config overrides for the probe")
    pr.add_argument("--out", type=Path, default=Path("probe"))
    pr.set_defaults(func=cmd_probe)

    gc = sub.add_parser("grad-check", help="autodiff vs finite differences and closed forms")
    gc.add_argument("--samples", type=int, default=100)
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--out", type=Path, default=Path("grad_check.json"))
    gc.set_defaults(func=cmd_grad_check)

    vt = sub.add_parser("verify-theory", help="exhaustive checks on the discrete family")
    vt.add_argument("--shape", type=_shape, action="append",
                    help="KxM (classes x background values); repeatable")
    vt.add_argument("--out", type=Path, default=Path("theory_report.json"))
    vt.set_defaults(func=cmd_verify_theory)

    r = sub.add_parser("report", help="tabulate finished runs")
    r.add_argument("runs", nargs="+")
    r.add_argument("--out", type=Path)
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with _thread_limit():
            result = args.func(args)
    except (DomainError, ValueError, TypeError, TrainingError, OSError) as exc:
        print(f"ctrr {args.command}: {exc}", file=sys.stderr)
        return 1
    if result is False:
        print(f"ctrr {args.command}: verification failed, see report", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
