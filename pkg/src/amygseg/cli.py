"""Command-line entry point.

Subcommands: rf, phantom, train, plan, run-all, eval, report. Exit codes:
0 success, 2 configuration/usage error, 3 data error, 4 numeric failure.
``AMYGSEG_THREADS`` caps the BLAS thread count (results are reproducible for
a fixed seed and thread count).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path


def _limit_threads():
    value = os.environ.get("AMYGSEG_THREADS")
    if not value:
        return
    try:
        n = max(1, int(value))
    except ValueError:
        print(f"error: AMYGSEG_THREADS must be an integer, got {value!r}", file=sys.stderr)
        raise SystemExit(2)
    try:
        import threadpoolctl

        threadpoolctl.threadpool_limits(n)
    except ImportError:  # pragma: no cover
        for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(n)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="amygseg",
        description="Dual receptive-field volumetric segmentation toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_rf = sub.add_parser("rf", help="receptive-field table for a network description")
    p_rf.add_argument("--net", required=True, help="network JSON (interchange format)")
    p_rf.add_argument("--l0", type=int, default=1, help="receptive field at chain input")
    p_rf.add_argument("--branch", choices=("normal", "dilated"), default=None)
    p_rf.add_argument(
        "--full-chain",
        action="store_true",
        help="include the stem conv and head layers (default: block convs only)",
    )
    p_rf.add_argument("--csv", default=None, help="also write the table as CSV")

    p_ph = sub.add_parser("phantom", help="generate a synthetic phantom dataset")
    p_ph.add_argument("--dims", required=True, help="D,H,W (or one edge for a cube)")
    p_ph.add_argument("--seed", type=int, required=True)
    p_ph.add_argument("--out", required=True, help="output dataset directory")
    p_ph.add_argument("--count", type=int, default=14)

    p_tr = sub.add_parser("train", help="train one model from a config file")
    p_tr.add_argument("--config", required=True)
    p_tr.add_argument("--data", required=True)
    p_tr.add_argument("--out", required=True)
    p_tr.add_argument("--verbose", "-v", action="store_true")

    p_pl = sub.add_parser("plan", help="print the cross-validation plan")
    p_pl.add_argument(
        "--subjects",
        default=None,
        help="file with 14 subject ids (JSON array or one per line); "
        "defaults to the built-in ids",
    )

    p_ra = sub.add_parser("run-all", help="execute the full cross-validation protocol")
    p_ra.add_argument("--config", required=True)
    p_ra.add_argument("--data", required=True)
    p_ra.add_argument("--out", required=True)
    p_ra.add_argument("--verbose", "-v", action="store_true")

    p_ev = sub.add_parser("eval", help="score predicted label volumes against ground truth")
    p_ev.add_argument("--pred", required=True)
    p_ev.add_argument("--gt", required=True)
    p_ev.add_argument("--out", required=True, help="output CSV path")

    p_re = sub.add_parser("report", help="rebuild the CSV report from run records")
    p_re.add_argument("--runs", required=True)
    p_re.add_argument("--out", required=True)
    return parser


# ---------------------------------------------------------------------------
# handlers
# ---------------------------------------------------------------------------


def _cmd_rf(args) -> int:
    from . import rfcalc
    from .errors import DataError

    path = Path(args.net)
    if not path.exists():
        raise DataError(f"network description not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"network description {path} is not valid JSON: {exc}") from exc
    layers = doc.get("layers")
    if not isinstance(layers, list):
        raise DataError(f"network description {path} has no 'layers' list")

    stages = ("initial", "block", "head") if args.full_chain else ("block",)
    branches = sorted({e.get("branch") for e in layers if e.get("branch")})
    if args.branch:
        selected = [args.branch]
    else:
        selected = branches or [None]

    csv_lines = ["branch,label,kernel,stride,dilation,effective_kernel,receptive_field"]
    for branch in selected:
        chain = rfcalc.descriptors_from_network_layers(layers, branch=branch, stages=stages)
        report = rfcalc.receptive_field_chain(chain, l0=args.l0)
        title = f"branch: {branch}" if branch else "network"
        print(f"{title}  (l0 = {report.l0})")
        print(f"{'layer':<20}{'kernel':>7}{'dil':>5}{'eff':>5}{'rf':>5}")
        for layer, row in zip(chain, report.rows):
            print(
                f"{row.label:<20}{layer.kernel:>7}{layer.dilation:>5}"
                f"{row.effective_kernel:>5}{row.receptive_field:>5}"
            )
            csv_lines.append(
                f"{branch or ''},{row.label},{layer.kernel},{layer.stride},"
                f"{layer.dilation},{row.effective_kernel},{row.receptive_field}"
            )
        print(f"final receptive field: {report.final}")
    if args.csv:
        Path(args.csv).write_text("\n".join(csv_lines) + "\n")
    return 0


def _parse_dims(text: str) -> tuple[int, int, int]:
    from .errors import ConfigError

    parts = [p for p in text.replace(" ", "").split(",") if p]
    try:
        nums = [int(p) for p in parts]
    except ValueError as exc:
        raise ConfigError(f"--dims must be integers, got {text!r}") from exc
    if len(nums) == 1:
        nums = nums * 3
    if len(nums) != 3:
        raise ConfigError(f"--dims needs one or three values, got {text!r}")
    return tuple(nums)


def _cmd_phantom(args) -> int:
    from . import volumes

    dims = _parse_dims(args.dims)
    paths = volumes.write_phantom_dataset(args.out, dims, args.seed, count=args.count)
    print(f"wrote {len(paths)} phantoms to {args.out}")
    return 0


def _load_subject_ids(path_or_none) -> tuple[str, ...]:
    from . import volumes
    from .errors import DataError

    if path_or_none is None:
        return volumes.SUBJECT_IDS
    path = Path(path_or_none)
    if not path.exists():
        raise DataError(f"subjects file not found: {path}")
    text = path.read_text().strip()
    if text.startswith("["):
        try:
            ids = json.loads(text)
        except json.JSONDecodeError as exc:
            raise DataError(f"subjects file {path} is not valid JSON: {exc}") from exc
    else:
        ids = [line.strip() for line in text.splitlines() if line.strip()]
    return tuple(str(s) for s in ids)


def _cmd_plan(args) -> int:
    from . import experiment

    plan = experiment.build_cv_plan(_load_subject_ids(args.subjects))
    print(experiment.format_plan_table(plan))
    return 0


def _cmd_train(args) -> int:
    import numpy as np

    from . import arch, experiment, volumes
    from .tensor import Tensor

    config = experiment.load_config(args.config)
    if config.train_subjects is None or config.val_subjects is None:
        default = experiment.build_cv_plan(volumes.SUBJECT_IDS).runs[0]
        train_ids = config.train_subjects or default.train
        val_ids = config.val_subjects or default.val
    else:
        train_ids, val_ids = config.train_subjects, config.val_subjects
    dataset = volumes.load_dataset(args.data, tuple(train_ids) + tuple(val_ids))
    dataset = {sid: volumes.normalize_intensity(v) for sid, v in dataset.items()}

    log = (lambda msg: print(msg, file=sys.stderr)) if args.verbose else None
    result = experiment.train(
        config,
        [dataset[s] for s in train_ids],
        [dataset[s] for s in val_ids],
        log=log,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    arch.save_checkpoint(result.model, out / "checkpoint.ckpt", epoch=result.best_epoch)
    curves = {
        "train_loss": result.train_loss,
        "val_dice": [[e, d] for e, d in result.val_dice],
        "best_epoch": result.best_epoch,
        "epochs_run": result.epochs_run,
    }
    (out / "curves.json").write_text(json.dumps(curves, indent=2))
    final = result.val_dice[-1][1] if result.val_dice else float("nan")
    print(
        f"trained {result.epochs_run} epochs; best epoch {result.best_epoch}; "
        f"last val dice {final:.4f}; checkpoint at {out / 'checkpoint.ckpt'}"
    )
    return 0


def _cmd_run_all(args) -> int:
    from . import experiment, volumes

    config = experiment.load_config(args.config)
    plan = experiment.build_cv_plan(volumes.SUBJECT_IDS)
    log = (lambda msg: print(msg, file=sys.stderr)) if args.verbose else None
    records = experiment.execute_plan(plan, config, args.data, args.out, log=log)
    print(f"completed {len(records)} runs; report at {Path(args.out) / 'report.csv'}")
    return 0


def _cmd_eval(args) -> int:
    from . import experiment, metrics, volumes
    from .errors import DataError

    pred_dir, gt_dir = Path(args.pred), Path(args.gt)
    pred_files = sorted(pred_dir.glob("*.vol"))
    if not pred_files:
        raise DataError(f"no .vol files found in {pred_dir}")
    records = []
    for pf in pred_files:
        gf = gt_dir / pf.name
        if not gf.exists():
            raise DataError(f"missing ground truth for {pf.name} (expected {gf})")
        pred = volumes.read_volume(pf)
        gt = volumes.read_volume(gf)
        records.extend(metrics.evaluate_labels(pred.labels, gt.labels, gt.subject_id))
    experiment.write_report_csv(records, args.out)
    print(f"wrote {args.out} ({len(records)} records)")
    return 0


def _cmd_report(args) -> int:
    from . import experiment

    records = experiment.collect_records(args.runs)
    all_metrics = [m for r in records for m in r.metrics]
    experiment.write_report_csv(all_metrics, args.out)
    print(f"wrote {args.out} from {len(records)} run records")
    return 0


_HANDLERS = {
    "rf": _cmd_rf,
    "phantom": _cmd_phantom,
    "train": _cmd_train,
    "plan": _cmd_plan,
    "run-all": _cmd_run_all,
    "eval": _cmd_eval,
    "report": _cmd_report,
}


def dispatch(argv) -> int:
    """Parse and run one invocation; returns the process exit code."""
    _limit_threads()
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed usage/help
        return int(exc.code or 0)

    from .errors import ConfigError, DataError, NumericError

    try:
        return _HANDLERS[args.command](args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
