"""Cross-validation protocol: plan construction, training, inference, reports.

The plan covers 14 subjects with 7 runs of 10 train / 2 validation / 2 test
subjects. Runs come in swapped pairs (the second run of a pair exchanges the
validation and test sets of the first), so only 4 distinct training sets
exist and each trained model serves two runs; every subject is tested
exactly once. Run 7 has no swap partner.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import arch, metrics, rfcalc, volumes
from .errors import ConfigError, DataError, NumericError
from .tensor import MomentumSGD, Tensor

MODES = ("normal", "dilated", "dual")


# ---------------------------------------------------------------------------
# cross-validation plan
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CVRun:
    number: int
    train: tuple[str, ...]
    val: tuple[str, ...]
    test: tuple[str, ...]
    training_group: int


@dataclass(frozen=True)
class CVPlan:
    runs: tuple[CVRun, ...]

    @property
    def subjects(self) -> tuple[str, ...]:
        run = self.runs[0]
        return tuple(sorted(run.train + run.val + run.test))

    def training_groups(self) -> dict[int, tuple[CVRun, ...]]:
        groups: dict[int, list[CVRun]] = {}
        for run in self.runs:
            groups.setdefault(run.training_group, []).append(run)
        return {g: tuple(rs) for g, rs in sorted(groups.items())}


# (val pair, test pair) as indices into the sorted subject list
_PAIR_PATTERN = [
    ((0, 1), (2, 3)),
    ((2, 3), (0, 1)),
    ((4, 5), (6, 7)),
    ((6, 7), (4, 5)),
    ((10, 11), (12, 13)),
    ((12, 13), (10, 11)),
    ((6, 7), (8, 9)),  # the odd run with no swap partner
]
_RUN_GROUP = (1, 1, 2, 2, 3, 3, 4)


def build_cv_plan(subjects) -> CVPlan:
    """7-run plan over exactly 14 distinct subject ids (sorted order)."""
    ids = list(subjects)
    if len(ids) != 14:
        raise ConfigError(f"plan needs exactly 14 subjects, got {len(ids)}")
    if len(set(ids)) != 14:
        raise ConfigError("plan subjects contain duplicates")
    ids = sorted(ids)
    runs = []
    for number, ((v0, v1), (t0, t1)) in enumerate(_PAIR_PATTERN, start=1):
        val = (ids[v0], ids[v1])
        test = (ids[t0], ids[t1])
        train = tuple(s for s in ids if s not in val + test)
        runs.append(CVRun(number, train, val, test, _RUN_GROUP[number - 1]))
    return CVPlan(tuple(runs))


def format_plan_table(plan: CVPlan) -> str:
    lines = [f"{'Run':<5}{'Training set':<60}{'Validation set':<26}{'Testing set'}"]
    for run in plan.runs:
        lines.append(
            f"{run.number:<5}{', '.join(run.train):<60}"
            f"{', '.join(run.val):<26}{', '.join(run.test)}"
        )
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# training configuration
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    epochs: int = 500
    patches_per_subject: int = 11
    patch_size: int = 24
    lr: float = 1e-3
    momentum: float = 0.9
    seed: int = 0
    num_classes: int = 11
    mode: str = "dual"
    fg_bias: float = 0.5
    hidden_channels: int = 150
    val_interval: int = 1
    stop_at_val_dice: float | None = None
    predict_tile: int = 48
    # steps-level linear lr ramp over the first N epochs; 0 keeps the lr
    # constant throughout (the default schedule)
    warmup_epochs: int = 0
    train_subjects: tuple[str, ...] | None = None
    val_subjects: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.patches_per_subject < 1:
            raise ConfigError(
                f"patches_per_subject must be >= 1, got {self.patches_per_subject}"
            )
        if self.patch_size < 1:
            raise ConfigError(f"patch_size must be >= 1, got {self.patch_size}")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got '{self.mode}'")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if not 0 <= self.fg_bias <= 1:
            raise ConfigError(f"fg_bias must be in [0,1], got {self.fg_bias}")
        if self.val_interval < 1:
            raise ConfigError(f"val_interval must be >= 1, got {self.val_interval}")
        if self.warmup_epochs < 0:
            raise ConfigError(f"warmup_epochs must be >= 0, got {self.warmup_epochs}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must be in [0,1), got {self.momentum}")

    def to_json_dict(self) -> dict:
        doc = dataclasses.asdict(self)
        doc["train_subjects"] = list(self.train_subjects) if self.train_subjects else None
        doc["val_subjects"] = list(self.val_subjects) if self.val_subjects else None
        return doc

    @classmethod
    def from_json_dict(cls, doc: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        doc = dict(doc)
        for key in ("train_subjects", "val_subjects"):
            if doc.get(key) is not None:
                doc[key] = tuple(doc[key])
        try:
            return cls(**doc)
        except TypeError as exc:
            raise ConfigError(f"invalid config: {exc}") from exc

    def digest(self) -> str:
        payload = json.dumps(self.to_json_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(payload.encode()).hexdigest()


def load_config(path) -> TrainConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return TrainConfig.from_json_dict(doc)


def _derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence(parts).generate_state(1)[0])


def _build_spec(config: TrainConfig) -> arch.NetworkSpec:
    if config.mode == "dual":
        return arch.build_amygnet(config.num_classes, hidden_channels=config.hidden_channels)
    return arch.build_branch(
        config.mode, config.num_classes, hidden_channels=config.hidden_channels
    )


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    model: arch.Model
    best_epoch: int
    epochs_run: int
    train_loss: list[float] = field(default_factory=list)
    val_dice: list[tuple[int, float]] = field(default_factory=list)


def mean_foreground_dice(
    model: arch.Model, vols: list[volumes.LabeledVolume], tile: int
) -> float | None:
    """Mean Dice over the 8 structure classes and the given volumes."""
    values = []
    for vol in vols:
        pred = predict_volume(model, vol, tile)
        for rec in metrics.evaluate_labels(pred, vol.labels, vol.subject_id):
            if rec.dice is not None:
                values.append(rec.dice)
    return float(np.mean(values)) if values else None


def train(
    config: TrainConfig,
    train_vols: list[volumes.LabeledVolume],
    val_vols: list[volumes.LabeledVolume],
    log=None,
) -> TrainResult:
    """Patch-based SGD training with per-epoch validation Dice.

    Deterministic for a fixed config seed and thread count: patch sampling
    seeds derive from (seed, epoch, subject index) and the model
    initialization from the config seed. Keeps the best-validation
    parameters. ``stop_at_val_dice`` ends training early once the validation
    Dice reaches the threshold.
    """
    if not train_vols:
        raise ConfigError("training set must not be empty")
    spec = _build_spec(config)
    model = arch.instantiate(spec, seed=config.seed)
    opt = MomentumSGD(config.lr, config.momentum)

    best: dict[str, Tensor] | None = None
    best_epoch = 0
    best_dice = -1.0
    result = TrainResult(model=model, best_epoch=0, epochs_run=0)

    steps_per_epoch = len(train_vols) * config.patches_per_subject
    warmup_steps = config.warmup_epochs * steps_per_epoch
    step = 0

    for epoch in range(1, config.epochs + 1):
        losses = []
        for si, vol in enumerate(train_vols):
            patches = volumes.sample_patches(
                vol,
                config.patches_per_subject,
                config.patch_size,
                seed=_derive_seed(config.seed, epoch, si),
                fg_bias=config.fg_bias,
            )
            for patch in patches:
                step += 1
                if warmup_steps:
                    opt.lr = config.lr * min(1.0, step / warmup_steps)
                graph, loss, pnodes = arch.build_training_graph(
                    model, patch.intensity, patch.labels.astype(np.int64)
                )
                lv = float(loss.value)
                if not np.isfinite(lv):
                    raise NumericError(
                        f"non-finite loss {lv} at epoch {epoch}, subject "
                        f"'{vol.subject_id}', patch origin {patch.origin}; "
                        f"recent losses: {[f'{x:.4g}' for x in losses[-5:]]}"
                    )
                graph.backward()
                opt.step(model.params, {n: node.grad for n, node in pnodes.items()})
                losses.append(lv)
        result.train_loss.append(float(np.mean(losses)))
        result.epochs_run = epoch

        stop = False
        if val_vols and (epoch % config.val_interval == 0 or epoch == config.epochs):
            vd = mean_foreground_dice(model, val_vols, config.predict_tile)
            vd = -1.0 if vd is None else vd
            result.val_dice.append((epoch, vd))
            if vd > best_dice:
                best_dice = vd
                best_epoch = epoch
                best = {n: t.copy() for n, t in model.params.items()}
            if config.stop_at_val_dice is not None and vd >= config.stop_at_val_dice:
                stop = True
        if log:
            msg = f"epoch {epoch}: loss {result.train_loss[-1]:.4f}"
            if result.val_dice and result.val_dice[-1][0] == epoch:
                msg += f", val dice {result.val_dice[-1][1]:.4f}"
            log(msg)
        if stop:
            break

    if best is not None:
        model.params = best
        result.best_epoch = best_epoch
    else:
        result.best_epoch = result.epochs_run
    return result


# ---------------------------------------------------------------------------
# whole-volume inference
# ---------------------------------------------------------------------------


def _model_receptive_field(spec: arch.NetworkSpec) -> int:
    """Receptive field of the full chain (stem + blocks), widest branch."""
    rf = 1
    for branch in spec.branches:
        layers = [rfcalc.LayerDescriptor(3, 1, 1, "init")]
        for i, blk in enumerate(spec.branch_blocks(branch), start=1):
            layers.append(rfcalc.LayerDescriptor(3, 1, blk.dilations[0], f"b{i}c1"))
            layers.append(rfcalc.LayerDescriptor(3, 1, blk.dilations[1], f"b{i}c2"))
        rf = max(rf, rfcalc.receptive_field_chain(layers, l0=1).final)
    return rf


def _tile_starts(dim: int, tile: int, stride: int) -> list[int]:
    starts = list(range(0, dim - tile + 1, stride))
    if starts[-1] != dim - tile:
        starts.append(dim - tile)
    return starts


def predict_volume(model: arch.Model, vol: volumes.LabeledVolume, tile: int) -> np.ndarray:
    """Voxel-wise argmax label volume, tiled to bound memory.

    Tiles overlap by half the network receptive field where the tile size
    allows it; each voxel's label is taken from a tile whose interior
    (margin-eroded region) contains the voxel. A tile no smaller than the
    volume reduces to one single pass.
    """
    if tile < 1:
        raise ConfigError(f"tile must be >= 1, got {tile}")
    dims = vol.dims
    if tile > min(dims):
        warnings.warn(
            f"tile {tile} exceeds volume dims {dims}; clamping per axis",
            stacklevel=2,
        )
    rf = _model_receptive_field(model.spec)
    out = np.zeros(dims, dtype=np.uint8)
    intensity = vol.intensity.data

    tiles = []
    margins = []
    for axis in range(3):
        t = min(tile, dims[axis])
        m = min((rf - 1) // 2, (t - 1) // 2)
        if t == dims[axis]:
            m = 0
        tiles.append(t)
        margins.append(m)
    strides = [tiles[a] - 2 * margins[a] for a in range(3)]

    for oz in _tile_starts(dims[0], tiles[0], strides[0]):
        for oy in _tile_starts(dims[1], tiles[1], strides[1]):
            for ox in _tile_starts(dims[2], tiles[2], strides[2]):
                patch = Tensor(
                    intensity[
                        :, oz : oz + tiles[0], oy : oy + tiles[1], ox : ox + tiles[2]
                    ].copy()
                )
                logits = arch.forward(model, patch)
                pred = np.argmax(logits.data, axis=0).astype(np.uint8)
                wl, wh, sl, sh = [], [], [], []
                for axis, o in zip(range(3), (oz, oy, ox)):
                    lo = 0 if o == 0 else margins[axis]
                    hi = (
                        tiles[axis]
                        if o == dims[axis] - tiles[axis]
                        else tiles[axis] - margins[axis]
                    )
                    wl.append(o + lo)
                    wh.append(o + hi)
                    sl.append(lo)
                    sh.append(hi)
                out[wl[0] : wh[0], wl[1] : wh[1], wl[2] : wh[2]] = pred[
                    sl[0] : sh[0], sl[1] : sh[1], sl[2] : sh[2]
                ]
    return out


# ---------------------------------------------------------------------------
# full protocol
# ---------------------------------------------------------------------------


@dataclass
class RunRecord:
    run: int
    training_group: int
    checkpoint: str
    checkpoint_digest: str
    epochs_completed: int
    best_epoch: int
    train_subjects: tuple[str, ...]
    val_subjects: tuple[str, ...]
    test_subjects: tuple[str, ...]
    val_dice: float | None
    train_loss: list[float]
    val_curve: list[tuple[int, float]]
    config_digest: str
    wall_clock_seconds: float
    metrics: list[metrics.MetricRecord]

    def to_json_dict(self) -> dict:
        return {
            "run": self.run,
            "training_group": self.training_group,
            "checkpoint": self.checkpoint,
            "checkpoint_digest": self.checkpoint_digest,
            "epochs_completed": self.epochs_completed,
            "best_epoch": self.best_epoch,
            "train_subjects": list(self.train_subjects),
            "val_subjects": list(self.val_subjects),
            "test_subjects": list(self.test_subjects),
            "val_dice": self.val_dice,
            "curves": {
                "train_loss": self.train_loss,
                "val_dice": [[e, d] for e, d in self.val_curve],
            },
            "config_digest": self.config_digest,
            "wall_clock_seconds": self.wall_clock_seconds,
            "metrics": [
                {
                    "subject": m.subject_id,
                    "class": m.class_id,
                    "dice": m.dice,
                    "assd": m.assd,
                }
                for m in self.metrics
            ],
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "RunRecord":
        try:
            return cls(
                run=int(doc["run"]),
                training_group=int(doc["training_group"]),
                checkpoint=doc["checkpoint"],
                checkpoint_digest=doc["checkpoint_digest"],
                epochs_completed=int(doc["epochs_completed"]),
                best_epoch=int(doc["best_epoch"]),
                train_subjects=tuple(doc["train_subjects"]),
                val_subjects=tuple(doc["val_subjects"]),
                test_subjects=tuple(doc["test_subjects"]),
                val_dice=doc["val_dice"],
                train_loss=list(doc["curves"]["train_loss"]),
                val_curve=[(int(e), float(d)) for e, d in doc["curves"]["val_dice"]],
                config_digest=doc["config_digest"],
                wall_clock_seconds=float(doc["wall_clock_seconds"]),
                metrics=[
                    metrics.MetricRecord(
                        m["subject"], int(m["class"]), m["dice"], m["assd"]
                    )
                    for m in doc["metrics"]
                ],
            )
        except KeyError as exc:
            raise DataError(f"run record missing field {exc}") from exc


def execute_plan(
    plan: CVPlan,
    config: TrainConfig,
    data_dir,
    out_dir,
    log=None,
) -> list[RunRecord]:
    """Train once per training group, evaluate both runs of each group,
    and write records, predictions, the CSV report, and plot artifacts."""
    out_dir = Path(out_dir)
    (out_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
    dataset = volumes.load_dataset(data_dir, plan.subjects)
    dataset = {sid: volumes.normalize_intensity(v) for sid, v in dataset.items()}

    records: list[RunRecord] = []
    for group, runs in plan.training_groups().items():
        lead = runs[0]
        group_cfg = dataclasses.replace(
            config,
            seed=_derive_seed(config.seed, 1000 + group),
            train_subjects=None,
            val_subjects=None,
        )
        if log:
            log(f"training group {group}: runs {[r.number for r in runs]}")
        t0 = time.perf_counter()
        result = train(
            group_cfg,
            [dataset[s] for s in lead.train],
            [dataset[s] for s in lead.val],
            log=log,
        )
        train_seconds = time.perf_counter() - t0
        ckpt_rel = f"checkpoints/group{group}.ckpt"
        arch.save_checkpoint(result.model, out_dir / ckpt_rel, epoch=result.best_epoch)
        digest = arch.checkpoint_digest(out_dir / ckpt_rel)

        for run in runs:
            t1 = time.perf_counter()
            if run is lead:
                run_val = result.val_dice[-1][1] if result.val_dice else None
            else:
                run_val = mean_foreground_dice(
                    result.model, [dataset[s] for s in run.val], config.predict_tile
                )
            run_dir = out_dir / f"run{run.number:02d}"
            (run_dir / "predictions").mkdir(parents=True, exist_ok=True)
            run_metrics: list[metrics.MetricRecord] = []
            for sid in run.test:
                vol = dataset[sid]
                pred = predict_volume(result.model, vol, config.predict_tile)
                volumes.write_volume(
                    volumes.LabeledVolume(
                        sid, Tensor(np.zeros((1,) + vol.dims, dtype=np.float32)), pred
                    ),
                    run_dir / "predictions" / f"{sid}.vol",
                )
                run_metrics.extend(metrics.evaluate_labels(pred, vol.labels, sid))
            record = RunRecord(
                run=run.number,
                training_group=group,
                checkpoint=ckpt_rel,
                checkpoint_digest=digest,
                epochs_completed=result.epochs_run,
                best_epoch=result.best_epoch,
                train_subjects=run.train,
                val_subjects=run.val,
                test_subjects=run.test,
                val_dice=run_val,
                train_loss=result.train_loss,
                val_curve=result.val_dice,
                config_digest=config.digest(),
                wall_clock_seconds=(train_seconds if run is lead else 0.0)
                + (time.perf_counter() - t1),
                metrics=run_metrics,
            )
            (run_dir / "record.json").write_text(
                json.dumps(record.to_json_dict(), indent=2, sort_keys=True)
            )
            records.append(record)
            if log:
                log(f"run {run.number}: tested {run.test}")

    all_metrics = [m for r in records for m in r.metrics]
    write_report_csv(all_metrics, out_dir / "report.csv")
    write_plot_artifacts(all_metrics, out_dir)
    return records


def collect_records(runs_dir) -> list[RunRecord]:
    runs_dir = Path(runs_dir)
    paths = sorted(runs_dir.glob("run*/record.json"))
    if not paths:
        raise DataError(f"no run records found under {runs_dir}")
    return [RunRecord.from_json_dict(json.loads(p.read_text())) for p in paths]


def write_report_csv(records: list[metrics.MetricRecord], path) -> None:
    rows = metrics.report_rows(records)
    header = ["subject", "class", "group", "dice", "assd", "defined_flag"]
    lines = [",".join(header)]
    lines += [",".join(row[c] for c in header) for row in rows]
    Path(path).write_text("\n".join(lines) + "\n")


def write_plot_artifacts(records: list[metrics.MetricRecord], out_dir) -> None:
    """Emit a gnuplot script plus its data file for per-class bar charts."""
    out_dir = Path(out_dir)
    agg = metrics.aggregate(records)

    def fmt(v):
        return "nan" if v is None else f"{v:.6f}"

    lines = ["# class dice assd"]
    for c in metrics.FOREGROUND_CLASSES:
        lines.append(f"class{c} {fmt(agg.class_dice[c])} {fmt(agg.class_assd[c])}")
    (out_dir / "plot_data.dat").write_text("\n".join(lines) + "\n")

    script = """\
# Render per-class mean Dice and ASSD bars: gnuplot plots.gnuplot
set style data histogram
set style histogram cluster gap 1
set style fill solid border -1
set boxwidth 0.8
set terminal pngcairo size 960,480
set output 'dice_by_class.png'
set ylabel 'Dice'
set yrange [0:1]
plot 'plot_data.dat' using 2:xtic(1) title 'mean Dice'
set output 'assd_by_class.png'
set ylabel 'ASSD (voxels)'
set yrange [0:*]
plot 'plot_data.dat' using 3:xtic(1) title 'mean ASSD'
"""
    (out_dir / "plots.gnuplot").write_text(script)
