"""Training loop, evaluation, and the ablation runner.

Seeding: one global ``seed`` drives everything through counter-based
``numpy.random.default_rng`` streams, so no RNG state has to be checkpointed:

* ``[seed, 0]``          parameter init (inside ``MAAModel``)
* ``[seed, 1, epoch]``   shuffle order of epoch ``epoch`` (1-based)
* ``[seed, 2, step]``    dropout masks of global step ``step`` (0-based)
"""

from __future__ import annotations

import csv
import logging
import math
import os
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .config import TrainConfig
from .dataio import DatasetHeader, EmbeddingRecord, collate, filter_modalities, format_modalities, parse_modalities
from .errors import ValidationError
from .metrics import MetricsReport, append_metrics_csv, map_from_logits
from .model import MAAModel, ce_loss
from .numcore import zero_grads
from .optim import AdamWState, ScheduleConfig, adamw_step, clip_grad_norm, lr_at

log = logging.getLogger(__name__)

EVAL_BATCH = 64
STEPS_FIELDS = ("step", "epoch", "lr", "loss")


def schedule_for(config: TrainConfig, n_train: int) -> ScheduleConfig:
    spe = math.ceil(n_train / config.batch_size)
    return ScheduleConfig(
        base_lr=config.lr,
        warmup_steps=int(round(config.warmup_epochs * spe)),
        t_0=max(1, int(round(config.t0_epochs * spe))),
        t_mult=config.t_mult,
        eta_min=config.eta_min,
    )


def check_compatible(config: TrainConfig, header: DatasetHeader, num_classes=None, input_dims=None) -> None:
    dims = header.dims
    missing = [m for m in config.modality_ids if m not in dims]
    if missing:
        raise ValidationError(f"dataset lacks enabled modalities {format_modalities(missing)}")
    if num_classes is not None and num_classes != header.num_classes:
        raise ValidationError(f"model has C={num_classes} classes, dataset has C={header.num_classes}")
    if input_dims is not None:
        for m, d in input_dims.items():
            if dims.get(m) != d:
                raise ValidationError(f"modality {m}: model expects D={d}, dataset has D={dims.get(m)}")


def evaluate(model: MAAModel, records: Sequence[EmbeddingRecord], batch_size: int = EVAL_BATCH):
    """Deterministic eval (no dropout). Returns (report, logits)."""
    cfg = model.config
    logits, losses = [], []
    for i in range(0, len(records), batch_size):
        chunk = records[i : i + batch_size]
        batch = collate(chunk, cfg.modality_ids, cfg.max_len, dtype=model.dtype)
        out = model.forward(batch, train=False)
        losses.append(ce_loss(out, batch.labels)[0] * len(chunk))
        logits.append(out)
    logits = np.concatenate(logits)
    labels = np.array([r.label for r in records])
    return map_from_logits(logits, labels, sum(losses) / len(records)), logits


@contextmanager
def _dir_lock(out_dir: Path):
    lock = out_dir / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise RuntimeError(f"{out_dir} is locked by another training process (remove {lock} if stale)") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def _truncate_csv(path: Path, keep) -> None:
    if not path.exists():
        return
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if not rows:
        return
    head, body = rows[0], rows[1:]
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(head)
        w.writerows(r for r in body if keep(dict(zip(head, r))))


@dataclass
class TrainResult:
    model: MAAModel
    history: list[dict] = field(default_factory=list)
    final: MetricsReport | None = None
    best_map: float = -1.0
    best_epoch: int = 0


def train(
    config: TrainConfig,
    header: DatasetHeader,
    train_records: Sequence[EmbeddingRecord],
    val_records: Sequence[EmbeddingRecord],
    out_dir=None,
    resume: str | os.PathLike | None = None,
    save_every_epoch: bool = True,
) -> TrainResult:
    """Train with per-epoch validation; with ``out_dir`` also writes config,
    CSV logs, per-epoch reports, ``last.ckpt`` and ``best.ckpt``."""
    check_compatible(config, header)
    mods = config.modality_ids
    train_records = filter_modalities(train_records, mods)
    val_records = filter_modalities(val_records, mods)
    if not train_records or not val_records:
        raise ValidationError("no usable records after modality filtering")

    start_epoch, step, best_map, best_epoch = 1, 0, -1.0, 0
    if resume is not None:
        ckpt = load_checkpoint(resume)
        if ckpt.config.replace(epochs=config.epochs) != config:
            raise ValidationError("resume config differs from checkpoint config (only epochs may change)")
        model = ckpt.build_model()
        opt = ckpt.optimizer_state()
        start_epoch = ckpt.extra["epoch"] + 1
        step = ckpt.extra["step"]
        best_map, best_epoch = ckpt.extra["best_map"], ckpt.extra["best_epoch"]
    else:
        model = MAAModel(config, header.dims, header.num_classes)
        opt = AdamWState.for_params(model.params())
    params = model.params()
    sched = schedule_for(config, len(train_records))
    result = TrainResult(model, best_map=best_map, best_epoch=best_epoch)

    out = Path(out_dir) if out_dir is not None else None
    if out is None:
        for epoch in range(start_epoch, config.epochs + 1):
            step = _run_epoch(model, params, opt, sched, config, train_records, val_records, epoch, step, result, None)
        return result

    out.mkdir(parents=True, exist_ok=True)
    with _dir_lock(out):
        (out / "reports").mkdir(exist_ok=True)
        (out / "config.txt").write_text(config.to_text())
        if resume is not None:
            _truncate_csv(out / "metrics.csv", lambda r: int(r["epoch"]) < start_epoch)
            _truncate_csv(out / "steps.csv", lambda r: int(r["epoch"]) < start_epoch)
        else:
            for name in ("metrics.csv", "steps.csv"):
                (out / name).unlink(missing_ok=True)
        for epoch in range(start_epoch, config.epochs + 1):
            step = _run_epoch(model, params, opt, sched, config, train_records, val_records, epoch, step, result, out)
            extra = {
                "epoch": epoch,
                "step": step,
                "best_map": result.best_map,
                "best_epoch": result.best_epoch,
                "class_names": header.class_names,
            }
            if result.best_epoch == epoch:
                save_checkpoint(out / "best.ckpt", model, opt, extra)
            if save_every_epoch or epoch == config.epochs:
                save_checkpoint(out / "last.ckpt", model, opt, extra)
    return result


def _run_epoch(model, params, opt, sched, config, train_records, val_records, epoch, step, result, out):
    order = np.random.default_rng([config.seed, 1, epoch]).permutation(len(train_records))
    losses, logits_all, labels_all, step_rows = [], [], [], []
    for i in range(0, len(order), config.batch_size):
        chunk = [train_records[j] for j in order[i : i + config.batch_size]]
        batch = collate(chunk, config.modality_ids, config.max_len, dtype=model.dtype)
        zero_grads(params)
        loss, logits = model.forward_backward(batch, train=True, rng=np.random.default_rng([config.seed, 2, step]))
        clip_grad_norm(params, config.clip_norm)
        lr = lr_at(step, sched)
        adamw_step(params, opt, lr, config.beta1, config.beta2, config.adam_eps, config.weight_decay)
        losses.append(loss * len(chunk))
        logits_all.append(logits)
        labels_all.append(batch.labels)
        step_rows.append((step, epoch, repr(lr), repr(loss)))
        step += 1
    train_report = map_from_logits(
        np.concatenate(logits_all), np.concatenate(labels_all), sum(losses) / len(train_records)
    )
    val_report, _ = evaluate(model, val_records)
    improved = val_report.map > result.best_map
    if improved:
        result.best_map, result.best_epoch = val_report.map, epoch
    result.final = val_report
    result.history.append({"epoch": epoch, "train": train_report, "val": val_report})
    log.info(
        "epoch %d  train loss %.4f  val loss %.4f  val acc %.4f  val mAP %.4f%s",
        epoch, train_report.mean_loss, val_report.mean_loss, val_report.accuracy, val_report.map,
        "  *" if improved else "",
    )
    if out is not None:
        new = not (out / "steps.csv").exists()
        with open(out / "steps.csv", "a", newline="") as f:
            w = csv.writer(f)
            if new:
                w.writerow(STEPS_FIELDS)
            w.writerows(step_rows)
        append_metrics_csv(out / "metrics.csv", epoch, "train", train_report)
        append_metrics_csv(out / "metrics.csv", epoch, "val", val_report)
        val_report.write(out / "reports" / f"epoch_{epoch:03d}_val.json")
    return step


ABLATION_AXES = ("modalities", "adapter_mode", "layers")


def ablation_overrides(axis: str, value: str) -> dict:
    if axis == "modalities":
        return {"modalities": format_modalities(parse_modalities(value))}
    if axis == "adapter_mode":
        return {"adapter_mode": value}
    if axis == "layers":
        return {"layers": int(value)}
    raise ValidationError(f"unknown ablation axis {axis!r}; expected one of {ABLATION_AXES}")


@dataclass
class AblationRow:
    value: str
    map: float
    accuracy: float
    best_map: float
    adapter_params: int
    total_params: int


def run_ablation(
    axis: str,
    values: Sequence[str],
    base: TrainConfig,
    header: DatasetHeader,
    train_records,
    val_records,
    out_dir=None,
) -> list[AblationRow]:
    """Train one cell per axis value with identical seed and budget. The
    reported ``map``/``accuracy`` are from the final epoch (no selection on
    the evaluation split); ``best_map`` is listed for reference."""
    rows = []
    for value in values:
        cfg = base.replace(**ablation_overrides(axis, value))
        cell_dir = None if out_dir is None else Path(out_dir) / f"{axis}={value}".replace(",", "+")
        log.info("ablation %s=%s", axis, value)
        res = train(cfg, header, train_records, val_records, cell_dir)
        rows.append(
            AblationRow(
                str(value), res.final.map, res.final.accuracy, res.best_map,
                res.model.adapter.num_params(), res.model.num_params(),
            )
        )
    if out_dir is not None:
        write_ablation_table(Path(out_dir), axis, rows)
    return rows


def format_ablation_table(axis: str, rows: Sequence[AblationRow]) -> str:
    head = (axis, "mAP", "accuracy", "best mAP", "adapter params", "params")
    body = [
        (r.value, f"{100 * r.map:.2f}", f"{100 * r.accuracy:.2f}", f"{100 * r.best_map:.2f}",
         str(r.adapter_params), str(r.total_params))
        for r in rows
    ]
    widths = [max(len(x) for x in col) for col in zip(head, *body)]
    lines = ["  ".join(x.ljust(w) for x, w in zip(line, widths)).rstrip() for line in [head, *body]]
    return "\n".join(lines) + "\n"


def write_ablation_table(out_dir: Path, axis: str, rows: Sequence[AblationRow]) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "ablation.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(("axis", "value", "map", "accuracy", "best_map", "adapter_params", "total_params"))
        for r in rows:
            w.writerow((axis, r.value, repr(r.map), repr(r.accuracy), repr(r.best_map), r.adapter_params, r.total_params))
    (out_dir / "ablation.txt").write_text(format_ablation_table(axis, rows))
