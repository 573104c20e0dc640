"""Deterministic training/evaluation loops and run artifacts.

Every random stream is derived from (base seed, purpose tag, epoch/index),
never from call order, so a resumed run replays the exact bit pattern of
an uninterrupted one and two runs with the same config produce identical
logs, checkpoints and reports.

The training log is line-oriented: one `key=value` record per epoch, float
values written with repr (shortest round-trip form).
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .attention import ClassNoiseTable
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, config_hash, config_to_dict
from .data import Dataset, augment, class_frequencies
from .errors import TrainingError, UsageError
from .losses import lambda_w, total_loss
from .metrics import MetricReport, aggregate_report, evaluate_sample
from .model import HierarchicalSegmenter
from .optim import AdamW
from .tensor import Tensor, no_grad

TAG_INIT = 10
TAG_SHUFFLE = 11
TAG_AUGMENT = 12
TAG_NOISE = 13


def build_model(cfg: RunConfig, noise_table: ClassNoiseTable | None) -> HierarchicalSegmenter:
    rng = np.random.default_rng([cfg.seed, TAG_INIT])
    return HierarchicalSegmenter(rng, cfg.model_config(), noise_table)


@dataclass
class EpochRecord:
    epoch: int
    lambda_w: float
    loss_stage1: float
    loss_stage2: float | None
    loss: float
    eval_dice: float | None
    lr: float


def format_record(rec: EpochRecord) -> str:
    def fmt(v):
        return "-" if v is None else repr(v)

    return (f"epoch={rec.epoch} lambda_w={repr(rec.lambda_w)} "
            f"loss_stage1={fmt(rec.loss_stage1)} loss_stage2={fmt(rec.loss_stage2)} "
            f"loss={fmt(rec.loss)} eval_dice={fmt(rec.eval_dice)} lr={repr(rec.lr)}")


def parse_record(line: str) -> dict:
    out = {}
    for part in line.strip().split():
        key, _, value = part.partition("=")
        if value == "-":
            out[key] = None
        elif key == "epoch":
            out[key] = int(value)
        else:
            out[key] = float(value)
    return out


def _batches(order: np.ndarray, batch_size: int):
    for lo in range(0, len(order), batch_size):
        yield order[lo : lo + batch_size]


def predict_labels(model: HierarchicalSegmenter, images: np.ndarray,
                   out_h: int, out_w: int, batch_size: int = 16) -> np.ndarray:
    """Argmax class maps for a stack of images, evaluated off the tape."""
    preds = []
    with no_grad():
        for lo in range(0, len(images), batch_size):
            batch = Tensor(images[lo : lo + batch_size])
            out = model.forward(batch, training=False)
            probs = model.predict_probs(out, out_h, out_w)
            preds.append(np.argmax(probs.data, axis=1))
    return np.concatenate(preds, axis=0)


def eval_mean_dice(model: HierarchicalSegmenter, dataset: Dataset, batch_size: int = 16) -> float:
    images = dataset.images_array()
    masks = dataset.masks_array()
    h, w = masks.shape[1:]
    preds = predict_labels(model, images, h, w, batch_size)
    c = dataset.manifest.num_classes
    per_sample = []
    for p, g in zip(preds, masks):
        dices = [0.0] * (c - 1)
        for cls in range(1, c):
            a = p == cls
            b = g == cls
            na, nb = int(a.sum()), int(b.sum())
            if na == 0 and nb == 0:
                dices[cls - 1] = 1.0
            elif na and nb:
                dices[cls - 1] = 2.0 * int((a & b).sum()) / (na + nb)
        per_sample.append(dices)
    return float(np.mean([np.mean(d) for d in per_sample]))


def full_metric_report(model: HierarchicalSegmenter, dataset: Dataset,
                       hd_variant: str = "avg", batch_size: int = 16
                       ) -> tuple[MetricReport, np.ndarray]:
    images = dataset.images_array()
    masks = dataset.masks_array()
    h, w = masks.shape[1:]
    preds = predict_labels(model, images, h, w, batch_size)
    c = dataset.manifest.num_classes
    per_sample = [evaluate_sample(p, g, c, hd_variant) for p, g in zip(preds, masks)]
    return aggregate_report(per_sample), preds


# ---- checkpoint composition -----------------------------------------------------


def _collect_checkpoint(model: HierarchicalSegmenter, opt: AdamW, cfg: RunConfig,
                        next_epoch: int) -> tuple[dict, dict]:
    tensors = {f"param/{name}": p.data for name, p in model.named_params()}
    tensors.update(opt.state_tensors())
    tensors["noise/var"] = model.noise_table.var
    import json

    meta = {
        "epoch_next": str(next_epoch),
        "step_count": str(opt.step_count),
        "config_hash": config_hash(cfg),
        "base_seed": str(cfg.seed),
        "config_json": json.dumps(config_to_dict(cfg), sort_keys=True),
    }
    return tensors, meta


def _restore_into(model: HierarchicalSegmenter, opt: AdamW, tensors: dict, meta: dict) -> int:
    for name, p in model.named_params():
        key = f"param/{name}"
        if key not in tensors:
            raise UsageError(f"checkpoint is missing tensor {key!r}")
        if tensors[key].shape != p.data.shape:
            raise UsageError(f"checkpoint tensor {key!r} has shape {tensors[key].shape}, "
                             f"model expects {p.data.shape}")
        p.data[:] = tensors[key]
    model.noise_table.var[:] = tensors["noise/var"]
    opt.load_state(tensors, int(meta["step_count"]))
    return int(meta["epoch_next"])


def load_model_from_checkpoint(path, cfg: RunConfig | None = None
                               ) -> tuple[HierarchicalSegmenter, RunConfig, dict]:
    """Rebuild the model a checkpoint was trained with.

    When cfg is given, its hash must match the one stored at save time.
    """
    import json

    tensors, meta = load_checkpoint(path)
    from .config import config_from_dict

    stored = config_from_dict(json.loads(meta["config_json"]))
    if cfg is not None and config_hash(cfg) != meta["config_hash"]:
        raise UsageError("config hash mismatch between checkpoint and requested architecture")
    cfg = cfg or stored
    table = ClassNoiseTable(var=tensors["noise/var"].copy())
    model = build_model(cfg, table)
    for name, p in model.named_params():
        p.data[:] = tensors[f"param/{name}"]
    return model, cfg, meta


# ---- training loop ----------------------------------------------------------------


def train(cfg: RunConfig, train_data: Dataset, eval_data: Dataset | None, out_dir,
          resume: str | None = None) -> dict:
    """Run (or resume) training; returns paths and parsed epoch records."""
    os.makedirs(out_dir, exist_ok=True)
    log_path = os.path.join(out_dir, "train.log")
    ckpt_path = os.path.join(out_dir, "checkpoint.hck")

    _, noise_table = class_frequencies(train_data, sigma0=cfg.model.noise_sigma0,
                                       var_max=cfg.model.noise_var_max)
    model = build_model(cfg, noise_table)
    opt = AdamW(model.trainable_params(), cfg.optim)

    start_epoch = 0
    if resume is not None:
        tensors, meta = load_checkpoint(resume)
        if meta["config_hash"] != config_hash(cfg):
            raise UsageError("config hash mismatch between checkpoint and requested architecture")
        start_epoch = _restore_into(model, opt, tensors, meta)

    images = train_data.images_array()
    masks = train_data.masks_array()
    n = len(train_data)
    bs = cfg.train.batch_size
    steps_per_epoch = (n + bs - 1) // bs
    records = []

    mode = "a" if resume is not None else "w"
    with open(log_path, mode, encoding="utf-8") as log_fh:
        for epoch in range(start_epoch, cfg.train.epochs):
            order = np.random.default_rng([cfg.seed, TAG_SHUFFLE, epoch]).permutation(n)
            sum_l1 = sum_l2 = sum_total = 0.0
            seen_stage2 = False
            lr_used = 0.0
            for batch_idx, batch in enumerate(_batches(order, bs)):
                if cfg.train.augment_enabled:
                    aug = [augment(train_data.samples[i],
                                   [cfg.seed, TAG_AUGMENT, epoch, int(i)], cfg.train.augment)
                           for i in batch]
                    imgs = np.stack([a.image for a in aug])
                    gts = np.stack([a.mask for a in aug])
                else:
                    imgs = images[batch]
                    gts = masks[batch]

                out = model.forward(Tensor(imgs), training=True, gt=gts,
                                    noise_seed=[cfg.seed, TAG_NOISE, epoch, batch_idx])
                sched_t = opt.step_count if cfg.loss.per_iteration_decay else epoch
                loss, parts = total_loss(out.stage1.logits,
                                         out.stage2.logits if out.stage2 else None,
                                         gts, sched_t, cfg.loss)
                if not np.isfinite(loss.data).all():
                    bad = "stage1" if not np.isfinite(parts["stage1"]) else "stage2"
                    raise TrainingError(
                        f"non-finite loss at epoch {epoch} batch {batch_idx} (term {bad})")
                model.zero_grads()
                loss.backward()
                lr_used = opt.step()

                sum_l1 += parts["stage1"]
                if parts["stage2"] is not None:
                    sum_l2 += parts["stage2"]
                    seen_stage2 = True
                sum_total += loss.item()

            eval_dice = None
            if eval_data is not None and cfg.train.eval_every > 0 and (
                    epoch % cfg.train.eval_every == 0 or epoch == cfg.train.epochs - 1):
                eval_dice = eval_mean_dice(model, eval_data)

            rec = EpochRecord(
                epoch=epoch,
                lambda_w=lambda_w(epoch, cfg.loss),
                loss_stage1=sum_l1 / steps_per_epoch,
                loss_stage2=(sum_l2 / steps_per_epoch) if seen_stage2 else None,
                loss=sum_total / steps_per_epoch,
                eval_dice=eval_dice,
                lr=lr_used,
            )
            records.append(rec)
            log_fh.write(format_record(rec) + "\n")
            log_fh.flush()

            if cfg.train.checkpoint_every and (epoch + 1) % cfg.train.checkpoint_every == 0:
                tensors, meta = _collect_checkpoint(model, opt, cfg, epoch + 1)
                save_checkpoint(os.path.join(out_dir, f"checkpoint_epoch{epoch + 1:04d}.hck"),
                                tensors, meta)
            if cfg.train.stop_at_dice and eval_dice is not None and eval_dice >= cfg.train.stop_at_dice:
                break

        tensors, meta = _collect_checkpoint(model, opt, cfg, records[-1].epoch + 1 if records else start_epoch)
        save_checkpoint(ckpt_path, tensors, meta)

    return {"log": log_path, "checkpoint": ckpt_path, "records": records, "model": model}


# ---- report rendering ---------------------------------------------------------------


def render_metric_table(report: MetricReport, fmt: str = "text") -> str:
    rows = report.rows()
    if fmt == "csv":
        lines = ["class,dice,hausdorff"]
        for cls, d, h in rows:
            lines.append(f"{cls + 1},{repr(d)},{'' if h is None else repr(h)}")
        lines.append(f"mean,{repr(report.mean_dice)},"
                     f"{'' if report.mean_hd is None else repr(report.mean_hd)}")
        return "\n".join(lines) + "\n"
    header = f"{'class':>6} {'dice':>12} {'hausdorff':>12}"
    lines = [header, "-" * len(header)]
    for cls, d, h in rows:
        hs = "undefined" if h is None else f"{h:.6f}"
        lines.append(f"{cls + 1:>6} {d:>12.6f} {hs:>12}")
    hs = "undefined" if report.mean_hd is None else f"{report.mean_hd:.6f}"
    lines.append(f"{'mean':>6} {report.mean_dice:>12.6f} {hs:>12}")
    return "\n".join(lines) + "\n"


def write_pgm(path, labels: np.ndarray, num_classes: int) -> None:
    """Predicted label map as a binary portable graymap (P5)."""
    h, w = labels.shape
    scale = 255 // max(num_classes - 1, 1)
    data = (labels.astype(np.uint16) * scale).clip(0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())
