"""Source-domain pretraining: supervised task loss plus masked reconstruction.

Every training step masks a random subset of patches, feeds the masked image
through the shared encoder, and optimizes the sum of the supervised loss
(per-patch cross-entropy for segmentation, image-level cross-entropy for
classification) and the L1 reconstruction loss over the masked pixels. All
parameter groups — backbone, adapters, heads, and the mask token — receive
updates during this stage.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import model as m
from .autodiff import Optimizer, Tensor
from .checkpoint import save_checkpoint
from .params import ParamStore
from .streams import Scene, SceneSpec, generate_scene, scene_class_label


@dataclass(frozen=True)
class SourceBatch:
    images: tuple          # of [c, h, w] float64 arrays
    labels: tuple          # of [num_patches] int64 arrays
    class_labels: tuple    # of int (used only for classification runs)


def scene_spec_for(config: m.ModelConfig, min_objects: int = 2,
                   max_objects: int = 5) -> SceneSpec:
    return SceneSpec(image_size=config.image_size, patch_size=config.patch_size,
                     channels=config.channels, num_classes=config.num_classes,
                     min_objects=min_objects, max_objects=max_objects)


def make_source_scenes(config: m.ModelConfig, num_scenes: int, seed: int) -> list[Scene]:
    """Render the fixed source dataset; scene i uses child seed (seed, 41, i)."""
    spec = scene_spec_for(config)
    scenes = []
    for i in range(num_scenes):
        child = int(np.random.default_rng((int(seed), 41, i)).integers(0, 2 ** 62))
        scenes.append(generate_scene(child, spec))
    return scenes


def source_step(batch: SourceBatch, params: ParamStore, config: m.ModelConfig,
                optimizer: Optimizer, lr: float, mask_seed: int, step: int):
    """One optimization step over a batch; returns (loss_total, loss_task, loss_rec).

    Per-image masks are drawn from (mask_seed, step * batch_size + i), so the
    mask sequence depends only on position in the run, not batch composition.
    The total is formed by a single addition of the two mean loss terms.
    """
    n_img = len(batch.images)
    if n_img == 0:
        raise ValueError("source_step: empty batch")
    try:
        return _source_step_inner(batch, params, config, optimizer, lr, mask_seed, step)
    except ad.NonFiniteError as e:
        raise ad.NonFiniteError(f"non-finite loss at source step {step}: {e}") from e


def _source_step_inner(batch, params, config, optimizer, lr, mask_seed, step):
    n_img = len(batch.images)
    tape = ad.Tape()
    with ad.recording(tape):
        task_terms = []
        rec_terms = []
        for i, image in enumerate(batch.images):
            x_img = Tensor(image)
            pm = m.draw_mask(config.num_patches, config.mask_ratio, mask_seed,
                             step * n_img + i)
            x_masked = m.apply_mask(x_img, pm, params["mask_token"], config)
            tokens = m.encode(x_masked, params, config)
            if config.task == "segmentation":
                logits = m.seg_decode(tokens, params, config)
                task_terms.append(ad.cross_entropy(logits, np.asarray(batch.labels[i])))
            else:
                logits = ad.reshape(m.clf_head(tokens, params, config),
                                    (1, config.num_classes))
                task_terms.append(ad.cross_entropy(
                    logits, np.asarray([batch.class_labels[i]], dtype=np.int64)))
            recon = m.rec_decode(tokens, params, config)
            rec_terms.append(ad.l1_masked(recon, x_img,
                                          Tensor(m.pixel_mask(pm, config))))
        loss_task = _mean_of(task_terms)
        loss_rec = _mean_of(rec_terms)
        loss_total = ad.add(loss_task, loss_rec)
        ad.backward(loss_total)
    optimizer.step(params, group_filter=params.groups_present(), lr=lr)
    return (float(loss_total.data), float(loss_task.data), float(loss_rec.data))


def _mean_of(terms):
    acc = terms[0]
    for t in terms[1:]:
        acc = ad.add(acc, t)
    if len(terms) > 1:
        acc = ad.scalar_mul(acc, 1.0 / len(terms))
    return acc


EPOCH_LOG_COLUMNS = ("epoch", "loss_total", "loss_seg", "loss_rec")


def train_source(config: m.ModelConfig, num_scenes: int, epochs: int, batch_size: int,
                 lr: float, seed: int, out_dir, optimizer_kind: str = "adam",
                 log_every: int = 0) -> Path:
    """Train from scratch on synthetic scenes and save a checkpoint.

    Returns the checkpoint path (<out_dir>/source.htta). An epoch log CSV with
    mean losses per epoch is written alongside it. epochs=0 saves the freshly
    initialized parameters unchanged.
    """
    if num_scenes < 1 or batch_size < 1 or epochs < 0:
        raise ValueError("train_source: need num_scenes >= 1, batch_size >= 1, epochs >= 0")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    params = m.init_params(config, seed=seed)
    optimizer = Optimizer(optimizer_kind)
    scenes = make_source_scenes(config, num_scenes, seed)
    order_rng = np.random.default_rng((int(seed), 43))

    log_rows = []
    step = 0
    for epoch in range(epochs):
        order = order_rng.permutation(len(scenes))
        sums = np.zeros(3)
        n_batches = 0
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            batch = SourceBatch(
                images=tuple(scenes[j].image for j in idx),
                labels=tuple(scenes[j].labels for j in idx),
                class_labels=tuple(scene_class_label(scenes[j]) for j in idx),
            )
            losses = source_step(batch, params, config, optimizer, lr,
                                 mask_seed=seed, step=step)
            sums += np.asarray(losses)
            n_batches += 1
            step += 1
        means = sums / max(n_batches, 1)
        log_rows.append({"epoch": epoch, "loss_total": means[0],
                         "loss_seg": means[1], "loss_rec": means[2]})
        if log_every and (epoch % log_every == 0 or epoch == epochs - 1):
            print(f"epoch {epoch:3d}  total {means[0]:.4f}  "
                  f"seg {means[1]:.4f}  rec {means[2]:.4f}")

    with (out_dir / "source_log.csv").open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=EPOCH_LOG_COLUMNS)
        writer.writeheader()
        for row in log_rows:
            writer.writerow({"epoch": row["epoch"],
                             "loss_total": f"{row['loss_total']:.6f}",
                             "loss_seg": f"{row['loss_seg']:.6f}",
                             "loss_rec": f"{row['loss_rec']:.6f}"})

    ckpt_path = out_dir / "source.htta"
    save_checkpoint(ckpt_path, params, config)
    return ckpt_path
