"""Three-stage training: pose supervision, field fitting, semantic refinement.

Stage 1 trains the pose regressor end to end with the homoscedastic pose
loss.  Stage 2 fits the semantic field to posed RGB/label images one ray
batch at a time.  Stage 3 freezes everything except batch-norm affine
parameters in the backbone, drops pose supervision entirely, and aligns the
regressor against the frozen field: semantic logits rendered at the
predicted pose are scored against class labels rendered at the ground-truth
pose.  Gradients flow through the volumetric renderer into the pose heads.

Determinism: every random draw comes from a generator re-derived per step
from (seed, stage, step), so interrupted-and-resumed runs and uninterrupted
runs produce bit-identical checkpoints.
"""

from __future__ import annotations

import csv
import logging
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .backbone import Backbone, BackboneConfig
from .checkpoint import load_checkpoint, save_checkpoint
from .config import PLATEAU_FACTOR, PLATEAU_PATIENCE, RunConfig
from .data import Dataset
from .errors import DataError, NumericError, StateError
from .geometry import normalize_quaternion_tensor
from .losses import (
    PoseLossState,
    SemanticLossWeights,
    pose_loss,
    semantic_ce_rows,
    semantic_loss_rows,
)
from .poseformer import PoseFormer, PoseFormerConfig, PoseRegressor
from .semantic_field import (
    SemanticField,
    SemanticFieldConfig,
    rays_for_pixels,
    rays_for_pose_tensor,
    render_image,
    render_rays,
)

log = logging.getLogger("poseforge.training")

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-10
SAVE_EVERY = 25  # epochs/steps between resumable snapshots


class Adam:
    """Textbook Adam with bias correction and classic weight decay.

    Weight decay is added to the raw gradient before the moment updates.
    ``lr`` is a plain attribute so schedulers can reassign it between steps.
    """

    def __init__(self, params: dict[str, Tensor], lr: float, weight_decay: float = 0.0):
        self.names = list(params.keys())
        self.params = [params[n] for n in self.names]
        self.lr = lr
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.step_count += 1
        bc1 = 1.0 - ADAM_BETA1**self.step_count
        bc2 = 1.0 - ADAM_BETA2**self.step_count
        for name, p, m, v in zip(self.names, self.params, self.m, self.v):
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient in parameter {name}")
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            m *= ADAM_BETA1
            m += (1.0 - ADAM_BETA1) * g
            v *= ADAM_BETA2
            v += (1.0 - ADAM_BETA2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)
            p.data = p.data - self.lr * update

    def state(self) -> dict[str, np.ndarray]:
        blocks = {"opt.step": np.asarray(float(self.step_count))}
        for name, m, v in zip(self.names, self.m, self.v):
            blocks[f"opt.m.{name}"] = m
            blocks[f"opt.v.{name}"] = v
        return blocks

    def load_state(self, blocks: dict[str, np.ndarray]) -> None:
        self.step_count = int(blocks["opt.step"])
        for i, name in enumerate(self.names):
            for moment, store in (("m", self.m), ("v", self.v)):
                key = f"opt.{moment}.{name}"
                if key not in blocks:
                    raise StateError(f"optimizer state is missing block {key!r}")
                if blocks[key].shape != store[i].shape:
                    raise StateError(f"optimizer block {key!r} has shape {blocks[key].shape}, expected {store[i].shape}")
                store[i] = blocks[key].copy()


class PlateauScheduler:
    """Multiply lr by ``factor`` after ``patience`` epochs without improvement."""

    def __init__(self, lr: float, factor: float = PLATEAU_FACTOR, patience: int = PLATEAU_PATIENCE):
        self.lr = lr
        self.factor = factor
        self.patience = patience
        self.best = np.inf
        self.stagnant = 0

    def observe(self, loss: float) -> float:
        if loss < self.best:
            self.best = loss
            self.stagnant = 0
        else:
            self.stagnant += 1
            if self.stagnant >= self.patience:
                self.lr *= self.factor
                self.stagnant = 0
        return self.lr


class EarlyStopper:
    """True once the monitored loss has not improved for ``patience`` epochs.

    ``patience <= 0`` disables stopping entirely.
    """

    def __init__(self, patience: int):
        self.patience = patience
        self.best = np.inf
        self.stagnant = 0

    def observe(self, loss: float) -> bool:
        if loss < self.best:
            self.best = loss
            self.stagnant = 0
            return False
        self.stagnant += 1
        return self.patience > 0 and self.stagnant >= self.patience


def exponential_lr(lr0: float, step: int, total: int, decay: float) -> float:
    """Smooth schedule reaching lr0 * decay at the final step."""
    return lr0 * decay ** (step / max(1, total - 1))


class MetricsLog:
    """CSV with columns epoch, split, loss, lr; appends when resuming."""

    def __init__(self, path, resume: bool = False):
        self.path = Path(path)
        if not resume or not self.path.exists():
            with open(self.path, "w", newline="") as fh:
                csv.writer(fh).writerow(["epoch", "split", "loss", "lr"])

    def row(self, epoch: int, split: str, loss: float, lr: float) -> None:
        with open(self.path, "a", newline="") as fh:
            csv.writer(fh).writerow([epoch, split, f"{loss:.17g}", f"{lr:.17g}"])


# -- model/field factories ----------------------------------------------------


def build_regressor(cfg: RunConfig) -> tuple[PoseRegressor, PoseLossState]:
    rng = np.random.default_rng([cfg.seed, 100])
    backbone = Backbone(BackboneConfig(proj_dim=cfg.d_model), rng)
    former = PoseFormer(PoseFormerConfig(d_model=cfg.d_model, heads=cfg.heads, ffn_hidden=cfg.ffn_hidden), rng)
    return PoseRegressor(backbone, former), PoseLossState()


def build_field(cfg: RunConfig, n_classes: int, near: float, far: float) -> SemanticField:
    rng = np.random.default_rng([cfg.seed, 200])
    field_cfg = SemanticFieldConfig(
        n_classes=n_classes,
        l_pe=cfg.field_pe,
        width=cfg.field_hidden,
        depth=cfg.field_layers,
        near=near,
        far=far,
        n_samples=cfg.n_samples,
    )
    return SemanticField(field_cfg, rng)


# -- checkpoint plumbing -------------------------------------------------------


def model_blocks(model, prefix: str) -> dict[str, np.ndarray]:
    return {f"{prefix}.{k}": v for k, v in model.state().items()}


def load_model_blocks(model, blocks: dict[str, np.ndarray], prefix: str) -> None:
    scoped = {k[len(prefix) + 1 :]: v for k, v in blocks.items() if k.startswith(prefix + ".")}
    if not scoped:
        raise StateError(f"checkpoint has no {prefix!r} blocks")
    model.load_state(scoped)


def _loss_state_blocks(state: PoseLossState) -> dict[str, np.ndarray]:
    return {name: t.data for name, t in state.parameters().items()}


def _load_loss_state(state: PoseLossState, blocks: dict[str, np.ndarray]) -> None:
    for name, t in state.parameters().items():
        if name in blocks:
            t.data = np.asarray(blocks[name]).copy()


def save_stage1_checkpoint(path, model, loss_state, epoch, opt=None) -> None:
    blocks = model_blocks(model, "model")
    blocks.update(_loss_state_blocks(loss_state))
    blocks["meta.epoch"] = np.asarray(float(epoch))
    if opt is not None:
        blocks.update(opt.state())
    save_checkpoint(path, blocks)


def load_regressor_checkpoint(path, model, loss_state=None) -> dict[str, np.ndarray]:
    blocks = load_checkpoint(path)
    load_model_blocks(model, blocks, "model")
    if loss_state is not None:
        _load_loss_state(loss_state, blocks)
    return blocks


# -- stage 1: pose supervision -------------------------------------------------


def _image_tensor(sample) -> Tensor:
    return ad.constant(sample.image)


def _epoch_rng(seed: int, stage: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng([seed, stage, epoch])


def _mean_loss(losses: list[Tensor]) -> Tensor:
    total = losses[0]
    for term in losses[1:]:
        total = total + term
    return total * (1.0 / len(losses))


def dataset_pose_loss(model, loss_state, dataset: Dataset) -> float:
    """Mean pose loss over a dataset with frozen statistics (no grad, eval BN)."""
    model.eval_mode()
    with ad.no_grad():
        values = []
        for sample in dataset.samples:
            pred, _ = model(_image_tensor(sample))
            values.append(float(pose_loss(pred, sample.pose, loss_state).data))
    model.train_mode()
    return float(np.mean(values))


def run_stage1(model, loss_state, train: Dataset, val: Dataset, cfg: RunConfig, out_dir) -> Path:
    """Train the regressor with pose supervision; returns the best checkpoint path."""
    if not train.samples:
        raise DataError("stage 1 needs a non-empty training set")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    best_path = out / "stage1_best.pfck"
    last_path = out / "stage1_last.pfck"

    model.backbone.set_frozen("full_train")
    params = dict(model.trainable_parameters())
    params.update(loss_state.parameters())
    opt = Adam(params, lr=cfg.stage1_lr, weight_decay=cfg.stage1_wd)

    start_epoch = 0
    if last_path.exists():
        blocks = load_checkpoint(last_path)
        load_model_blocks(model, blocks, "model")
        _load_loss_state(loss_state, blocks)
        opt.load_state(blocks)
        start_epoch = int(blocks["meta.epoch"]) + 1
        log.info("resuming stage 1 from epoch %d", start_epoch)

    metrics = MetricsLog(out / "stage1_metrics.csv", resume=start_epoch > 0)
    sched = PlateauScheduler(cfg.stage1_lr)
    stopper = EarlyStopper(cfg.early_stop)
    monitor_name = "val" if val.samples else "train"
    best = np.inf

    model.train_mode()
    for epoch in range(start_epoch, cfg.stage1_epochs):
        rng = _epoch_rng(cfg.seed, 1, epoch)
        order = rng.permutation(len(train.samples))
        epoch_sum = 0.0
        for lo in range(0, len(order), cfg.stage1_batch):
            batch = order[lo : lo + cfg.stage1_batch]
            losses = []
            for idx in batch:
                sample = train.samples[int(idx)]
                pred, _ = model(_image_tensor(sample))
                losses.append(pose_loss(pred, sample.pose, loss_state))
            batch_loss = _mean_loss(losses)
            opt.zero_grad()
            ad.backward(batch_loss)
            opt.step()
            epoch_sum += float(batch_loss.data) * len(batch)
        train_loss = epoch_sum / len(order)

        if val.samples:
            monitored = dataset_pose_loss(model, loss_state, val)
            metrics.row(epoch, "val", monitored, opt.lr)
        else:
            monitored = train_loss
        metrics.row(epoch, "train", train_loss, opt.lr)

        opt.lr = sched.observe(monitored)
        if monitored < best:
            best = monitored
            save_stage1_checkpoint(best_path, model, loss_state, epoch)
        if (epoch + 1) % SAVE_EVERY == 0 or epoch == cfg.stage1_epochs - 1:
            save_stage1_checkpoint(last_path, model, loss_state, epoch, opt)
        if stopper.observe(monitored):
            log.info("early stop at epoch %d (%s loss stagnant %d epochs)", epoch, monitor_name, cfg.early_stop)
            save_stage1_checkpoint(last_path, model, loss_state, epoch, opt)
            break
    if not best_path.exists():
        save_stage1_checkpoint(best_path, model, loss_state, start_epoch)
    return best_path


# -- stage 2: field fitting ----------------------------------------------------


def stage2_step(field, sample, camera, labels, rng, cfg: RunConfig, near: float, far: float):
    """One ray-batch step; returns (loss tensor, rgb mse float, ce float)."""
    h, w = sample.image.shape[1:]
    us = rng.integers(0, w, size=cfg.ray_batch)
    vs = rng.integers(0, h, size=cfg.ray_batch)
    rays = rays_for_pixels(camera, us, vs, cfg.n_samples, near, far)
    res = render_rays(rays, field, rng=rng)
    rgb_gt = sample.image[:, vs, us].T
    mse = ((res.rgb - ad.constant(rgb_gt)) ** 2).mean()
    ce = semantic_ce_rows(res.semantics, labels[vs, us])
    loss = mse + cfg.stage2_ce_weight * ce
    return loss, float(mse.data), float(ce.data)


def run_stage2(field, train: Dataset, cfg: RunConfig, out_dir) -> Path:
    """Fit the semantic field to posed RGB/label images; returns checkpoint path."""
    if not train.samples:
        raise DataError("stage 2 needs a non-empty training set")
    if any(s.labels is None for s in train.samples):
        raise DataError("stage 2 needs semantic labels for every view")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    field_path = out / "stage2_field.pfck"
    last_path = out / "stage2_last.pfck"

    opt = Adam(field.parameters(), lr=cfg.stage2_lr)
    start_step = 0
    if last_path.exists():
        blocks = load_checkpoint(last_path)
        load_model_blocks(field, blocks, "model")
        opt.load_state(blocks)
        start_step = int(blocks["meta.epoch"]) + 1
        log.info("resuming stage 2 from step %d", start_step)

    metrics = MetricsLog(out / "stage2_metrics.csv", resume=start_step > 0)
    cameras = [train.camera(s.pose) for s in train.samples]
    for step in range(start_step, cfg.stage2_steps):
        rng = _epoch_rng(cfg.seed, 2, step)
        idx = int(rng.integers(len(train.samples)))
        sample = train.samples[idx]
        opt.lr = exponential_lr(cfg.stage2_lr, step, cfg.stage2_steps, cfg.stage2_decay)
        loss, _, _ = stage2_step(field, sample, cameras[idx], sample.labels, rng, cfg, train.near, train.far)
        opt.zero_grad()
        ad.backward(loss)
        opt.step()
        metrics.row(step, "train", float(loss.data), opt.lr)
        if (step + 1) % SAVE_EVERY == 0 or step == cfg.stage2_steps - 1:
            blocks = model_blocks(field, "model")
            blocks["meta.epoch"] = np.asarray(float(step))
            blocks.update(opt.state())
            save_checkpoint(last_path, blocks)

    blocks = model_blocks(field, "model")
    blocks["meta.epoch"] = np.asarray(float(cfg.stage2_steps - 1))
    save_checkpoint(field_path, blocks)
    return field_path


def rendered_class_accuracy(field, dataset: Dataset, stride: int = 1) -> float:
    """Fraction of pixels whose rendered argmax class matches the labels."""
    correct = 0
    total = 0
    for sample in dataset.samples:
        cam = dataset.camera(sample.pose)
        logits, _ = render_image(cam, field, stride=stride, near=dataset.near, far=dataset.far)
        pred = logits.argmax(axis=0)
        gt = sample.labels[::stride, ::stride]
        correct += int((pred == gt).sum())
        total += pred.size
    return correct / total


# -- stage 3: semantic refinement ----------------------------------------------


def render_label_cache(field, dataset: Dataset, stride: int) -> list[np.ndarray]:
    """Class labels rendered at each ground-truth pose from the frozen field."""
    cache = []
    for sample in dataset.samples:
        cam = dataset.camera(sample.pose)
        logits, _ = render_image(cam, field, stride=stride, near=dataset.near, far=dataset.far)
        cache.append(logits.argmax(axis=0).reshape(-1))
    return cache


def run_stage3(model, field, train: Dataset, cfg: RunConfig, out_dir) -> Path:
    """Semantic-only refinement against the frozen field; returns checkpoint path."""
    if not train.samples:
        raise DataError("stage 3 needs a non-empty training set")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model_path = out / "stage3_model.pfck"
    last_path = out / "stage3_last.pfck"

    # The field supervises and never trains here; dropping requires_grad keeps
    # its parameters out of the tape so gradients flow only into the pose.
    for p in field.parameters().values():
        p.requires_grad = False

    model.backbone.set_frozen("freeze_all_but_bn")
    opt = Adam(model.trainable_parameters(), lr=cfg.stage3_lr)
    start_step = 0
    if last_path.exists():
        blocks = load_checkpoint(last_path)
        load_model_blocks(model, blocks, "model")
        opt.load_state(blocks)
        start_step = int(blocks["meta.epoch"]) + 1
        log.info("resuming stage 3 from step %d", start_step)

    weights = SemanticLossWeights(w_ce=cfg.stage3_w_ce, w_sam=cfg.stage3_w_sam)
    metrics = MetricsLog(out / "stage3_metrics.csv", resume=start_step > 0)
    labels = render_label_cache(field, train, cfg.render_stride)
    cameras = [train.camera(s.pose) for s in train.samples]

    model.train_mode()
    for step in range(start_step, cfg.stage3_steps):
        rng = _epoch_rng(cfg.seed, 3, step)
        idx = int(rng.integers(len(train.samples)))
        sample = train.samples[idx]
        pred, _ = model(_image_tensor(sample))
        q_unit = normalize_quaternion_tensor(pred.q_raw)
        rays = rays_for_pose_tensor(
            pred.x, q_unit, cameras[idx], cfg.render_stride, cfg.n_samples, train.near, train.far
        )
        res = render_rays(rays, field, rng=None)
        loss = semantic_loss_rows(res.semantics, labels[idx], weights)
        opt.zero_grad()
        ad.backward(loss)
        opt.step()
        metrics.row(step, "train", float(loss.data), opt.lr)
        if (step + 1) % SAVE_EVERY == 0 or step == cfg.stage3_steps - 1:
            blocks = model_blocks(model, "model")
            blocks["meta.epoch"] = np.asarray(float(step))
            blocks.update(opt.state())
            save_checkpoint(last_path, blocks)

    blocks = model_blocks(model, "model")
    blocks["meta.epoch"] = np.asarray(float(cfg.stage3_steps - 1))
    save_checkpoint(model_path, blocks)
    return model_path
