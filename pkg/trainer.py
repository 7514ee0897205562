import os
import csv
import time
import logging
from dataclasses import dataclass, field
from decimal import Decimal
from typing import Dict, List, Optional, Sequence

import numpy as np
from pydantic import BaseModel

import tensor as T
from core import DataError, FormatError, NumericError, Settings, TrainSettings, config_digest
from data import ImageSample, batch_iter, collate
from distill import (LossParts, PredictionStore, alpha_at, loss_ce_hier_sad, loss_ce_resp, loss_div_sad, loss_feat,
                     prune_stores, soften_final, soften_sad, store_path, total_loss)
from network import StudentNetwork, load_checkpoint, save_checkpoint
from sstask import JointLabelSpace, expand_batch, joint_one_hot_batch
from tensor import Parameter

logger = logging.getLogger("lsskd.trainer")

CSV_HEADER = ["epoch", "lr", "train_total", "ls_loss", "is_loss", "test_top1", "test_top5", "wall_s"]
EVAL_BATCH = 256


class EpochMetrics(BaseModel):
    epoch: int
    lr: float
    train_total: float
    ls_loss: float
    is_loss: float
    test_top1: float
    test_top5: float
    wall_s: float
    softened_batches: int = 0  # batches trained on epoch e-1 soft targets; not part of the CSV

    def csv_row(self) -> List[str]:
        return [str(self.epoch), f"{self.lr:.10g}", f"{self.train_total:.8f}", f"{self.ls_loss:.8f}", f"{self.is_loss:.8f}",
                f"{self.test_top1:.4f}", f"{self.test_top5:.4f}", f"{self.wall_s:.2f}"]


@dataclass
class TrainingResult:
    checkpoint_path: str
    best_path: str
    metrics_path: str
    history: List[EpochMetrics] = field(default_factory=list)


# --- SCHEDULE / OPTIMIZER ---
def lr_at(epoch: int, train: TrainSettings) -> float:
    """lr0 * decay^(milestones already completed); decimal arithmetic keeps 0.05 -> 0.005 exact."""
    if not 1 <= epoch <= train.epochs: raise ValueError(f"epoch {epoch} outside [1, {train.epochs}]")
    passed = sum(1 for m in train.milestones if m <= epoch - 1)
    return float(Decimal(repr(train.lr0)) * Decimal(repr(train.decay)) ** passed)


def sgd_step(params: Dict[str, Parameter], grads: Dict[str, Optional[np.ndarray]], lr: float, momentum: float,
             weight_decay: float, velocities: Dict[str, np.ndarray]):
    """v <- momentum * v + grad + wd * param (norm parameters skip wd); param <- param - lr * v."""
    for name, p in params.items():
        g = grads.get(name)
        g = np.zeros_like(p.data) if g is None else g
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for {name} (max |g| = {np.nanmax(np.abs(g))}, lr = {lr})")
        if weight_decay and p.decays: g = g + weight_decay * p.data
        v = momentum * velocities.get(name, np.zeros_like(p.data)) + g
        velocities[name] = v.astype(p.dtype)
        p.data = (p.data - lr * v).astype(p.dtype)


# --- EVALUATION ---
def evaluate(network, test: Sequence[ImageSample], batch_size: int = EVAL_BATCH):
    """Top-1 / top-5 percentages from the final N-way head in eval mode."""
    if not test: raise DataError("cannot evaluate on an empty test set")
    was_training = network.training; network.eval()
    top1 = top5 = 0
    try:
        with T.no_grad():
            for start in range(0, len(test), batch_size):
                x, labels, _ = collate(test[start:start + batch_size])
                logits = network.predict(x).data
                ranked = np.argsort(-logits, axis=1, kind="stable")[:, :min(5, logits.shape[1])]
                top1 += int((ranked[:, 0] == labels).sum())
                top5 += int((ranked == labels[:, None]).any(axis=1).sum())
    finally:
        network.train(was_training)
    return 100.0 * top1 / len(test), 100.0 * top5 / len(test)


def evaluate_stages(network: StudentNetwork, test: Sequence[ImageSample], batch_size: int = EVAL_BATCH) -> List[float]:
    """Per-branch top-1 on unrotated inputs, class n scored by joint logit n*M + 0."""
    if not test: raise DataError("cannot evaluate on an empty test set")
    M = network.config.num_transforms
    was_training = network.training; network.eval()
    correct = np.zeros(network.config.stages, dtype=np.int64)
    try:
        with T.no_grad():
            for start in range(0, len(test), batch_size):
                x, labels, _ = collate(test[start:start + batch_size])
                for l, logits in enumerate(network.forward_aux(x).sad_logits):
                    correct[l] += int((logits.data[:, ::M].argmax(axis=1) == labels).sum())
    finally:
        network.train(was_training)
    return [100.0 * c / len(test) for c in correct]


# --- TRAINING ---
def _one_hot(labels: np.ndarray, n: int) -> np.ndarray:
    out = np.zeros((len(labels), n)); out[np.arange(len(labels)), labels] = 1.0
    return out


def compute_loss_parts(network: StudentNetwork, x: np.ndarray, labels: np.ndarray, ids: np.ndarray, store: PredictionStore,
                       epoch: int, settings: Settings, alpha: float):
    """Forward the expanded batch and build the four terms; returns (parts, aux output, softened?)."""
    hp, cfg = settings.distill, network.config
    space = JointLabelSpace(num_classes=cfg.num_classes, num_transforms=cfg.num_transforms)
    B, M, K = len(labels), space.num_transforms, space.size
    x_exp, joint, _ = expand_batch(x, labels, space)
    out = network.forward_aux(x_exp)
    prev = store.fetch_batch(epoch - 1, ids)
    final_t = soften_final(_one_hot(labels, cfg.num_classes), prev[0] if prev else None, alpha, hp.tau_ce)
    joint_oh = joint_one_hot_batch(joint, space)
    sad_t = [soften_sad(joint_oh, prev[1][l].reshape(M * B, K) if prev else None, alpha, hp.tau_kd) for l in range(cfg.stages)]
    parts = LossParts(
        ce_resp=loss_ce_resp(out.final_logits[0:B], final_t, hp.tau_ce),
        ce_hier=loss_ce_hier_sad(out.sad_logits, sad_t, hp.tau_kd, M),
        div=loss_div_sad(out.sad_logits[:-1], out.sad_logits[-1], hp.tau_kd, hp.kl_direction),
        feat=loss_feat(out.pooled_features[:-1], out.final_pooled),
    )
    return parts, out, prev is not None


def train_step(network: StudentNetwork, x, labels, ids, store: PredictionStore, epoch: int, settings: Settings,
               alpha: float, lr: float, velocities: Dict[str, np.ndarray]):
    cfg = network.config
    if settings.train.mode == "baseline":
        logits = network.forward_main(x).final_logits
        ce = loss_ce_resp(logits, _one_hot(labels, cfg.num_classes), settings.distill.tau_ce)
        zero = T.Tensor(0.0)
        parts, loss, softened = LossParts(ce, zero, zero, zero), ce, False
    else:
        parts, out, softened = compute_loss_parts(network, x, labels, ids, store, epoch, settings, alpha)
        loss = total_loss(parts, settings.distill.beta, settings.distill.gamma)
    if not np.isfinite(loss.data).all(): raise NumericError(f"non-finite training loss at epoch {epoch}")
    network.zero_grad()
    T.backward(loss)
    params = dict(network.named_parameters())
    sgd_step(params, {n: p.grad for n, p in params.items()}, lr, settings.train.momentum, settings.train.wd, velocities)
    if settings.train.mode != "baseline":
        B, M, K = len(labels), cfg.num_transforms, cfg.joint_size
        store.update(epoch, ids, out.final_logits.data[:B], np.stack([s.data.reshape(M, B, K) for s in out.sad_logits]))
    return loss.item(), parts, softened


def read_metrics(path: str, upto: Optional[int] = None) -> List[EpochMetrics]:
    if not os.path.isfile(path): return []
    with open(path, newline="") as f:
        rows = [r for r in csv.DictReader(f) if upto is None or int(r["epoch"]) <= upto]
    return [EpochMetrics(**{k: float(v) if k != "epoch" else int(v) for k, v in r.items()}) for r in rows]


def _write_metrics(path: str, history: Sequence[EpochMetrics]):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for m in history: writer.writerow(m.csv_row())


def _append_metrics(path: str, metrics: EpochMetrics):
    with open(path, "a", newline="") as f: csv.writer(f, lineterminator="\n").writerow(metrics.csv_row())


def _checkpoint_state(network, velocities, best_top1: float, best_epoch: int) -> Dict[str, np.ndarray]:
    state = dict(network.state_dict())
    state.update({f"optim.{k}": v for k, v in velocities.items()})
    state["meta.best_top1"] = np.asarray(best_top1, dtype=np.float64)
    state["meta.best_epoch"] = np.asarray(best_epoch, dtype=np.float64)
    return state


def run_training(settings: Settings, train: Sequence[ImageSample], test: Sequence[ImageSample], network: StudentNetwork,
                 out_dir: Optional[str] = None, resume: Optional[str] = None, ledger=None) -> TrainingResult:
    out_dir = out_dir or settings.out.dir
    os.makedirs(out_dir, exist_ok=True)
    cfg, tcfg = network.config, settings.train
    digest = config_digest(settings)
    metrics_path = os.path.join(out_dir, "metrics.csv")
    last_path, best_path = os.path.join(out_dir, "last.lssk"), os.path.join(out_dir, "best.lssk")
    store = PredictionStore(cfg.num_classes, cfg.num_transforms, cfg.stages)
    velocities: Dict[str, np.ndarray] = {}
    best_top1, best_epoch, start = -1.0, 0, 1

    if resume:
        ckpt = load_checkpoint(resume)
        if ckpt.stripped: raise FormatError(f"{resume}: cannot resume from a stripped checkpoint")
        if ckpt.digest != digest: raise FormatError(f"{resume}: checkpoint config digest does not match the configuration")
        network.load_state_dict(ckpt.model_state)
        velocities = {k: v.astype(T.get_dtype()) for k, v in ckpt.section("optim.").items()}
        best_top1, best_epoch = float(ckpt.state["meta.best_top1"]), int(ckpt.state["meta.best_epoch"])
        if tcfg.mode == "lsskd":
            spath = store_path(out_dir, ckpt.epoch)
            if not os.path.isfile(spath): raise FormatError(f"no prediction store for epoch {ckpt.epoch} at {spath}")
            store = PredictionStore.load(spath)
            if store.epoch != ckpt.epoch or (store.N, store.M, store.L) != (cfg.num_classes, cfg.num_transforms, cfg.stages):
                raise FormatError(f"store/epoch mismatch: store epoch {store.epoch}, checkpoint epoch {ckpt.epoch}")
        history = read_metrics(metrics_path, ckpt.epoch)
        if len(history) != ckpt.epoch: raise FormatError(f"{metrics_path} has {len(history)} rows, checkpoint is at epoch {ckpt.epoch}")
        start = ckpt.epoch + 1
        logger.info("resuming from %s after epoch %d", resume, ckpt.epoch)
    else:
        history = []
    _write_metrics(metrics_path, history)

    run_id = ledger.start(settings, resume_epoch=start - 1 if resume else None) if ledger else None
    train_ids = [s.sample_id for s in train]
    try:
        for epoch in range(start, tcfg.epochs + 1):
            t0 = time.perf_counter()
            lr, alpha = lr_at(epoch, tcfg), alpha_at(epoch, settings.distill, tcfg.epochs)
            store.begin_epoch(epoch)
            network.train()
            totals = np.zeros(3); batches = softened = 0
            for batch in batch_iter(train, tcfg.batch, settings.seed, epoch):
                x, labels, ids = collate(batch, augmented=True, seed=settings.seed, epoch=epoch)
                loss, parts, was_soft = train_step(network, x, labels, ids, store, epoch, settings, alpha, lr, velocities)
                totals += (loss, parts.ls, parts.is_); batches += 1; softened += was_soft
                logger.debug("epoch %d batch %d loss %.5f", epoch, batches, loss)
            if tcfg.mode == "lsskd": store.check_complete(train_ids)
            top1, top5 = evaluate(network, test)
            stage_top1 = evaluate_stages(network, test) if tcfg.mode == "lsskd" else []
            means = totals / max(batches, 1)
            metrics = EpochMetrics(epoch=epoch, lr=lr, train_total=means[0], ls_loss=means[1], is_loss=means[2], test_top1=top1,
                                   test_top5=top5, wall_s=time.perf_counter() - t0 if settings.out.wall_clock else 0.0,
                                   softened_batches=softened)
            history.append(metrics); _append_metrics(metrics_path, metrics)
            if top1 > best_top1: best_top1, best_epoch = top1, epoch
            state = _checkpoint_state(network, velocities, best_top1, best_epoch)
            save_checkpoint(last_path, state, digest, epoch)
            if best_epoch == epoch: save_checkpoint(best_path, state, digest, epoch)
            if tcfg.mode == "lsskd":
                # best.lssk stays resumable alongside last.lssk
                store.save(store_path(out_dir, epoch)); prune_stores(out_dir, epoch, best_epoch)
            if ledger:
                ledger.record_epoch(run_id, metrics, stage_top1)
                ledger.activity(run_id, "checkpoint", last_path, f"epoch {epoch}" + (" (best)" if best_epoch == epoch else ""))
            logger.info("epoch %d/%d lr %.5g loss %.4f (LS %.4f, IS %.4f) top1 %.2f top5 %.2f%s", epoch, tcfg.epochs, lr, means[0],
                        means[1], means[2], top1, top5, "" if not stage_top1 else " stages " + "/".join(f"{a:.1f}" for a in stage_top1))
    except BaseException:
        if ledger: ledger.finish(run_id, "failed", best_top1, best_epoch)
        raise
    if ledger: ledger.finish(run_id, "finished", best_top1, best_epoch)
    return TrainingResult(last_path, best_path, metrics_path, history)
