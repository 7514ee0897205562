import os
import glob
import struct
import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

import tensor as T
from core import FormatError, Hyperparams, ShapeError
from tensor import Tensor

logger = logging.getLogger("lsskd.distill")


@dataclass(frozen=True)
class SoftTarget:
    probs: np.ndarray  # float64, rows sum to 1
    softened: bool


def alpha_at(epoch: int, hp: Hyperparams, epochs: int) -> float:
    return hp.alpha * epoch / epochs if hp.alpha_warmup else hp.alpha


def _soften(one_hot: np.ndarray, prev_logits: Optional[np.ndarray], alpha: float, tau: float) -> SoftTarget:
    if not 0 <= alpha <= 1: raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    one_hot = np.asarray(one_hot, dtype=np.float64)
    if prev_logits is None: return SoftTarget(one_hot, False)
    prev = T.softmax_np(np.asarray(prev_logits, dtype=np.float64), tau)
    return SoftTarget((1.0 - alpha) * one_hot + alpha * prev, True)


def soften_final(y_one_hot, prev_final_logits, alpha: float, tau_ce: float = 1.0) -> SoftTarget:
    """(1 - alpha) * y + alpha * softmax(previous epoch final logits / tau_ce); hard labels when no record."""
    return _soften(y_one_hot, prev_final_logits, alpha, tau_ce)


def soften_sad(joint_one_hot, prev_sad_logits, alpha: float, tau_kd: float) -> SoftTarget:
    """Per stage/transform joint-space target, same convex rule at tau_kd."""
    return _soften(joint_one_hot, prev_sad_logits, alpha, tau_kd)


# --- LOSS TERMS ---
def loss_ce_resp(final_logits: Tensor, soft_targets, tau_ce: float = 1.0) -> Tensor:
    target = soft_targets.probs if isinstance(soft_targets, SoftTarget) else soft_targets
    return T.cross_entropy_soft(final_logits, target, tau_ce)


def loss_ce_hier_sad(sad_logits: Sequence[Tensor], soft_targets: Sequence, tau_kd: float, num_transforms: int) -> Tensor:
    """sum over stages of the soft CE averaged over all M*B rows, i.e. (1/M) sum_j of per-transform batch means."""
    if len(sad_logits) != len(soft_targets) or not sad_logits: raise ShapeError("one SAD target per stage is required")
    total = None
    for logits, target in zip(sad_logits, soft_targets):
        target = target.probs if isinstance(target, SoftTarget) else target
        if logits.shape[0] % num_transforms: raise ShapeError(f"{logits.shape[0]} SAD rows are not a multiple of M={num_transforms}")
        term = T.cross_entropy_soft(logits, target, tau_kd)
        total = term if total is None else total + term
    return total


def loss_div_sad(shallow_logits: Sequence[Tensor], deep_logits, tau_kd: float, direction: str = "shallow_deep") -> Tensor:
    """tau^2 * KL(shallow || deep) summed over shallow stages, deep side held constant."""
    deep = T.detach(deep_logits) if isinstance(deep_logits, Tensor) else Tensor(deep_logits)
    q_deep = T.softmax_t(deep, tau_kd)
    total = None
    for logits in shallow_logits:
        p = T.softmax_t(logits, tau_kd)
        kl = T.kl_div(p, q_deep) if direction == "shallow_deep" else T.kl_div(q_deep, p)
        term = kl * (tau_kd * tau_kd)
        total = term if total is None else total + term
    return total if total is not None else Tensor(0.0)


def loss_feat(pooled_features: Sequence[Tensor], final_pooled) -> Tensor:
    """Mean over (stage, sample) pairs of ||F^l - F^o||^2 with F^o held constant."""
    target = T.detach(final_pooled) if isinstance(final_pooled, Tensor) else Tensor(final_pooled)
    if not pooled_features: return Tensor(0.0)
    total = None
    for feat in pooled_features:
        if feat.shape != target.shape: raise ShapeError(f"pooled feature {feat.shape} vs final {target.shape}")
        term = T.sum_squared_diff(feat, target)
        total = term if total is None else total + term
    return total / (len(pooled_features) * target.shape[0])


@dataclass
class LossParts:
    ce_resp: Tensor
    ce_hier: Tensor
    div: Tensor
    feat: Tensor

    @property
    def ls(self) -> float:
        return self.ce_resp.item() + self.ce_hier.item()

    @property
    def is_(self) -> float:
        return self.div.item() + self.feat.item()


def total_loss(parts: LossParts, beta: float, gamma: float) -> Tensor:
    return parts.ce_resp * (1.0 - beta) + parts.ce_hier + parts.div * beta + parts.feat * gamma


# --- PREDICTION STORE ---
STORE_MAGIC = b"LSPS"
STORE_VERSION = 1
_STORE_HEADER = struct.Struct("<4sHIIIIIIB")


@dataclass(frozen=True)
class StoreRecord:
    final_logits: np.ndarray  # N
    sad_logits: np.ndarray    # L x M x K


class PredictionStore:
    """Raw logits of epoch e being written, plus epoch e-1 being read."""

    def __init__(self, num_classes: int, num_transforms: int, num_stages: int):
        self.N, self.M, self.L = num_classes, num_transforms, num_stages
        self.K = num_classes * num_transforms
        self.epoch = 0
        self._current: Dict[int, StoreRecord] = {}
        self._previous: Dict[int, StoreRecord] = {}
        self._previous_epoch = 0

    def __len__(self):
        return len(self._current)

    def begin_epoch(self, epoch: int):
        if self._current:
            self._previous, self._previous_epoch = self._current, self.epoch
        self._current, self.epoch = {}, epoch

    def update(self, epoch: int, sample_ids, final_logits: np.ndarray, sad_logits: np.ndarray):
        """sad_logits: L x M x B x K for the batch's sample_ids."""
        if epoch != self.epoch: self.begin_epoch(epoch)
        final_logits = np.asarray(final_logits); sad_logits = np.asarray(sad_logits)
        if final_logits.shape != (len(sample_ids), self.N) or sad_logits.shape != (self.L, self.M, len(sample_ids), self.K):
            raise ShapeError(f"store update shapes {final_logits.shape} / {sad_logits.shape} do not fit N={self.N} L={self.L} M={self.M}")
        for i, sid in enumerate(int(s) for s in sample_ids):
            if sid in self._current: raise ShapeError(f"duplicate store update for sample {sid} in epoch {epoch}")
            self._current[sid] = StoreRecord(final_logits[i].copy(), sad_logits[:, :, i, :].copy())

    def fetch(self, epoch: int, sample_id: int) -> Optional[StoreRecord]:
        if epoch >= 1 and epoch == self.epoch: return self._current.get(int(sample_id))
        if epoch >= 1 and epoch == self._previous_epoch: return self._previous.get(int(sample_id))
        return None

    def fetch_batch(self, epoch: int, sample_ids):
        """(B x N final, L x M x B x K sad) when every id has a record, else None."""
        records = [self.fetch(epoch, sid) for sid in sample_ids]
        if not records or any(r is None for r in records): return None
        return np.stack([r.final_logits for r in records]), np.stack([r.sad_logits for r in records], axis=2)

    def check_complete(self, sample_ids):
        missing = [int(s) for s in sample_ids if int(s) not in self._current]
        if missing: raise ShapeError(f"epoch {self.epoch} store lacks {len(missing)} samples (first {missing[0]})")

    def save(self, path: str):
        dtype = next(iter(self._current.values())).final_logits.dtype if self._current else np.dtype(np.float32)
        tag = 1 if dtype == np.float64 else 0
        wire = np.dtype("<f8") if tag else np.dtype("<f4")
        out = bytearray(_STORE_HEADER.pack(STORE_MAGIC, STORE_VERSION, self.epoch, self.N, self.M, self.L, self.K, len(self._current), tag))
        for sid in sorted(self._current):
            rec = self._current[sid]
            out += struct.pack("<I", sid) + rec.final_logits.astype(wire).tobytes() + rec.sad_logits.astype(wire).tobytes()
        with open(path, "wb") as f: f.write(out)

    @classmethod
    def load(cls, path: str) -> "PredictionStore":
        """Load an epoch file as the readable previous epoch of a fresh store."""
        try:
            with open(path, "rb") as f: buf = f.read()
        except OSError as e:
            raise FormatError(f"cannot read prediction store {path}: {e}")
        if len(buf) < _STORE_HEADER.size: raise FormatError(f"{path}: truncated store header")
        magic, version, epoch, N, M, L, K, count, tag = _STORE_HEADER.unpack_from(buf, 0)
        if magic != STORE_MAGIC or version != STORE_VERSION: raise FormatError(f"{path}: not a version-{STORE_VERSION} prediction store")
        if K != N * M: raise FormatError(f"{path}: K={K} != N*M={N * M}")
        wire = np.dtype("<f8") if tag else np.dtype("<f4")
        per = N + L * M * K; rec_bytes = 4 + per * wire.itemsize
        if len(buf) != _STORE_HEADER.size + count * rec_bytes: raise FormatError(f"{path}: store payload length does not match its header")
        store = cls(N, M, L); store.epoch = epoch
        pos = _STORE_HEADER.size
        for _ in range(count):
            (sid,) = struct.unpack_from("<I", buf, pos)
            values = np.frombuffer(buf, dtype=wire, count=per, offset=pos + 4)
            store._current[sid] = StoreRecord(values[:N].copy(), values[N:].reshape(L, M, K).copy())
            pos += rec_bytes
        return store


def store_path(out_dir: str, epoch: int) -> str:
    return os.path.join(out_dir, f"store_e{epoch:04d}.lsps")


def prune_stores(out_dir: str, *keep_epochs: int):
    keep = {store_path(out_dir, e) for e in keep_epochs}
    for path in glob.glob(os.path.join(out_dir, "store_e*.lsps")):
        if path not in keep: os.remove(path)
