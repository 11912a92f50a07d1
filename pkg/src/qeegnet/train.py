"""AdamW training loop, metrics and the binary checkpoint format.

Checkpoint layout (little-endian)::

    b"QCKP"  u32 version  u32 descriptor_len  descriptor (UTF-8 JSON)
    u32 n_tensors
    per tensor: u16 name_len, name, u8 ndim, u32 dims[ndim], u64 offset, u64 count
    f64 payload
    u64 CRC-64/XZ of every preceding byte
"""
from __future__ import annotations

import copy
import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .data import EpochSet, SplitPlan
from .errors import ArchitectureMismatchError, ConfigurationError, CorruptionError, FormatError, TrainingError
from .model import ModelConfig, ModelGraph, build_model

log = logging.getLogger(__name__)

CROSS_ENTROPY = "cross_entropy"
MSE = "mse"
SELECT_ACCURACY = "val_accuracy"
SELECT_LOSS = "val_loss"
QUANTUM_PARAMS = ("vqc.weights",)


@dataclass
class TrainConfig:
    batch_size: int = 32
    epochs: int = 100
    learning_rate: float = 1e-3
    weight_decay: float = 0.01
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    seed: int = 0
    loss: str = CROSS_ENTROPY
    selector: str = SELECT_ACCURACY
    decay_quantum: bool = False  # apply weight decay to VQC angles too

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ConfigurationError("epochs must be >= 1")
        if not self.learning_rate > 0 or self.weight_decay < 0 or not self.adam_epsilon > 0:
            raise ConfigurationError("learning_rate and adam_epsilon must be positive, weight_decay >= 0")
        if not (0 < self.adam_beta1 < 1 and 0 < self.adam_beta2 < 1):
            raise ConfigurationError("Adam betas must lie in (0, 1)")
        if self.loss not in (CROSS_ENTROPY, MSE):
            raise ConfigurationError(f"unknown loss {self.loss!r}")
        if self.selector not in (SELECT_ACCURACY, SELECT_LOSS):
            raise ConfigurationError(f"unknown selector {self.selector!r}")


# ---------------------------------------------------------------------------
# optimiser


@dataclass
class AdamMoments:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def copy(self) -> "AdamMoments":
        return AdamMoments({k: a.copy() for k, a in self.m.items()}, {k: a.copy() for k, a in self.v.items()})


def adamw_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], moments: AdamMoments,
               cfg: TrainConfig, step: int, no_decay=()) -> tuple[dict, AdamMoments]:
    """One AdamW update, in place. ``step`` counts from 1.

    Weight decay is decoupled: ``p *= 1 - lr * wd`` before the adaptive step.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient in {name}")
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    c1, c2 = 1 - b1**step, 1 - b2**step
    for name, p in params.items():
        g = grads[name]
        m = moments.m.setdefault(name, np.zeros_like(p))
        v = moments.v.setdefault(name, np.zeros_like(p))
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        if cfg.weight_decay and name not in no_decay:
            p *= 1 - cfg.learning_rate * cfg.weight_decay
        p -= cfg.learning_rate * (m / c1) / (np.sqrt(v / c2) + cfg.adam_epsilon)
    return params, moments


# ---------------------------------------------------------------------------
# metrics


@dataclass
class MetricsReport:
    """Percentages. Binary tasks score class 1; multi-class tasks use macro P/R."""

    accuracy: float
    f1: float
    precision: float
    recall: float
    confusion_matrix: list[list[int]]
    n_trials: int
    loss: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def confusion_matrix(y_true, y_pred, n_classes: int) -> np.ndarray:
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(y_true), np.asarray(y_pred)), 1)
    return cm


def _ratio(num, den) -> float:
    return float(num) / float(den) if den else 0.0


def metrics_from_confusion(cm: np.ndarray, loss: float | None = None) -> MetricsReport:
    cm = np.asarray(cm)
    total = int(cm.sum())
    if total == 0:
        raise ConfigurationError("cannot score an empty prediction set")
    tp = np.diag(cm)
    if cm.shape[0] == 2:
        precision = _ratio(tp[1], cm[:, 1].sum())
        recall = _ratio(tp[1], cm[1].sum())
    else:
        precision = float(np.mean([_ratio(tp[k], cm[:, k].sum()) for k in range(cm.shape[0])]))
        recall = float(np.mean([_ratio(tp[k], cm[k].sum()) for k in range(cm.shape[0])]))
    precision, recall = 100 * precision, 100 * recall
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return MetricsReport(100 * int(np.trace(cm)) / total, f1, precision, recall, cm.tolist(), total, loss)


def aggregate_reports(reports: list[MetricsReport], groups: list | None = None) -> dict:
    """Mean and sample standard deviation of each metric across folds or subjects."""
    out = {"n": len(reports), "groups": groups}
    for key in ("accuracy", "f1", "precision", "recall"):
        vals = np.array([getattr(r, key) for r in reports], dtype=float)
        out[key] = {"mean": float(vals.mean()), "std": float(vals.std(ddof=1)) if len(vals) > 1 else 0.0,
                    "values": vals.tolist()}
    return out


def predict_proba(graph: ModelGraph, epochs: np.ndarray, batch_size: int = 256) -> np.ndarray:
    out = [graph.forward(np.asarray(epochs[i:i + batch_size], dtype=np.float64), training=False)
           for i in range(0, len(epochs), batch_size)]
    return np.concatenate(out) if out else np.zeros((0, graph.config.n_classes))


def evaluate(graph: ModelGraph, data: EpochSet, idx) -> MetricsReport:
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size == 0:
        raise ConfigurationError("evaluation needs a non-empty index list")
    probs = predict_proba(graph, data.epochs[idx])
    labels = data.labels[idx]
    cm = confusion_matrix(labels, probs.argmax(axis=1), graph.config.n_classes)
    return metrics_from_confusion(cm, loss=nn.cross_entropy_loss(probs, labels))


# ---------------------------------------------------------------------------
# checkpoints


_CRC_TABLE = None


def crc64(data: bytes) -> int:
    """CRC-64/XZ (ECMA-182 polynomial, reflected, all-ones init and xorout)."""
    global _CRC_TABLE
    if _CRC_TABLE is None:
        poly = 0xC96C5795D7870F42
        table = []
        for i in range(256):
            c = i
            for _ in range(8):
                c = (c >> 1) ^ poly if c & 1 else c >> 1
            table.append(c)
        _CRC_TABLE = table
    crc = 0xFFFFFFFFFFFFFFFF
    table = _CRC_TABLE
    for b in data:
        crc = table[(crc ^ b) & 0xFF] ^ (crc >> 8)
    return crc ^ 0xFFFFFFFFFFFFFFFF


CKPT_MAGIC = b"QCKP"
CKPT_VERSION = 1


@dataclass
class Checkpoint:
    architecture: dict
    state: dict[str, np.ndarray]
    moments: AdamMoments
    epoch: int
    step: int
    val_accuracy: float
    val_loss: float
    train_config: dict
    rng_state: dict
    extra: dict = field(default_factory=dict)

    def build_model(self) -> ModelGraph:
        cfg = ModelConfig.from_dict(self.architecture["config"])
        graph = build_model(self.architecture["kind"], cfg, seed=self.train_config.get("seed", 0))
        check_architecture(graph, self.architecture)
        graph.load_state_dict(self.state)
        for layer, st in zip(graph.dropout_layers(), self.rng_state.get("dropout", [])):
            layer.rng.bit_generator.state = st
        return graph


def check_architecture(graph: ModelGraph, architecture: dict) -> None:
    ours, theirs = graph.descriptor(), architecture
    diffs = []
    if ours["kind"] != theirs.get("kind"):
        diffs.append(f"model kind: {theirs.get('kind')} != {ours['kind']}")
    a, b = ours["layers"], theirs.get("layers", [])
    for i in range(max(len(a), len(b))):
        la = a[i] if i < len(a) else None
        lb = b[i] if i < len(b) else None
        if la != lb:
            name = (la or lb)["name"]
            diffs.append(f"layer {i} ({name}): checkpoint {lb} vs model {la}")
    if diffs:
        raise ArchitectureMismatchError(diffs)


def _tensor_table(ckpt: Checkpoint) -> list[tuple[str, np.ndarray]]:
    items = [(f"state/{k}", v) for k, v in sorted(ckpt.state.items())]
    items += [(f"adam_m/{k}", v) for k, v in sorted(ckpt.moments.m.items())]
    items += [(f"adam_v/{k}", v) for k, v in sorted(ckpt.moments.v.items())]
    return items


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    descriptor = {
        "architecture": ckpt.architecture, "epoch": ckpt.epoch, "step": ckpt.step,
        "val_accuracy": ckpt.val_accuracy, "val_loss": ckpt.val_loss,
        "train_config": ckpt.train_config, "rng_state": ckpt.rng_state, "extra": ckpt.extra,
    }
    desc = json.dumps(descriptor, sort_keys=True).encode()
    tensors = _tensor_table(ckpt)
    head = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(desc)), desc, struct.pack("<I", len(tensors))]
    offset = 0
    payload = []
    for name, arr in tensors:
        raw = name.encode()
        head.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        head.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        head.append(struct.pack("<QQ", offset, arr.size))
        payload.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        offset += arr.size
    body = b"".join(head + payload)
    return body + struct.pack("<Q", crc64(body))


def decode_checkpoint(blob: bytes) -> Checkpoint:
    if blob[:4] != CKPT_MAGIC:
        raise FormatError("not a QCKP checkpoint (bad magic)")
    if len(blob) < 20:
        raise CorruptionError("checkpoint truncated")
    body, (crc,) = blob[:-8], struct.unpack("<Q", blob[-8:])
    if crc64(body) != crc:
        raise CorruptionError("checkpoint checksum mismatch")
    version, dlen = struct.unpack_from("<II", body, 4)
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    pos = 12
    descriptor = json.loads(body[pos:pos + dlen])
    pos += dlen
    (count,) = struct.unpack_from("<I", body, pos)
    pos += 4
    entries = []
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", body, pos)
        pos += 2
        name = body[pos:pos + nlen].decode()
        pos += nlen
        (ndim,) = struct.unpack_from("<B", body, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", body, pos)
        pos += 4 * ndim
        offset, size = struct.unpack_from("<QQ", body, pos)
        pos += 16
        entries.append((name, shape, offset, size))
    payload = np.frombuffer(body, dtype="<f8", offset=pos)
    groups = {"state": {}, "adam_m": {}, "adam_v": {}}
    for name, shape, offset, size in entries:
        group, key = name.split("/", 1)
        groups[group][key] = payload[offset:offset + size].reshape(shape).astype(np.float64)
    return Checkpoint(descriptor["architecture"], groups["state"], AdamMoments(groups["adam_m"], groups["adam_v"]),
                      descriptor["epoch"], descriptor["step"], descriptor["val_accuracy"], descriptor["val_loss"],
                      descriptor["train_config"], descriptor["rng_state"], descriptor.get("extra", {}))


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(encode_checkpoint(ckpt))


def load_checkpoint(path, graph: ModelGraph | None = None) -> Checkpoint:
    """Read a checkpoint; with ``graph`` given, verify and load it into that graph."""
    ckpt = decode_checkpoint(Path(path).read_bytes())
    if graph is not None:
        check_architecture(graph, ckpt.architecture)
        graph.load_state_dict(ckpt.state)
    return ckpt


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    best: Checkpoint
    last: Checkpoint
    history: list[dict]


def _loss_and_backward(graph: ModelGraph, x: np.ndarray, y: np.ndarray, kind: str) -> float:
    probs = graph.forward(x, training=True)
    if kind == CROSS_ENTROPY:
        loss = nn.cross_entropy_loss(probs, y)
        if np.isfinite(loss):
            graph.backward_logits(nn.cross_entropy_grad(probs, y))
    else:
        target = nn.one_hot(y, probs.shape[1])
        loss = nn.mse_loss(probs, target)
        if np.isfinite(loss):
            graph.backward(nn.mse_grad(probs, target))
    if not np.isfinite(loss):
        raise TrainingError(f"non-finite training loss {loss}")
    return loss


def _snapshot(graph, moments, cfg, epoch, step, val_acc, val_loss, shuffle_rng, extra) -> Checkpoint:
    return Checkpoint(
        architecture=graph.descriptor(), state=graph.state_dict(), moments=moments.copy(), epoch=epoch,
        step=step, val_accuracy=val_acc, val_loss=val_loss, train_config=asdict(cfg),
        rng_state={"shuffle": copy.deepcopy(shuffle_rng.bit_generator.state),
                   "dropout": [copy.deepcopy(l.rng.bit_generator.state) for l in graph.dropout_layers()]},
        extra=copy.deepcopy(extra),
    )


def _better(cfg: TrainConfig, acc, loss, best: Checkpoint | None) -> bool:
    if best is None:
        return True
    if cfg.selector == SELECT_ACCURACY:
        return acc > best.val_accuracy
    return loss < best.val_loss


def train_loop(graph: ModelGraph, data: EpochSet, plan: SplitPlan, cfg: TrainConfig,
               resume: Checkpoint | None = None, extra: dict | None = None,
               progress=None) -> TrainResult:
    """Mini-batch AdamW training with per-epoch validation.

    Keeps the checkpoint with the best validation score (ties go to the
    earlier epoch).  ``resume`` continues from a ``last`` checkpoint with the
    same optimiser moments and generator states.  ``progress`` is called with
    each history row.
    """
    train_idx = np.asarray(plan.train_idx, dtype=np.int64)
    val_idx = np.asarray(plan.val_idx, dtype=np.int64)
    if train_idx.size == 0:
        raise ConfigurationError("training split is empty")
    if val_idx.size == 0:
        raise ConfigurationError("validation split is empty")
    plan.check(data.n_trials)
    no_decay = () if cfg.decay_quantum else QUANTUM_PARAMS
    extra = extra or {}

    shuffle_rng = np.random.default_rng(cfg.seed)
    moments, step, start_epoch = AdamMoments(), 0, 1
    if resume is not None:
        check_architecture(graph, resume.architecture)
        graph.load_state_dict(resume.state)
        moments, step, start_epoch = resume.moments.copy(), resume.step, resume.epoch + 1
        shuffle_rng.bit_generator.state = resume.rng_state["shuffle"]
        for layer, st in zip(graph.dropout_layers(), resume.rng_state["dropout"]):
            layer.rng.bit_generator.state = st

    history, best = [], None
    params = graph.parameters()
    val_x = data.epochs[val_idx]
    val_y = data.labels[val_idx]
    for epoch in range(start_epoch, start_epoch + cfg.epochs):
        order = shuffle_rng.permutation(train_idx)
        total, correct_seen = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            x = np.asarray(data.epochs[batch], dtype=np.float64)
            loss = _loss_and_backward(graph, x, data.labels[batch], cfg.loss)
            step += 1
            adamw_step(params, graph.gradients(), moments, cfg, step, no_decay)
            total += loss * len(batch)
            correct_seen += len(batch)
        probs = predict_proba(graph, val_x)
        val_loss = nn.cross_entropy_loss(probs, val_y)
        val_acc = 100 * int(np.sum(probs.argmax(axis=1) == val_y)) / len(val_y)
        row = {"epoch": epoch, "train_loss": total / correct_seen, "val_loss": val_loss, "val_acc": val_acc}
        history.append(row)
        if progress is not None:
            progress(row)
        log.debug("epoch %d train_loss %.5f val_loss %.5f val_acc %.2f", epoch, row["train_loss"], val_loss, val_acc)
        if _better(cfg, val_acc, val_loss, best):
            best = _snapshot(graph, moments, cfg, epoch, step, val_acc, val_loss, shuffle_rng, extra)
    last = _snapshot(graph, moments, cfg, epoch, step, val_acc, val_loss, shuffle_rng, extra)
    return TrainResult(best, last, history)


def write_history(history: list[dict], path) -> None:
    lines = ["epoch,train_loss,val_loss,val_acc"]
    lines += [f"{r['epoch']},{r['train_loss']!r},{r['val_loss']!r},{r['val_acc']!r}" for r in history]
    Path(path).write_text("\n".join(lines) + "\n")
