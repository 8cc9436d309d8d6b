"""Deterministic training loop and checkpointing.

Each epoch keeps one representative per severity signature (so a batch
never contrasts two items with identical scores), samples one template
style per item, optionally shuffles its sentences, pairs it with a freshly
perturbed negative caption, and applies per-group Adam learning rates.
"""

from __future__ import annotations

import io
import json
import struct
import zlib
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import evaluation, nn
from .captions import (
    TEMPLATE_ORDER,
    TemplateKind,
    Vocabulary,
    build_vocabulary,
    render_caption,
    shuffle_sentences,
    tokenize,
)
from .model import DualEncoder, ModelConfig, negative_caption_loss, similarity_matrix, total_loss
from .scores import OaScoreRecord, perturb_negative, severity_signature
from .seeding import make_rng
from .synth import DatasetManifest, ManifestEntry, read_pgm

CHECKPOINT_MAGIC = b"OAVL0001"
CHECKPOINT_VERSION = 1
_DTYPE_F32 = 0
_DTYPE_U8 = 1


class TrainingError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 32
    lr_image: float = 1e-4
    lr_text: float = 1e-3
    lr_projection: float = 1e-3
    weight_decay: float = 1e-3
    neg_weight: float = 0.5
    shuffle_prob: float = 0.5
    include_zero_grades: bool = True
    seed: int = 0

    def validate(self) -> "TrainConfig":
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2 (in-batch negatives)")
        for name in ("lr_image", "lr_text", "lr_projection"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if self.neg_weight < 0:
            raise ValueError("neg_weight must be non-negative")
        if not 0.0 <= self.shuffle_prob <= 1.0:
            raise ValueError("shuffle_prob must be in [0, 1]")
        return self

    def to_json_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json_dict(cls, obj: dict) -> "TrainConfig":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(obj) - known
        if extra:
            raise ValueError(f"unknown config key {sorted(extra)[0]!r}")
        return cls(**obj).validate()


@dataclass
class PlanItem:
    record_id: str
    kind: TemplateKind
    shuffle: bool


EpochPlan = List[List[PlanItem]]


def epoch_plan(
    entries: Sequence[ManifestEntry],
    cfg: TrainConfig,
    epoch: int,
    rng: np.random.Generator,
) -> EpochPlan:
    """One epoch's batches: deduplicated by signature, shuffled, tail dropped.

    Groups the split by severity signature and keeps one uniformly chosen
    representative per group this epoch; each surviving item gets a uniform
    template kind and a sentence-shuffle flag with probability shuffle_prob.
    """
    if not entries:
        raise ValueError("empty train split")
    groups: Dict[tuple, List[ManifestEntry]] = {}
    for entry in entries:
        groups.setdefault(severity_signature(entry.record), []).append(entry)
    survivors = [
        members[int(rng.integers(0, len(members)))] for members in groups.values()
    ]
    order = rng.permutation(len(survivors))
    shuffled = [survivors[i] for i in order]

    plan: EpochPlan = []
    n_batches = len(shuffled) // cfg.batch_size
    for b in range(n_batches):
        batch_entries = shuffled[b * cfg.batch_size : (b + 1) * cfg.batch_size]
        batch = []
        for entry in batch_entries:
            kind = TEMPLATE_ORDER[int(rng.integers(0, len(TEMPLATE_ORDER)))]
            shuffle = bool(rng.random() < cfg.shuffle_prob)
            batch.append(PlanItem(record_id=entry.record.id, kind=kind, shuffle=shuffle))
        plan.append(batch)
    return plan


def _batch_tokens(
    records: Sequence[OaScoreRecord],
    items: Sequence[PlanItem],
    cfg: TrainConfig,
    vocab: Vocabulary,
    max_len: int,
    epoch: int,
) -> Tuple[np.ndarray, np.ndarray]:
    """Tokenized positive captions (optionally shuffled) and fresh negatives."""
    pos = np.empty((len(items), max_len), dtype=np.int64)
    neg = np.empty((len(items), max_len), dtype=np.int64)
    for i, (record, item) in enumerate(zip(records, items)):
        caption = render_caption(record, item.kind, cfg.include_zero_grades)
        if item.shuffle:
            caption = shuffle_sentences(
                caption, make_rng(cfg.seed, "shuffle", epoch, record.id)
            )
        pos[i] = tokenize(caption.text, vocab, max_len)
        neg_record = perturb_negative(record, make_rng(cfg.seed, "neg", epoch, record.id))
        neg_caption = render_caption(neg_record, item.kind, cfg.include_zero_grades)
        neg[i] = tokenize(neg_caption.text, vocab, max_len)
    return pos, neg


def train_step(
    model: DualEncoder,
    images: np.ndarray,
    pos_tokens: np.ndarray,
    neg_tokens: np.ndarray,
    cfg: TrainConfig,
) -> Tuple[float, float, float]:
    """One forward/backward/update; returns (total, infonce, negative) losses."""
    model.zero_grad()
    image_u = model.encode_image(images)
    text_u = model.encode_text(pos_tokens)
    text_neg_u = model.encode_text(neg_tokens)
    sim = similarity_matrix(model.project(image_u, "image"), model.project(text_u, "text"))
    total, nce, neg = total_loss(sim, model.temperature(), text_u, text_neg_u, cfg.neg_weight)
    values = (float(total.data), float(nce.data), float(neg.data))
    if not all(np.isfinite(v) for v in values):
        raise TrainingError(
            f"non-finite loss: total={values[0]}, infonce={values[1]}, negative={values[2]}"
        )
    total.backward()
    rates = {"image": cfg.lr_image, "text": cfg.lr_text, "projection": cfg.lr_projection}
    for group, names in model.param_groups().items():
        lr = rates[group]
        for name in names:
            decay = 0.0 if name == "log_temperature" else cfg.weight_decay
            nn.adam_step(model.param(name), lr=lr, weight_decay=decay)
    return values


@dataclass
class EpochStats:
    epoch: int
    mean_total: float
    mean_infonce: float
    mean_negative: float
    val_zero_shot_accuracy: Optional[float]


@dataclass
class TrainReport:
    epochs: List[EpochStats] = field(default_factory=list)
    initial_neg_cosine: float = 0.0
    final_neg_cosine: float = 0.0
    config: Optional[dict] = None

    def to_json_dict(self) -> dict:
        return {
            "epochs": [asdict(e) for e in self.epochs],
            "initial_neg_cosine": self.initial_neg_cosine,
            "final_neg_cosine": self.final_neg_cosine,
            "config": self.config,
        }


def _load_split_images(manifest: DatasetManifest, split: str) -> Dict[str, np.ndarray]:
    images = {}
    for entry in manifest.split(split):
        images[entry.record.id] = read_pgm(manifest.resolve_image(entry))
    return images


def matched_negative_cosine(
    model: DualEncoder,
    records: Sequence[OaScoreRecord],
    kinds: Sequence[TemplateKind],
    neg_records: Sequence[OaScoreRecord],
    vocab: Vocabulary,
    include_zero_grades: bool = True,
    batch_size: int = 64,
) -> float:
    """Mean cosine between matched positive/negative unprojected text embeddings."""
    values = []
    for start in range(0, len(records), batch_size):
        chunk = slice(start, start + batch_size)
        pos = np.stack(
            [
                tokenize(render_caption(r, k, include_zero_grades).text, vocab, model.cfg.max_len)
                for r, k in zip(records[chunk], kinds[chunk])
            ]
        )
        neg = np.stack(
            [
                tokenize(render_caption(r, k, include_zero_grades).text, vocab, model.cfg.max_len)
                for r, k in zip(neg_records[chunk], kinds[chunk])
            ]
        )
        cos = negative_caption_loss(model.encode_text(pos), model.encode_text(neg))
        values.append(float(cos.data) * len(pos))
    return sum(values) / len(records)


def _probe_set(
    manifest: DatasetManifest, cfg: TrainConfig, limit: int = 256
) -> Tuple[List[OaScoreRecord], List[TemplateKind], List[OaScoreRecord]]:
    """Fixed records/kinds/negatives used to measure the pos/neg cosine before and after."""
    entries = manifest.split("train")[:limit]
    rng = make_rng(cfg.seed, "probe")
    records = [e.record for e in entries]
    kinds = [TEMPLATE_ORDER[int(rng.integers(0, len(TEMPLATE_ORDER)))] for _ in records]
    negatives = [
        perturb_negative(r, make_rng(cfg.seed, "probe-neg", r.id)) for r in records
    ]
    return records, kinds, negatives


def fit(
    manifest: DatasetManifest,
    cfg: TrainConfig,
    model_cfg: Optional[ModelConfig] = None,
    log=None,
) -> Tuple[DualEncoder, TrainReport]:
    """Train a dual encoder on the manifest's train split.

    Deterministic for a fixed seed in single-thread mode. Validation
    zero-shot accuracy is recorded every epoch when a val split exists.
    """
    cfg.validate()
    train_entries = manifest.split("train")
    if not train_entries:
        raise ValueError("manifest has no train split")
    vocab = build_vocabulary()

    train_images = _load_split_images(manifest, "train")
    val_entries = manifest.split("val")
    val_images = _load_split_images(manifest, "val")

    if model_cfg is None:
        sample = next(iter(train_images.values()))
        model_cfg = ModelConfig(
            height=sample.shape[0], width=sample.shape[1], vocab_size=len(vocab)
        )
    model = DualEncoder(model_cfg, seed=cfg.seed)

    by_id = {e.record.id: e.record for e in train_entries}
    probe_records, probe_kinds, probe_negs = _probe_set(manifest, cfg)
    report = TrainReport(config=cfg.to_json_dict())
    report.initial_neg_cosine = matched_negative_cosine(
        model, probe_records, probe_kinds, probe_negs, vocab, cfg.include_zero_grades
    )

    for epoch in range(cfg.epochs):
        plan = epoch_plan(train_entries, cfg, epoch, make_rng(cfg.seed, "plan", epoch))
        sums = np.zeros(3)
        steps = 0
        for batch in plan:
            records = [by_id[item.record_id] for item in batch]
            images = np.stack([train_images[item.record_id] for item in batch])[:, None]
            pos, neg = _batch_tokens(records, batch, cfg, vocab, model_cfg.max_len, epoch)
            losses = train_step(model, images, pos, neg, cfg)
            sums += np.asarray(losses)
            steps += 1
        means = sums / max(steps, 1)
        val_acc = None
        if val_entries:
            val_acc = evaluation.zero_shot_eval(model, val_entries, val_images, vocab).accuracy
        report.epochs.append(
            EpochStats(
                epoch=epoch,
                mean_total=float(means[0]),
                mean_infonce=float(means[1]),
                mean_negative=float(means[2]),
                val_zero_shot_accuracy=val_acc,
            )
        )
        if log is not None:
            log(
                f"epoch {epoch}: total={means[0]:.4f} infonce={means[1]:.4f} "
                f"negative={means[2]:.4f} val_acc={val_acc}"
            )

    report.final_neg_cosine = matched_negative_cosine(
        model, probe_records, probe_kinds, probe_negs, vocab, cfg.include_zero_grades
    )
    return model, report


# --- checkpoint serialization ------------------------------------------------


@dataclass
class Checkpoint:
    model: DualEncoder
    train_config: TrainConfig
    epoch: int


def _serialize_tensor(out: io.BytesIO, name: str, payload: bytes, dtype: int, dims: Sequence[int]) -> bytes:
    encoded = name.encode("utf-8")
    out.write(struct.pack("<H", len(encoded)))
    out.write(encoded)
    out.write(struct.pack("<BB", dtype, len(dims)))
    for dim in dims:
        out.write(struct.pack("<I", dim))
    out.write(payload)
    return payload


def save_checkpoint(path: str, model: DualEncoder, cfg: TrainConfig, epoch: int) -> None:
    """Write the binary checkpoint: magic, version, tensors, payload CRC32."""
    tensors: List[Tuple[str, bytes, int, Tuple[int, ...]]] = []
    for name, p in model.parameters().items():
        tensors.append((name, p.data.astype("<f4").tobytes(), _DTYPE_F32, p.data.shape))
    for name, p in model.parameters().items():
        tensors.append((f"optim.{name}.m", p.m.astype("<f4").tobytes(), _DTYPE_F32, p.m.shape))
        tensors.append((f"optim.{name}.v", p.v.astype("<f4").tobytes(), _DTYPE_F32, p.v.shape))
        tensors.append(
            (f"optim.{name}.t", np.asarray([p.t], dtype="<f4").tobytes(), _DTYPE_F32, (1,))
        )
    meta = {
        "epoch": epoch,
        "model": model.cfg.to_json_dict(),
        "train": cfg.to_json_dict(),
    }
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    tensors.append(("meta.config_json", meta_bytes, _DTYPE_U8, (len(meta_bytes),)))

    out = io.BytesIO()
    out.write(CHECKPOINT_MAGIC)
    out.write(struct.pack("<I", CHECKPOINT_VERSION))
    out.write(struct.pack("<I", len(tensors)))
    crc = 0
    for name, payload, dtype, dims in tensors:
        _serialize_tensor(out, name, payload, dtype, dims)
        crc = zlib.crc32(payload, crc)
    out.write(struct.pack("<I", crc & 0xFFFFFFFF))
    with open(path, "wb") as fh:
        fh.write(out.getvalue())


def _read_exact(fh, count: int) -> bytes:
    data = fh.read(count)
    if len(data) != count:
        raise CheckpointError("truncated checkpoint")
    return data


def _read_checkpoint_tensors(path: str) -> Tuple[Dict[str, Tuple[int, Tuple[int, ...], bytes]], List[str]]:
    """Parse and CRC-verify the file; returns tensors by name plus file order."""
    with open(path, "rb") as fh:
        magic = _read_exact(fh, len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"unsupported checkpoint magic {magic!r}")
        (version,) = struct.unpack("<I", _read_exact(fh, 4))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        (count,) = struct.unpack("<I", _read_exact(fh, 4))
        tensors: Dict[str, Tuple[int, Tuple[int, ...], bytes]] = {}
        order: List[str] = []
        crc = 0
        for _ in range(count):
            (name_len,) = struct.unpack("<H", _read_exact(fh, 2))
            name = _read_exact(fh, name_len).decode("utf-8")
            dtype, rank = struct.unpack("<BB", _read_exact(fh, 2))
            dims = tuple(
                struct.unpack("<I", _read_exact(fh, 4))[0] for _ in range(rank)
            )
            size = int(np.prod(dims, dtype=np.int64)) if dims else 1
            if dtype == _DTYPE_F32:
                payload = _read_exact(fh, size * 4)
            elif dtype == _DTYPE_U8:
                payload = _read_exact(fh, size)
            else:
                raise CheckpointError(f"unknown tensor dtype {dtype}")
            crc = zlib.crc32(payload, crc)
            tensors[name] = (dtype, dims, payload)
            order.append(name)
        (stored_crc,) = struct.unpack("<I", _read_exact(fh, 4))
        if stored_crc != crc & 0xFFFFFFFF:
            raise CheckpointError("checksum mismatch: checkpoint is corrupted")
    return tensors, order


def load_checkpoint(path: str) -> Checkpoint:
    """Read and verify a checkpoint; rejects bad magic, version, or checksum."""
    tensors, _order = _read_checkpoint_tensors(path)
    if "meta.config_json" not in tensors:
        raise CheckpointError("checkpoint is missing its config")
    meta = json.loads(tensors["meta.config_json"][2].decode("utf-8"))
    model_cfg = ModelConfig.from_json_dict(meta["model"])
    train_cfg = TrainConfig.from_json_dict(meta["train"])
    model = DualEncoder(model_cfg, seed=train_cfg.seed)
    for name, p in model.parameters().items():
        for key, target in ((name, "param"), (f"optim.{name}.m", "m"), (f"optim.{name}.v", "v")):
            if key not in tensors:
                raise CheckpointError(f"checkpoint is missing tensor {key!r}")
            dtype, dims, payload = tensors[key]
            if dtype != _DTYPE_F32 or dims != p.data.shape:
                raise CheckpointError(f"tensor {key!r} has unexpected dtype/shape")
            values = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
            if target == "param":
                p.value.data = values.copy()
            elif target == "m":
                p.m = values.copy()
            else:
                p.v = values.copy()
        t_key = f"optim.{name}.t"
        if t_key not in tensors:
            raise CheckpointError(f"checkpoint is missing tensor {t_key!r}")
        p.t = int(np.frombuffer(tensors[t_key][2], dtype="<f4")[0])
    return Checkpoint(model=model, train_config=train_cfg, epoch=int(meta["epoch"]))


def checkpoint_tensor_listing(path: str) -> List[Tuple[str, Tuple[int, ...], int]]:
    """(name, dims, payload CRC32) per tensor, in file order; verifies the file."""
    tensors, order = _read_checkpoint_tensors(path)
    return [
        (name, tensors[name][1], zlib.crc32(tensors[name][2]) & 0xFFFFFFFF)
        for name in order
    ]
