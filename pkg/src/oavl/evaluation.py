"""Evaluation: zero-shot grading, caption retrieval with BLEU-4, saliency.

All routines treat the model as frozen. Zero-shot builds a small prompt
ensemble per KL class and predicts by cosine against the projected image
embedding; retrieval ranks a caption pool the same way; Grad-CAM weights
the final conv activations by the pooled gradient of the image-prompt
cosine.
"""

from __future__ import annotations

import json
import math
import os
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import nn
from .captions import TemplateKind, Vocabulary, render_caption, split_text, tokenize
from .model import DualEncoder
from .scores import GRADE_MAX, grade_word
from .seeding import make_rng
from .synth import GroundTruthRegion, ManifestEntry, write_pgm

N_CLASSES = GRADE_MAX + 1


@dataclass
class SaliencyMap:
    values: np.ndarray  # [height, width] in [0, 1]
    prompt: str
    image_id: str


@dataclass
class ZeroShotResult:
    accuracy: float
    confusion: np.ndarray  # [true KL, predicted KL]
    per_image: List[dict] = field(default_factory=list)


@dataclass
class RetrievalResult:
    mean_top1_bleu4: float
    random_baseline_bleu4: float
    hit_at: Dict[int, float] = field(default_factory=dict)
    per_image: List[dict] = field(default_factory=list)


@dataclass
class EvalReport:
    zero_shot: Optional[ZeroShotResult] = None
    retrieval: Optional[RetrievalResult] = None
    saliency: List[Tuple[SaliencyMap, np.ndarray]] = field(default_factory=list)

    def to_json_dict(self) -> dict:
        out: dict = {}
        if self.zero_shot is not None:
            total = int(self.zero_shot.confusion.sum())
            out["zero_shot"] = {
                "accuracy": self.zero_shot.accuracy,
                "total": total,
                "per_class_counts": self.zero_shot.confusion.sum(axis=1).astype(int).tolist(),
                "per_image": self.zero_shot.per_image,
            }
        if self.retrieval is not None:
            out["retrieval"] = {
                "mean_top1_bleu4": self.retrieval.mean_top1_bleu4,
                "random_baseline_bleu4": self.retrieval.random_baseline_bleu4,
                "hit_at": {str(k): v for k, v in self.retrieval.hit_at.items()},
                "per_image": self.retrieval.per_image,
            }
        return out


# --- zero-shot classification -----------------------------------------------


def class_prompts(kl: int, side: str) -> List[str]:
    """The prompt ensemble naming one KL class."""
    word = grade_word(kl)
    return [
        f"{word} osteoarthritis.",
        f"Image shows {word} osteoarthritis in the {side} knee.",
    ]


def class_prompt_vectors(model: DualEncoder, vocab: Vocabulary, side: str) -> np.ndarray:
    """[5, proj_dim] unit vectors: per class, averaged projected prompt embeddings."""
    vectors = []
    for kl in range(N_CLASSES):
        tokens = np.stack(
            [tokenize(p, vocab, model.cfg.max_len) for p in class_prompts(kl, side)]
        )
        projected = model.project(model.encode_text(tokens), "text").data
        mean = projected.mean(axis=0)
        vectors.append(mean / (np.linalg.norm(mean) + 1e-8))
    return np.stack(vectors)


def classify_image_embeddings(image_proj: np.ndarray, class_vectors: np.ndarray) -> np.ndarray:
    """Argmax cosine per row; ties resolve to the lower class index."""
    sims = image_proj @ class_vectors.T
    return np.argmax(sims, axis=1)


def zero_shot_classify(
    model: DualEncoder, image: np.ndarray, side: str, vocab: Vocabulary
) -> int:
    """Predicted KL class 0..4 for a single [H, W] image."""
    proj = model.project(model.encode_image(image[None, None]), "image").data
    return int(classify_image_embeddings(proj, class_prompt_vectors(model, vocab, side))[0])


def zero_shot_eval(
    model: DualEncoder,
    entries: Sequence[ManifestEntry],
    images: Dict[str, np.ndarray],
    vocab: Vocabulary,
    batch_size: int = 64,
) -> ZeroShotResult:
    """Confusion matrix and accuracy over a split."""
    confusion = np.zeros((N_CLASSES, N_CLASSES), dtype=np.int64)
    per_image = []
    class_vectors = {side: class_prompt_vectors(model, vocab, side) for side in ("left", "right")}
    for start in range(0, len(entries), batch_size):
        chunk = list(entries[start : start + batch_size])
        batch = np.stack([images[e.record.id] for e in chunk])[:, None]
        proj = model.project(model.encode_image(batch), "image").data
        for row, entry in enumerate(chunk):
            pred = int(
                classify_image_embeddings(proj[row : row + 1], class_vectors[entry.record.side])[0]
            )
            confusion[entry.record.kl, pred] += 1
            per_image.append({"id": entry.record.id, "kl": entry.record.kl, "predicted": pred})
    total = confusion.sum()
    accuracy = float(np.trace(confusion) / total) if total else 0.0
    return ZeroShotResult(accuracy=accuracy, confusion=confusion, per_image=per_image)


# --- retrieval ----------------------------------------------------------------


def retrieve_topk(
    image_proj: np.ndarray, pool_proj: np.ndarray, k: int
) -> np.ndarray:
    """Indices of the k most similar pool captions, stable on ties."""
    if pool_proj.shape[0] == 0:
        raise ValueError("empty caption pool")
    if k > pool_proj.shape[0]:
        raise ValueError("k exceeds pool size")
    sims = pool_proj @ image_proj
    return np.argsort(-sims, kind="stable")[:k]


def bleu4(candidate: Sequence[str], reference: Sequence[str]) -> float:
    """BLEU-4 with clipped modified precisions, no smoothing.

    Geometric mean of p1..p4 times the brevity penalty; any pn == 0 gives 0.
    """
    if not candidate or not reference:
        raise ValueError("empty candidate or reference")
    log_sum = 0.0
    for n in range(1, 5):
        cand_counts = Counter(tuple(candidate[i : i + n]) for i in range(len(candidate) - n + 1))
        ref_counts = Counter(tuple(reference[i : i + n]) for i in range(len(reference) - n + 1))
        total = sum(cand_counts.values())
        if total == 0:
            return 0.0
        clipped = sum(min(count, ref_counts[g]) for g, count in cand_counts.items())
        if clipped == 0:
            return 0.0
        log_sum += math.log(clipped / total)
    c, r = len(candidate), len(reference)
    bp = 1.0 if c > r else math.exp(1.0 - r / c)
    return bp * math.exp(log_sum / 4.0)


def corpus_bleu4(pairs: Sequence[Tuple[Sequence[str], Sequence[str]]]) -> float:
    """Corpus BLEU-4: clipped counts and lengths aggregate before combining."""
    if not pairs:
        raise ValueError("empty corpus")
    clipped_totals = [0] * 4
    count_totals = [0] * 4
    cand_len = 0
    ref_len = 0
    for candidate, reference in pairs:
        if not candidate or not reference:
            raise ValueError("empty candidate or reference")
        cand_len += len(candidate)
        ref_len += len(reference)
        for n in range(1, 5):
            cand_counts = Counter(
                tuple(candidate[i : i + n]) for i in range(len(candidate) - n + 1)
            )
            ref_counts = Counter(
                tuple(reference[i : i + n]) for i in range(len(reference) - n + 1)
            )
            count_totals[n - 1] += sum(cand_counts.values())
            clipped_totals[n - 1] += sum(
                min(count, ref_counts[g]) for g, count in cand_counts.items()
            )
    log_sum = 0.0
    for clipped, total in zip(clipped_totals, count_totals):
        if clipped == 0 or total == 0:
            return 0.0
        log_sum += math.log(clipped / total)
    bp = 1.0 if cand_len > ref_len else math.exp(1.0 - ref_len / cand_len)
    return bp * math.exp(log_sum / 4.0)


def retrieval_eval(
    model: DualEncoder,
    entries: Sequence[ManifestEntry],
    images: Dict[str, np.ndarray],
    vocab: Vocabulary,
    k: int = 10,
    baseline_draws: int = 1000,
    seed: int = 0,
    include_zero_grades: bool = True,
    batch_size: int = 64,
) -> RetrievalResult:
    """Image->caption retrieval over the split's location-template captions.

    The pool holds one caption per entry; top-1 quality is BLEU-4 against
    the query's own caption, compared to a seeded uniform-draw baseline.
    """
    pool_texts = [
        render_caption(e.record, TemplateKind.LOCATION, include_zero_grades).text
        for e in entries
    ]
    pool_words = [split_text(t) for t in pool_texts]
    pool_tokens = np.stack([tokenize(t, vocab, model.cfg.max_len) for t in pool_texts])
    pool_proj = np.concatenate(
        [
            model.project(model.encode_text(pool_tokens[s : s + batch_size]), "text").data
            for s in range(0, len(entries), batch_size)
        ]
    )
    image_proj = np.concatenate(
        [
            model.project(
                model.encode_image(
                    np.stack([images[e.record.id] for e in entries[s : s + batch_size]])[:, None]
                ),
                "image",
            ).data
            for s in range(0, len(entries), batch_size)
        ]
    )

    k = min(k, len(entries))
    hits = {kk: 0 for kk in (1, 5, 10) if kk <= k}
    top1_scores = []
    per_image = []
    for i, entry in enumerate(entries):
        ranked = retrieve_topk(image_proj[i], pool_proj, k)
        top1 = int(ranked[0])
        score = bleu4(pool_words[top1], pool_words[i])
        top1_scores.append(score)
        for kk in hits:
            if i in ranked[:kk]:
                hits[kk] += 1
        per_image.append(
            {"id": entry.record.id, "top1_id": entries[top1].record.id, "top1_bleu4": score}
        )

    rng = make_rng(seed, "retrieval-baseline")
    baseline = []
    for _ in range(baseline_draws):
        i = int(rng.integers(0, len(entries)))
        j = int(rng.integers(0, len(entries)))
        baseline.append(bleu4(pool_words[j], pool_words[i]))

    return RetrievalResult(
        mean_top1_bleu4=float(np.mean(top1_scores)),
        random_baseline_bleu4=float(np.mean(baseline)),
        hit_at={kk: hits[kk] / len(entries) for kk in hits},
        per_image=per_image,
    )


# --- Grad-CAM ------------------------------------------------------------------


def _bilinear_resize(values: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear upsample with half-pixel centers."""
    src_h, src_w = values.shape
    ys = (np.arange(height) + 0.5) * (src_h / height) - 0.5
    xs = (np.arange(width) + 0.5) * (src_w / width) - 0.5
    y0 = np.clip(np.floor(ys), 0, src_h - 1).astype(int)
    x0 = np.clip(np.floor(xs), 0, src_w - 1).astype(int)
    y1 = np.clip(y0 + 1, 0, src_h - 1)
    x1 = np.clip(x0 + 1, 0, src_w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)[:, None]
    wx = np.clip(xs - x0, 0.0, 1.0)[None, :]
    top = values[np.ix_(y0, x0)] * (1 - wx) + values[np.ix_(y0, x1)] * wx
    bottom = values[np.ix_(y1, x0)] * (1 - wx) + values[np.ix_(y1, x1)] * wx
    return top * (1 - wy) + bottom * wy


def grad_cam(
    model: DualEncoder,
    image: np.ndarray,
    prompt: str,
    vocab: Vocabulary,
    image_id: str = "",
) -> SaliencyMap:
    """Saliency for the cosine between the image and a text prompt.

    Channel weights are the spatial mean of the target's gradient on the
    final conv activations; the relu-ed weighted sum is upsampled to the
    input size and normalized to [0, 1] (an all-zero map stays zero).
    """
    words = split_text(prompt)
    unknown = [w for w in words if vocab.index(w) == vocab.unk_index]
    if unknown:
        raise ValueError(f"prompt tokenization failure: unknown token {unknown[0]!r}")
    tokens = tokenize(prompt, vocab, model.cfg.max_len)[None]
    prompt_vec = model.project(model.encode_text(tokens), "text").data[0]

    acts, pooled = model.image_features(image[None, None])
    image_proj = model.project(pooled, "image")
    target = nn.tsum(nn.mul(image_proj, nn.Tensor(prompt_vec[None, :].astype(model.dtype))))
    model.zero_grad()
    target.backward()

    activations = acts.data[0]
    gradients = acts.grad[0]
    weights = gradients.mean(axis=(1, 2))
    raw = np.maximum((weights[:, None, None] * activations).sum(axis=0), 0.0)
    resized = _bilinear_resize(raw, model.cfg.height, model.cfg.width)
    resized = np.maximum(resized, 0.0)
    peak = resized.max()
    if peak > 0:
        resized = resized / peak
    return SaliencyMap(values=resized.astype(np.float64), prompt=prompt, image_id=image_id)


def localization_score(saliency: SaliencyMap, region: GroundTruthRegion) -> float:
    """Saliency mass fraction inside the region over the region's area fraction.

    1.0 means no better than uniform; an identically zero map scores 1.0.
    """
    mask = region.mask
    if not mask.any():
        raise ValueError("empty ground-truth mask")
    total = float(saliency.values.sum())
    if total == 0.0:
        return 1.0
    inside = float(saliency.values[mask].sum())
    area_fraction = float(mask.mean())
    return (inside / total) / area_fraction


# --- report export --------------------------------------------------------------


def export_report(report: EvalReport, out_dir: str, images: Optional[Dict[str, np.ndarray]] = None) -> None:
    """Write report.json (sorted keys), confusion.csv, and saliency overlays."""
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "report.json"), "w", encoding="utf-8") as fh:
        json.dump(report.to_json_dict(), fh, sort_keys=True, indent=2)
        fh.write("\n")
    if report.zero_shot is not None:
        with open(os.path.join(out_dir, "confusion.csv"), "w", encoding="utf-8") as fh:
            fh.write("true\\pred," + ",".join(str(k) for k in range(N_CLASSES)) + "\n")
            for true_k in range(N_CLASSES):
                row = ",".join(str(int(v)) for v in report.zero_shot.confusion[true_k])
                fh.write(f"{true_k},{row}\n")
    if report.saliency:
        saliency_dir = os.path.join(out_dir, "saliency")
        os.makedirs(saliency_dir, exist_ok=True)
        for saliency, image in report.saliency:
            blended = 0.5 * image + 0.5 * saliency.values
            write_pgm(os.path.join(saliency_dir, f"{saliency.image_id}.pgm"), blended)
