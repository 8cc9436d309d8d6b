"""Dual encoder and losses.

A small image CNN and a token-convolution text encoder produce unprojected
embeddings; per-modality linear heads plus l2 normalization produce the
projected embeddings whose cosine similarity matrix feeds a symmetric
InfoNCE loss. A second loss pushes the cosine between each caption's
unprojected embedding and its contrasting negative's embedding down.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass
from typing import Dict, List, Tuple

import numpy as np

from . import nn
from .nn import Parameter, Tensor
from .seeding import make_rng

TAU_MIN = 1e-3
TAU_MAX = 10.0


@dataclass
class ModelConfig:
    height: int = 64
    width: int = 64
    channels: Tuple[int, int, int] = (16, 32, 64)
    embed_dim: int = 64
    proj_dim: int = 32
    vocab_size: int = 0
    max_len: int = 96
    pad_index: int = 0
    # similarity divisor: logits = S / tau; 0.07 starts training sharp and
    # inside the clamp range so the gradient can move it
    temperature_init: float = 0.07

    def validate(self) -> "ModelConfig":
        if self.vocab_size <= 2:
            raise ValueError("vocab_size must cover the caption grammar")
        if self.max_len < 1:
            raise ValueError("max_len must be positive")
        if len(self.channels) != 3:
            raise ValueError("the image encoder has exactly 3 conv stages")
        return self

    def to_json_dict(self) -> dict:
        return {
            "height": self.height,
            "width": self.width,
            "channels": list(self.channels),
            "embed_dim": self.embed_dim,
            "proj_dim": self.proj_dim,
            "vocab_size": self.vocab_size,
            "max_len": self.max_len,
            "pad_index": self.pad_index,
            "temperature_init": self.temperature_init,
        }

    @classmethod
    def from_json_dict(cls, obj: dict) -> "ModelConfig":
        obj = dict(obj)
        obj["channels"] = tuple(obj["channels"])
        return cls(**obj).validate()


class DualEncoder:
    """Image CNN + text token-conv encoder + projection heads + temperature.

    Parameters are enumerable by name in a fixed order (the checkpoint
    contract). Image encoder: three stride-2 3x3 conv+relu stages and a
    global mean pool. Text encoder: token + position embeddings, two
    kernel-3 convolutions over the token axis, mean pool over non-pad
    positions.
    """

    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=np.float32):
        cfg.validate()
        self.cfg = cfg
        self.dtype = dtype
        self._params: "OrderedDict[str, Parameter]" = OrderedDict()

        c1, c2, c3 = cfg.channels
        self._add_conv("image.conv1", c1, 1, 3, 3, seed)
        self._add_conv("image.conv2", c2, c1, 3, 3, seed)
        self._add_conv("image.conv3", c3, c2, 3, 3, seed)

        d = cfg.embed_dim
        self._add_param(
            "text.token_embedding",
            0.02 * make_rng(seed, "init", "text.token_embedding").standard_normal((cfg.vocab_size, d)),
        )
        self._add_param(
            "text.pos_embedding",
            0.02 * make_rng(seed, "init", "text.pos_embedding").standard_normal((cfg.max_len, d)),
        )
        self._add_conv("text.conv1", d, d, 1, 3, seed)
        self._add_conv("text.conv2", d, d, 1, 3, seed)

        self._add_linear("proj.image", c3, cfg.proj_dim, seed)
        self._add_linear("proj.text", d, cfg.proj_dim, seed)
        self._add_param("log_temperature", np.asarray(math.log(cfg.temperature_init)))

    # -- parameter bookkeeping ------------------------------------------------

    def _add_param(self, name: str, data: np.ndarray) -> None:
        self._params[name] = Parameter(np.asarray(data, dtype=self.dtype))

    def _add_conv(self, name: str, c_out: int, c_in: int, kh: int, kw: int, seed: int) -> None:
        fan_in = c_in * kh * kw
        std = math.sqrt(2.0 / fan_in)
        rng = make_rng(seed, "init", name)
        self._add_param(name + ".weight", std * rng.standard_normal((c_out, c_in, kh, kw)))
        self._add_param(name + ".bias", np.zeros(c_out))

    def _add_linear(self, name: str, d_in: int, d_out: int, seed: int) -> None:
        std = math.sqrt(1.0 / d_in)
        rng = make_rng(seed, "init", name)
        self._add_param(name + ".weight", std * rng.standard_normal((d_in, d_out)))
        self._add_param(name + ".bias", np.zeros(d_out))  # zero bias: projection is scale-free at init

    def parameters(self) -> "OrderedDict[str, Parameter]":
        return self._params

    def param(self, name: str) -> Parameter:
        return self._params[name]

    def param_groups(self) -> Dict[str, List[str]]:
        """Names per learning-rate group: image encoder, text encoder, projection."""
        groups: Dict[str, List[str]] = {"image": [], "text": [], "projection": []}
        for name in self._params:
            if name.startswith("image."):
                groups["image"].append(name)
            elif name.startswith("text."):
                groups["text"].append(name)
            else:
                groups["projection"].append(name)
        return groups

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.zero_grad()

    # -- forward ---------------------------------------------------------------

    def _conv_block(self, x: Tensor, name: str, stride: int, pad) -> Tensor:
        w = self._params[name + ".weight"].value
        b = self._params[name + ".bias"].value
        y = nn.conv2d(x, w, stride=stride, pad=pad)
        y = nn.add(y, nn.reshape(b, (1, b.shape[0], 1, 1)))
        return nn.relu(y)

    def image_features(self, images: np.ndarray) -> Tuple[Tensor, Tensor]:
        """Final conv-stage activations [N, C3, h, w] and pooled embedding [N, C3]."""
        arr = np.asarray(images, dtype=self.dtype)
        if arr.ndim != 4 or arr.shape[1] != 1:
            raise nn.ShapeError("expected images of shape [N, 1, H, W]")
        if arr.shape[2] != self.cfg.height or arr.shape[3] != self.cfg.width:
            raise nn.ShapeError(
                f"image size {arr.shape[2]}x{arr.shape[3]} does not match "
                f"configured {self.cfg.height}x{self.cfg.width}"
            )
        x = Tensor(arr)
        x = self._conv_block(x, "image.conv1", stride=2, pad=1)
        x = self._conv_block(x, "image.conv2", stride=2, pad=1)
        acts = self._conv_block(x, "image.conv3", stride=2, pad=1)
        pooled = nn.mean_pool(acts)
        return acts, pooled

    def encode_image(self, images: np.ndarray) -> Tensor:
        """Unprojected image embeddings [N, C3]."""
        _acts, pooled = self.image_features(images)
        return pooled

    def encode_text(self, tokens: np.ndarray) -> Tensor:
        """Unprojected text embeddings [N, D]; mean pool skips <pad> positions."""
        idx = np.asarray(tokens)
        if idx.ndim != 2 or idx.shape[1] != self.cfg.max_len:
            raise nn.ShapeError(f"expected tokens of shape [N, {self.cfg.max_len}]")
        emb = nn.embedding(self._params["text.token_embedding"].value, idx)
        pos = nn.reshape(
            self._params["text.pos_embedding"].value, (1, self.cfg.max_len, self.cfg.embed_dim)
        )
        x = nn.add(emb, pos)  # [N, L, D]
        x = nn.transpose(x, (0, 2, 1))  # [N, D, L]
        x = nn.reshape(x, (idx.shape[0], self.cfg.embed_dim, 1, self.cfg.max_len))
        x = self._conv_block(x, "text.conv1", stride=1, pad=(0, 1))
        x = self._conv_block(x, "text.conv2", stride=1, pad=(0, 1))
        x = nn.reshape(x, (idx.shape[0], self.cfg.embed_dim, self.cfg.max_len))
        x = nn.transpose(x, (0, 2, 1))  # [N, L, D]

        mask = (idx != self.cfg.pad_index).astype(self.dtype)
        counts = np.maximum(mask.sum(axis=1, keepdims=True), 1.0).astype(self.dtype)
        masked = nn.mul(x, Tensor(mask[:, :, None]))
        total = nn.tsum(masked, axis=1)
        return nn.mul(total, Tensor(1.0 / counts))

    def project(self, embeddings: Tensor, modality: str) -> Tensor:
        """Linear head + l2 normalization; rows come out unit-norm."""
        if modality not in ("image", "text"):
            raise ValueError("modality must be 'image' or 'text'")
        w = self._params[f"proj.{modality}.weight"].value
        b = self._params[f"proj.{modality}.bias"].value
        return nn.l2_normalize(nn.linear(embeddings, w, b))

    def temperature(self) -> Tensor:
        """tau = clamp(exp(log_temperature), TAU_MIN, TAU_MAX)."""
        return nn.clamp(nn.exp(self._params["log_temperature"].value), TAU_MIN, TAU_MAX)


def similarity_matrix(image_proj: Tensor, text_proj: Tensor) -> Tensor:
    """S[i, j] = image_proj[i] . text_proj[j] for unit-norm rows."""
    return nn.matmul(image_proj, nn.transpose(text_proj))


def info_nce_loss(similarity: Tensor, tau) -> Tensor:
    """Symmetric cross entropy over S/tau with diagonal targets."""
    n = similarity.shape[0]
    if similarity.ndim != 2 or similarity.shape[1] != n:
        raise nn.ShapeError("similarity matrix must be square")
    if n < 2:
        raise ValueError("InfoNCE needs at least 2 pairs for in-batch negatives")
    targets = np.arange(n)
    logits = nn.div(similarity, tau)
    image_to_text = nn.softmax_cross_entropy(logits, targets)
    text_to_image = nn.softmax_cross_entropy(nn.transpose(logits), targets)
    return nn.mul(nn.add(image_to_text, text_to_image), 0.5)


def negative_caption_loss(text_pos: Tensor, text_neg: Tensor) -> Tensor:
    """Mean cosine between matched rows of unprojected pos/neg text embeddings."""
    if text_pos.shape != text_neg.shape:
        raise nn.ShapeError("positive and negative embeddings must align row-wise")
    a = nn.l2_normalize(text_pos)
    b = nn.l2_normalize(text_neg)
    return nn.tmean(nn.tsum(nn.mul(a, b), axis=1))


def total_loss(
    similarity: Tensor,
    tau,
    text_pos: Tensor,
    text_neg: Tensor,
    neg_weight: float = 0.5,
) -> Tuple[Tensor, Tensor, Tensor]:
    """InfoNCE plus neg_weight times the negative-caption cosine.

    Returns (total, infonce, negative) graph nodes.
    """
    if neg_weight < 0:
        raise ValueError("neg_weight must be non-negative")
    nce = info_nce_loss(similarity, tau)
    neg = negative_caption_loss(text_pos, text_neg)
    return nn.add(nce, nn.mul(neg, neg_weight)), nce, neg
