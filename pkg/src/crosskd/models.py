"""Toy transformer teacher and truncated inverted-residual CNN student.

Both models consume channels-last images ``B x H x W x ch``.  The teacher cuts
the image into a ``g x g`` grid of patches; the student is truncated where its
feature map has spatial side ``g`` too, so teacher tokens and student
positions pair up one-to-one in raster order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import AlignmentError, ConfigError, DimensionError
from .layers import Conv2d, LayerNorm, Linear, Module
from .tensor import Parameter, Tensor, as_tensor, concat, dropout


@dataclass
class TeacherConfig:
    image_side: int = 32
    channels: int = 1
    patch_size: int = 8
    embed_dim: int = 32
    num_blocks: int = 2
    num_heads: int = 2
    mlp_ratio: int = 4
    qkv_block: int | None = None  # None resolves to the last block
    token_block: int = 0

    @property
    def grid(self) -> int:
        return self.image_side // self.patch_size

    def validate(self) -> None:
        if self.image_side % self.patch_size:
            raise DimensionError(
                f"image side {self.image_side} is not divisible by patch size {self.patch_size}"
            )
        if self.embed_dim % self.num_heads:
            raise ConfigError(f"embed_dim {self.embed_dim} is not divisible by num_heads {self.num_heads}")
        for name, idx in (("qkv_block", self.resolved_qkv_block), ("token_block", self.token_block)):
            if not 0 <= idx < self.num_blocks:
                raise ConfigError(f"teacher {name}={idx} out of range for {self.num_blocks} blocks")

    @property
    def resolved_qkv_block(self) -> int:
        return self.num_blocks - 1 if self.qkv_block is None else self.qkv_block


@dataclass
class StudentConfig:
    image_side: int = 32
    channels: int = 1
    stem_channels: int = 8
    stem_stride: int = 2
    # (expansion, out_channels, stride) per inverted-residual block
    blocks: list = field(
        default_factory=lambda: [[1, 8, 1], [4, 16, 2], [4, 24, 2], [4, 32, 2], [4, 48, 1]]
    )
    truncation_index: int = 3
    head_hidden: list = field(default_factory=lambda: [32])
    dropout: float = 0.3

    def validate(self) -> None:
        if not 1 <= self.truncation_index <= len(self.blocks):
            raise ConfigError(
                f"truncation_index {self.truncation_index} outside 1..{len(self.blocks)}"
            )
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"student dropout {self.dropout} outside [0, 1)")


@dataclass
class TeacherOutputs:
    logits: Tensor  # B x C
    attn: Tensor  # B x N x d, attention-weighted values of the QKV block
    values: Tensor  # B x N x d
    tokens: Tensor  # B x N x d, output of the token block
    queries: Tensor  # B x N x d, needed by the partial cross-attention mask
    keys: Tensor  # B x N x d
    attn_weights: np.ndarray | None = None  # B x heads x (N+1) x (N+1)

    def detached(self) -> TeacherOutputs:
        return TeacherOutputs(
            self.logits.detach(),
            self.attn.detach(),
            self.values.detach(),
            self.tokens.detach(),
            self.queries.detach(),
            self.keys.detach(),
            self.attn_weights,
        )


@dataclass
class StudentOutputs:
    logits: Tensor  # B x C
    features: Tensor  # B x C' x g x g


def patchify(images, patch_size: int) -> Tensor:
    """Cut ``B x H x W x ch`` images into raster-ordered patch tokens.

    Token ``t`` covers grid cell ``(t // g, t % g)``; inside a token, pixels
    are row-major with channels innermost.
    """
    images = as_tensor(images)
    if images.ndim != 4:
        raise DimensionError(f"patchify expects B x H x W x ch, got {list(images.shape)}")
    b, h, w, ch = images.shape
    if h != w:
        raise DimensionError(f"patchify needs square images, got {h} x {w}")
    if h % patch_size:
        raise DimensionError(f"image side {h} is not divisible by patch size {patch_size}")
    g = h // patch_size
    x = images.reshape(b, g, patch_size, g, patch_size, ch).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, g * g, patch_size * patch_size * ch)


def unpatchify(tokens, patch_size: int, channels: int) -> Tensor:
    tokens = as_tensor(tokens)
    b, n, _ = tokens.shape
    g = int(round(np.sqrt(n)))
    if g * g != n:
        raise DimensionError(f"{n} tokens do not form a square grid")
    x = tokens.reshape(b, g, g, patch_size, patch_size, channels).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, g * patch_size, g * patch_size, channels)


class TransformerBlock(Module):
    """Pre-norm encoder block: multi-head self-attention then a ReLU MLP."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int, rng: np.random.Generator):
        self.dim = dim
        self.heads = heads
        self.norm1 = LayerNorm(dim)
        self.qkv = Linear(dim, 3 * dim, rng)
        self.proj = Linear(dim, dim, rng)
        self.norm2 = LayerNorm(dim)
        self.fc1 = Linear(dim, mlp_ratio * dim, rng)
        self.fc2 = Linear(mlp_ratio * dim, dim, rng)

    def forward(self, x: Tensor) -> tuple[Tensor, dict]:
        b, t, d = x.shape
        h, dh = self.heads, d // self.heads
        qkv = self.qkv(self.norm1(x))
        q, k, v = qkv[:, :, :d], qkv[:, :, d : 2 * d], qkv[:, :, 2 * d :]

        def split(m):
            return m.reshape(b, t, h, dh).transpose(0, 2, 1, 3)

        scores = split(q) @ split(k).transpose(0, 1, 3, 2) * (1.0 / np.sqrt(dh))
        weights = scores.softmax(axis=-1)
        context = (weights @ split(v)).transpose(0, 2, 1, 3).reshape(b, t, d)
        x = x + self.proj(context)
        x = x + self.fc2(self.fc1(self.norm2(x)).relu())
        return x, {"q": q, "k": k, "v": v, "context": context, "weights": weights.data}

    def macs(self, tokens: int) -> int:
        t, d = tokens, self.dim
        attention = self.qkv.macs(t) + 2 * t * t * d + self.proj.macs(t)
        return attention + self.fc1.macs(t) + self.fc2.macs(t)


class TeacherModel(Module):
    def __init__(self, cfg: TeacherConfig, num_classes: int, seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        self.num_classes = num_classes
        self.frozen = False
        rng = np.random.default_rng(seed)
        d = cfg.embed_dim
        n = cfg.grid * cfg.grid
        self.patch_embed = Linear(cfg.patch_size**2 * cfg.channels, d, rng)
        self.cls_token = Parameter(rng.normal(0.0, 0.02, size=(1, 1, d)))
        self.pos_embed = Parameter(rng.normal(0.0, 0.02, size=(1, n + 1, d)))
        self.blocks = [TransformerBlock(d, cfg.num_heads, cfg.mlp_ratio, rng) for _ in range(cfg.num_blocks)]
        self.norm = LayerNorm(d)
        self.head = Linear(d, num_classes, rng)

    @property
    def grid(self) -> int:
        return self.cfg.grid

    def freeze(self) -> TeacherModel:
        for p in self.parameters():
            p.requires_grad = False
        self.frozen = True
        return self.eval()

    def forward(self, images) -> TeacherOutputs:
        images = as_tensor(images)
        if images.ndim != 4 or images.shape[1] != self.cfg.image_side or images.shape[3] != self.cfg.channels:
            raise DimensionError(
                f"teacher expects B x {self.cfg.image_side} x {self.cfg.image_side} x {self.cfg.channels}, "
                f"got {list(images.shape)}"
            )
        b = images.shape[0]
        tokens = self.patch_embed(patchify(images, self.cfg.patch_size))
        cls = self.cls_token * np.ones((b, 1, 1))
        x = concat([cls, tokens], axis=1) + self.pos_embed
        qkv_at, token_at = self.cfg.resolved_qkv_block, self.cfg.token_block
        record = hidden = None
        for i, block in enumerate(self.blocks):
            x, info = block(x)
            if i == qkv_at:
                record = info
            if i == token_at:
                hidden = x[:, 1:, :]
        logits = self.head(self.norm(x[:, 0, :]))
        return TeacherOutputs(
            logits=logits,
            attn=record["context"][:, 1:, :],
            values=record["v"][:, 1:, :],
            tokens=hidden,
            queries=record["q"][:, 1:, :],
            keys=record["k"][:, 1:, :],
            attn_weights=record["weights"],
        )

    def macs(self, image_side: int | None = None) -> int:
        side = image_side or self.cfg.image_side
        g = side // self.cfg.patch_size
        t = g * g + 1
        total = self.patch_embed.macs(g * g)
        total += sum(block.macs(t) for block in self.blocks)
        return total + self.head.macs(1)


class InvertedResidual(Module):
    """1x1 expand, 3x3 depthwise, 1x1 linear projection (+ skip when shapes allow)."""

    def __init__(self, cin: int, cout: int, expansion: int, stride: int, rng: np.random.Generator):
        hidden = cin * expansion
        self.expand = Conv2d(cin, hidden, 1, rng) if expansion != 1 else None
        self.depthwise = Conv2d(hidden, hidden, 3, rng, stride=stride, padding=1, groups=hidden)
        self.project = Conv2d(hidden, cout, 1, rng)
        self.residual = stride == 1 and cin == cout

    def forward(self, x: Tensor) -> Tensor:
        y = self.expand(x).relu() if self.expand is not None else x
        y = self.project(self.depthwise(y).relu())
        return x + y if self.residual else y

    def output_side(self, side: int) -> int:
        return self.depthwise.output_side(side)

    def macs(self, side: int) -> int:
        total = self.expand.macs(side) if self.expand is not None else 0
        total += self.depthwise.macs(side)
        return total + self.project.macs(self.depthwise.output_side(side))


class StudentModel(Module):
    """Conv stem plus the first ``truncation_index`` inverted-residual blocks.

    The classifier head (global average pool, hidden FC layers with ReLU and
    dropout, output FC) sits on the truncated feature map, which is also the
    tensor handed to the distillation projectors.

    Raises:
        AlignmentError: if ``expected_grid`` is given and the truncated
            feature map does not have that spatial side.
    """

    def __init__(self, cfg: StudentConfig, num_classes: int, seed: int = 0, expected_grid: int | None = None):
        cfg.validate()
        self.cfg = cfg
        self.num_classes = num_classes
        init_rng, drop_seed = np.random.SeedSequence(seed).spawn(2)
        rng = np.random.default_rng(init_rng)
        self.rng = np.random.default_rng(drop_seed)
        self.stem = Conv2d(cfg.channels, cfg.stem_channels, 3, rng, stride=cfg.stem_stride, padding=1)
        side = self.stem.output_side(cfg.image_side)
        cin = cfg.stem_channels
        self.blocks = []
        for expansion, cout, stride in cfg.blocks[: cfg.truncation_index]:
            block = InvertedResidual(cin, cout, expansion, stride, rng)
            side = block.output_side(side)
            self.blocks.append(block)
            cin = cout
        self.feature_channels = cin
        self.feature_side = side
        if expected_grid is not None and side != expected_grid:
            raise AlignmentError(
                f"student feature map is {side} x {side} but the teacher token grid is "
                f"{expected_grid} x {expected_grid}"
            )
        self.hidden = []
        width = cin
        for units in cfg.head_hidden:
            self.hidden.append(Linear(width, units, rng))
            width = units
        self.classifier = Linear(width, num_classes, rng)

    def features(self, images) -> Tensor:
        images = as_tensor(images)
        if images.ndim != 4 or images.shape[1] != self.cfg.image_side or images.shape[3] != self.cfg.channels:
            raise DimensionError(
                f"student expects B x {self.cfg.image_side} x {self.cfg.image_side} x {self.cfg.channels}, "
                f"got {list(images.shape)}"
            )
        x = self.stem(images.transpose(0, 3, 1, 2)).relu()
        for block in self.blocks:
            x = block(x)
        return x

    def classify(self, features: Tensor) -> Tensor:
        x = features.mean(axis=(2, 3))
        for layer in self.hidden:
            x = dropout(layer(x).relu(), self.cfg.dropout, self.rng, self.training)
        return self.classifier(x)

    def forward(self, images) -> StudentOutputs:
        feats = self.features(images)
        return StudentOutputs(logits=self.classify(feats), features=feats)

    def macs(self, image_side: int | None = None) -> int:
        side = image_side or self.cfg.image_side
        total = self.stem.macs(side)
        side = self.stem.output_side(side)
        for block in self.blocks:
            total += block.macs(side)
            side = block.output_side(side)
        total += sum(layer.macs(1) for layer in self.hidden)
        return total + self.classifier.macs(1)


def check_alignment(teacher: TeacherModel, student: StudentModel) -> int:
    """Return the shared grid side, or raise if the models cannot be paired."""
    if teacher.grid != student.feature_side:
        raise AlignmentError(
            f"teacher token grid {teacher.grid} x {teacher.grid} != student feature map "
            f"{student.feature_side} x {student.feature_side}"
        )
    return teacher.grid


def count_params(model: Module) -> int:
    return model.count_params()


def flops_estimate(model, image_side: int | None = None) -> int:
    """Multiply-accumulate count of one single-image forward pass.

    Per-layer formulas: conv ``k^2 * (C_in / groups) * C_out * H_out * W_out``;
    linear ``tokens * in * out``; attention ``3 T d^2`` (QKV) ``+ 2 T^2 d``
    (scores and context) ``+ T d^2`` (output projection).  Bias adds,
    normalizations, activations and softmax are not counted.
    """
    return int(model.macs(image_side))
