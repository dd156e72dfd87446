"""Feature-level bridges between the CNN student and the transformer teacher.

:class:`PcaProjector` turns the student feature map into query/key/value
tokens, swaps a random subset of their entries for the teacher's, and matches
the resulting attention output against the teacher's.  :class:`GwlProjector`
projects the four spatial quadrants of the feature map with one shared affine
map and puts the tokens back into raster order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError
from .layers import Conv2d, Module
from .tensor import Parameter, Tensor, as_tensor, concat, dropout


def flatten_grid(fmap: Tensor) -> Tensor:
    """``B x C x g x g`` -> ``B x g^2 x C`` in raster (patchify) order."""
    b, c, h, w = fmap.shape
    return fmap.reshape(b, c, h * w).transpose(0, 2, 1)


def draw_mask(shape, p: float, rng: np.random.Generator) -> np.ndarray:
    """Boolean mask, True where the teacher value replaces the student's."""
    if not 0.0 <= p <= 1.0:
        raise ConfigError(f"mask probability {p} outside [0, 1]")
    return rng.random(shape) < p


def apply_mask(student: Tensor, teacher: Tensor, mask: np.ndarray) -> Tensor:
    """Take teacher entries where ``mask`` is set, student entries elsewhere.

    The mask is a constant: student positions that were replaced receive no
    gradient, and nothing flows into the teacher tensor.
    """
    if student.shape != teacher.shape or mask.shape != student.shape:
        raise DimensionError(
            f"partial mask shapes differ: {list(student.shape)}, {list(teacher.shape)}, {list(mask.shape)}"
        )
    keep = (~mask).astype(np.float64)
    return student * keep + teacher.detach() * (1.0 - keep)


def partial_mask(student: Tensor, teacher: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    return apply_mask(as_tensor(student), as_tensor(teacher), draw_mask(student.shape, p, rng))


def pc_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """``softmax(Q K^T / sqrt(d)) V`` per batch element."""
    if not (q.shape == k.shape and q.shape[:-1] == v.shape[:-1]):
        raise DimensionError(f"attention shapes differ: {list(q.shape)}, {list(k.shape)}, {list(v.shape)}")
    d = q.shape[-1]
    scores = q @ k.swapaxes(-1, -2) * (1.0 / np.sqrt(d))
    return scores.softmax(axis=-1) @ v


def proj1_loss(teacher_attn: Tensor, teacher_values: Tensor, student_attn: Tensor, student_values: Tensor) -> Tensor:
    """Attention matching plus squared-value matching, each a mean over elements."""
    shapes = {t.shape for t in (teacher_attn, teacher_values, student_attn, student_values)}
    if len(shapes) != 1 or teacher_attn.ndim != 3:
        raise DimensionError(
            "proj1_loss needs four B x N x d tensors, got "
            + ", ".join(str(list(t.shape)) for t in (teacher_attn, teacher_values, student_attn, student_values))
        )
    scale = 1.0 / np.sqrt(teacher_attn.shape[-1])
    attn_diff = as_tensor(teacher_attn) - student_attn
    value_diff = as_tensor(teacher_values) * teacher_values * scale - student_values * student_values * scale
    return (attn_diff * attn_diff).mean() + (value_diff * value_diff).mean()


def proj2_loss(teacher_tokens: Tensor, student_tokens: Tensor) -> Tensor:
    if teacher_tokens.shape != student_tokens.shape:
        raise DimensionError(
            f"proj2_loss shape mismatch: {list(teacher_tokens.shape)} vs {list(student_tokens.shape)}"
        )
    diff = as_tensor(teacher_tokens) - student_tokens
    return (diff * diff).mean()


@dataclass
class PcaOutputs:
    attn: Tensor  # PCAttn, B x N x d
    queries: Tensor  # pre-mask student projections
    keys: Tensor
    values: Tensor


class PcaProjector(Module):
    """Three 3x3 same-padding convolutions ``C' -> d`` feeding a single-head
    attention whose inputs are partially replaced by teacher tensors."""

    def __init__(
        self,
        in_channels: int,
        embed_dim: int,
        mask_p: float = 0.5,
        dropout: float = 0.2,
        seed: int = 0,
    ):
        if not 0.0 <= mask_p <= 1.0:
            raise ConfigError(f"mask probability {mask_p} outside [0, 1]")
        if not 0.0 <= dropout < 1.0:
            raise ConfigError(f"projector dropout {dropout} outside [0, 1)")
        init_seed, stream_seed = np.random.SeedSequence(seed).spawn(2)
        rng = np.random.default_rng(init_seed)
        self.rng = np.random.default_rng(stream_seed)
        self.in_channels = in_channels
        self.embed_dim = embed_dim
        self.mask_p = mask_p
        self.dropout = dropout
        self.conv_q = Conv2d(in_channels, embed_dim, 3, rng, padding=1)
        self.conv_k = Conv2d(in_channels, embed_dim, 3, rng, padding=1)
        self.conv_v = Conv2d(in_channels, embed_dim, 3, rng, padding=1)

    def qkv(self, fmap: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        if fmap.ndim != 4 or fmap.shape[1] != self.in_channels:
            raise DimensionError(f"PCA projector expects {self.in_channels} channels, got {list(fmap.shape)}")
        return tuple(flatten_grid(conv(fmap)) for conv in (self.conv_q, self.conv_k, self.conv_v))

    def forward(self, fmap: Tensor, teacher) -> PcaOutputs:
        """``teacher`` is a :class:`~crosskd.models.TeacherOutputs`."""
        q, k, v = self.qkv(fmap)
        mixed = []
        for student, target in ((q, teacher.queries), (k, teacher.keys), (v, teacher.values)):
            if student.shape != target.shape:
                raise DimensionError(
                    f"student projection {list(student.shape)} does not match teacher {list(target.shape)}"
                )
            s = dropout(student, self.dropout, self.rng, self.training)
            mixed.append(partial_mask(s, target, self.mask_p, self.rng))
        return PcaOutputs(attn=pc_attention(*mixed), queries=q, keys=k, values=v)

    def loss(self, fmap: Tensor, teacher) -> Tensor:
        out = self(fmap, teacher)
        return proj1_loss(teacher.attn.detach(), teacher.values.detach(), out.attn, out.values)

    def macs(self, side: int) -> int:
        n = side * side
        convs = sum(c.macs(side) for c in (self.conv_q, self.conv_k, self.conv_v))
        return convs + 2 * n * n * self.embed_dim


QUADRANTS = ("TL", "TR", "BL", "BR")


def quadrant_slices(grid: int) -> dict[str, tuple[slice, slice]]:
    h = grid // 2
    return {
        "TL": (slice(0, h), slice(0, h)),
        "TR": (slice(0, h), slice(h, grid)),
        "BL": (slice(h, grid), slice(0, h)),
        "BR": (slice(h, grid), slice(h, grid)),
    }


def quadrant_members(grid: int) -> dict[str, list[int]]:
    """Raster indices of each quadrant, row-major within the quadrant."""
    raster = np.arange(grid * grid).reshape(grid, grid)
    return {name: raster[rows, cols].reshape(-1).tolist() for name, (rows, cols) in quadrant_slices(grid).items()}


class GwlProjector(Module):
    """Shared affine projection of four spatial quadrants, reassembled in raster order."""

    def __init__(self, in_channels: int, embed_dim: int, grid: int, dropout: float = 0.4, seed: int = 0):
        if grid % 2:
            raise ConfigError(f"group-wise projection needs an even grid side, got {grid}")
        if not 0.0 <= dropout < 1.0:
            raise ConfigError(f"projector dropout {dropout} outside [0, 1)")
        init_seed, stream_seed = np.random.SeedSequence(seed).spawn(2)
        rng = np.random.default_rng(init_seed)
        self.rng = np.random.default_rng(stream_seed)
        self.in_channels = in_channels
        self.embed_dim = embed_dim
        self.grid = grid
        self.dropout = dropout
        bound = np.sqrt(3.0 / in_channels)
        self.weight = Parameter(rng.uniform(-bound, bound, size=(in_channels, embed_dim)))
        self.bias = Parameter(np.zeros(embed_dim))

    def groups(self, fmap: Tensor) -> list[Tensor]:
        """The four quadrants as ``B x (g/2)^2 x C'`` token groups (TL, TR, BL, BR)."""
        if fmap.ndim != 4 or fmap.shape[1] != self.in_channels or fmap.shape[2:] != (self.grid, self.grid):
            raise DimensionError(
                f"GWL projector expects B x {self.in_channels} x {self.grid} x {self.grid}, got {list(fmap.shape)}"
            )
        b = fmap.shape[0]
        h = self.grid // 2
        channels_last = fmap.transpose(0, 2, 3, 1)
        slices = quadrant_slices(self.grid)
        return [channels_last[:, rows, cols, :].reshape(b, h * h, self.in_channels) for rows, cols in slices.values()]

    def reassemble(self, groups: list[Tensor]) -> Tensor:
        """Inverse of :meth:`groups`: place token groups back on the raster grid."""
        b, _, d = groups[0].shape
        h = self.grid // 2
        tl, tr, bl, br = (grp.reshape(b, h, h, d) for grp in groups)
        full = concat([concat([tl, tr], axis=2), concat([bl, br], axis=2)], axis=1)
        return full.reshape(b, self.grid * self.grid, d)

    def forward(self, fmap: Tensor) -> Tensor:
        projected = [grp @ self.weight + self.bias for grp in self.groups(fmap)]
        out = self.reassemble(projected)
        return dropout(out, self.dropout, self.rng, self.training)

    def loss(self, fmap: Tensor, teacher) -> Tensor:
        return proj2_loss(teacher.tokens.detach(), self(fmap))

    def macs(self, side: int) -> int:
        return side * side * self.in_channels * self.embed_dim
