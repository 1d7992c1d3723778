"""Hierarchical encoder-decoder segmenter.

One encoder and ``num_decoders`` decoders, each a stack of blocks whose
attention window and convolution dilation double with depth.  Every stage
emits frame-wise logits; decoders refine the softmax of the previous stage.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .nn import Conv1d, Linear, Module
from .tensor import ContractError, Tensor, concat, instance_norm, local_attention


@dataclass(frozen=True)
class AseConfig:
    in_dim: int = 64
    num_classes: int = 15
    width: int = 64
    num_decoders: int = 3
    blocks_per_stage: int = 9
    kernel_size: int = 3
    window_base: int = 2

    def __post_init__(self):
        if self.blocks_per_stage < 1:
            raise ContractError("blocks_per_stage must be >= 1")
        if self.num_decoders < 0:
            raise ContractError("num_decoders must be >= 0")
        if self.kernel_size % 2 != 1:
            raise ContractError("kernel_size must be odd")

    @property
    def num_stages(self) -> int:
        return 1 + self.num_decoders

    def to_dict(self) -> dict:
        return asdict(self)


def block_window(config: AseConfig, index: int, length: int) -> int:
    """Attention window (also the dilation) of the ``index``-th block, 1-based."""
    return max(1, min(config.window_base**index, length))


class AttentionBlock(Module):
    """conv -> ReLU -> instance norm -> local attention -> residual -> 1x1.

    With ``cross=True`` the query and key come from a linear map of the
    encoder features concatenated with this block's normalised features;
    the value always comes from this block alone.
    """

    def __init__(self, rng: np.random.Generator, width: int, index: int,
                 kernel_size: int = 3, cross: bool = False):
        self.index = index
        self.cross = cross
        self.conv = Conv1d(rng, width, width, kernel_size)
        qk_in = 2 * width if cross else width
        self.query = Linear(rng, qk_in, width)
        self.key = Linear(rng, qk_in, width)
        self.value = Linear(rng, width, width)
        self.out = Linear(rng, width, width)

    def forward(self, x: Tensor, window: int, encoder_out: Tensor | None = None,
                return_weights: bool = False):
        if self.cross:
            if encoder_out is None:
                raise ContractError("decoder block needs encoder output")
            if encoder_out.shape[0] != x.shape[0]:
                raise ContractError(
                    f"encoder length {encoder_out.shape[0]} != decoder length {x.shape[0]}"
                )
        h = self.conv(x, dilation=window).relu()
        n = instance_norm(h)
        qk_src = concat([encoder_out, n], axis=1) if self.cross else n
        res = local_attention(self.query(qk_src), self.key(qk_src), self.value(n), window,
                              return_weights=return_weights)
        att, weights = res if return_weights else (res, None)
        y = x + self.out(h + att)
        return (y, weights) if return_weights else y


class Stage(Module):
    def __init__(self, rng: np.random.Generator, in_dim: int, config: AseConfig,
                 out_dim: int, cross: bool):
        self.cross = cross
        self.proj_in = Linear(rng, in_dim, config.width)
        self.blocks = [
            AttentionBlock(rng, config.width, i + 1, config.kernel_size, cross=cross)
            for i in range(config.blocks_per_stage)
        ]
        self.head = Linear(rng, config.width, out_dim)

    def forward(self, x: Tensor, config: AseConfig, encoder_out: Tensor | None = None):
        h = self.proj_in(x)
        t = x.shape[0]
        for block in self.blocks:
            h = block(h, block_window(config, block.index, t), encoder_out)
        return h, self.head(h)


class Ase(Module):
    """Encoder plus refinement decoders.

    ``out_dim`` defaults to the class count; the boundary branch reuses the
    same stack with ``out_dim=1``.
    """

    def __init__(self, config: AseConfig, seed: int = 0, out_dim: int | None = None,
                 dtype=np.float64):
        rng = np.random.default_rng(seed)
        self.config = config
        self.out_dim = config.num_classes if out_dim is None else out_dim
        self.encoder = Stage(rng, config.in_dim, config, self.out_dim, cross=False)
        self.decoders = [
            Stage(rng, self.out_dim, config, self.out_dim, cross=True)
            for _ in range(config.num_decoders)
        ]
        self.astype(dtype)

    def forward(self, features) -> list[Tensor]:
        x = features if isinstance(features, Tensor) else Tensor(features)
        if x.ndim != 2 or x.shape[0] == 0:
            raise ContractError(f"features must be a non-empty T x D matrix, got {x.shape}")
        enc, logits = self.encoder(x, self.config)
        stages = [logits]
        for dec in self.decoders:
            _, logits = dec(self._link(logits), self.config, enc)
            stages.append(logits)
        return stages

    def _link(self, logits: Tensor) -> Tensor:
        return logits.softmax(axis=1) if self.out_dim > 1 else logits.sigmoid()


def ase_forward(features, model: Ase) -> list[Tensor]:
    return model(features)
