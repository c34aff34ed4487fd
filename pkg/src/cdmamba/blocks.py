"""The network's building blocks: ConvMamba, SRCM, G-GF, L-GF, AGLGF.

All blocks map token features [L, C] to [L, C]. The token grid (H, W) is
passed at forward time; weight shapes never depend on it, so one block
instance serves any spatial size with L = H*W.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, image_to_tokens, tokens_to_image
from .layers import Conv2d, Conv1dDepthwise, LayerNorm, Linear, Module
from .ssm import SelectiveSSM

GATE_ACTIVATIONS = {
    "relu": ad.relu,
    "silu": ad.silu,
    "leakyrelu": ad.leaky_relu,
    "sigmoid": ad.sigmoid,
}


@dataclass
class BlockConfig:
    """Hyperparameters shared by every block at one stage."""

    d_model: int
    expand: int = 2                 # channel expansion factor inside the blocks
    d_state: int = 16
    conv1d_kernel: int = 4
    conv2d_kernel: int = 3
    gate_activation: str = "relu"
    lgf_dim_multiplier: float = 2.0
    depthwise_separable: bool = False
    residual_alpha_init: float = 1.0
    ssm_skip: bool = True

    def __post_init__(self):
        if self.d_model % 2 != 0:
            raise ValueError(f"d_model must be even (channels split in half), got {self.d_model}")
        if self.gate_activation not in GATE_ACTIVATIONS:
            raise ValueError(
                f"unknown gate activation {self.gate_activation!r}, "
                f"pick one of {sorted(GATE_ACTIVATIONS)}")
        mult_width = self.lgf_dim_multiplier * self.d_model
        if abs(mult_width - round(mult_width)) > 1e-9:
            raise ValueError(
                f"lgf_dim_multiplier {self.lgf_dim_multiplier} * d_model {self.d_model} "
                "must be an integer width")

    @property
    def d_inner(self) -> int:
        return self.expand * self.d_model

    @property
    def lgf_width(self) -> int:
        return round(self.lgf_dim_multiplier * self.d_model)


def _check_tokens(x: Tensor, c: int, hw) -> None:
    length = x.data.shape[0]
    if x.data.ndim != 2 or x.data.shape[1] != c:
        raise ValueError(f"expected [L,{c}] tokens, got {x.data.shape}")
    if hw is not None and hw[0] * hw[1] != length:
        raise ValueError(f"token grid {hw} does not match L={length}")


class ConvMamba(Module):
    """Three branches: gated SSM path on split channels plus a conv path.

    Branch 1: first C/2 channels -> Linear -> SiLU.
    Branch 2: second C/2 channels -> Linear -> causal Conv1d -> SSM -> LN.
    Branch 3: full feature as an image -> Conv2d -> SiLU -> Conv2d, flattened.
    Output: Linear(branch1 * branch2 + branch3) back to C channels.
    """

    def __init__(self, cfg: BlockConfig, rng: np.random.Generator):
        self.cfg = cfg
        half, inner = cfg.d_model // 2, cfg.d_inner
        self.lin_b1 = Linear(half, inner, rng)
        self.lin_b2 = Linear(half, inner, rng)
        self.conv_b2 = Conv1dDepthwise(inner, cfg.conv1d_kernel, rng)
        self.ssm = SelectiveSSM(inner, cfg.d_state, rng, skip=cfg.ssm_skip)
        self.norm_b2 = LayerNorm(inner)
        self.conv_b3_in = Conv2d(cfg.d_model, inner, cfg.conv2d_kernel, rng,
                                 depthwise_separable=cfg.depthwise_separable)
        self.conv_b3_out = Conv2d(inner, inner, cfg.conv2d_kernel, rng,
                                  depthwise_separable=cfg.depthwise_separable)
        self.lin_out = Linear(inner, cfg.d_model, rng)

    def forward(self, x: Tensor, hw) -> Tensor:
        c = self.cfg.d_model
        _check_tokens(x, c, hw)
        xb1, xb2 = ad.split(x, [c // 2, c // 2], axis=1)
        b1 = ad.silu(self.lin_b1(xb1))
        b2 = self.norm_b2(self.ssm(self.conv_b2(self.lin_b2(xb2))))
        img = tokens_to_image(x, hw)
        b3 = image_to_tokens(self.conv_b3_out(ad.silu(self.conv_b3_in(img))))
        return self.lin_out(b1 * b2 + b3)


class SRCM(Module):
    """Scaled-residual wrapper around ConvMamba.

    fused = ConvMamba(LN(x)) + alpha * x, with alpha a learnable scalar
    (init 1.0); the block output is Linear(LN(fused)).
    """

    def __init__(self, cfg: BlockConfig, rng: np.random.Generator):
        self.norm_in = LayerNorm(cfg.d_model)
        self.conv_mamba = ConvMamba(cfg, rng)
        self.alpha = Tensor(np.array(cfg.residual_alpha_init), requires_grad=True)
        self.norm_out = LayerNorm(cfg.d_model)
        self.lin_out = Linear(cfg.d_model, cfg.d_model, rng)

    def fuse(self, x: Tensor, hw) -> Tensor:
        return self.conv_mamba(self.norm_in(x), hw) + self.alpha * x

    def forward(self, x: Tensor, hw) -> Tensor:
        return self.lin_out(self.norm_out(self.fuse(x, hw)))


class GGF(Module):
    """Global-guided fusion: an SSM path of the guiding feature gates the other.

    Branches 1-2 process the guided feature f1 exactly like ConvMamba's gated
    pair; branch 3 runs the guiding feature f2 through its own
    Linear -> Conv1d -> SSM and the configured gate activation.
    """

    def __init__(self, cfg: BlockConfig, rng: np.random.Generator):
        self.cfg = cfg
        c, inner = cfg.d_model, cfg.d_inner
        self.lin_b1 = Linear(c, inner, rng)
        self.lin_b2 = Linear(c, inner, rng)
        self.conv_b2 = Conv1dDepthwise(inner, cfg.conv1d_kernel, rng)
        self.ssm_b2 = SelectiveSSM(inner, cfg.d_state, rng, skip=cfg.ssm_skip)
        self.norm_b2 = LayerNorm(inner)
        self.lin_b3 = Linear(c, inner, rng)
        self.conv_b3 = Conv1dDepthwise(inner, cfg.conv1d_kernel, rng)
        self.ssm_b3 = SelectiveSSM(inner, cfg.d_state, rng, skip=cfg.ssm_skip)
        self.lin_out = Linear(inner, c, rng)

    def forward(self, f1: Tensor, f2: Tensor) -> Tensor:
        if f1.data.shape != f2.data.shape:
            raise ValueError(f"GGF input mismatch: {f1.data.shape} vs {f2.data.shape}")
        _check_tokens(f1, self.cfg.d_model, None)
        gate = GATE_ACTIVATIONS[self.cfg.gate_activation]
        b1 = ad.silu(self.lin_b1(f1))
        b2 = self.norm_b2(self.ssm_b2(self.conv_b2(self.lin_b2(f1))))
        b3 = gate(self.ssm_b3(self.conv_b3(self.lin_b3(f2))))
        return self.lin_out((b1 * b2) * b3)


class LGF(Module):
    """Local-guided fusion: like GGF but the gate comes from a conv stack.

    The guiding feature is reshaped to an image and passed through
    Conv2d -> SiLU -> Conv2d at width lgf_dim_multiplier * C; all three
    branches run at that width so the Hadamard products line up.
    """

    def __init__(self, cfg: BlockConfig, rng: np.random.Generator):
        self.cfg = cfg
        c, width = cfg.d_model, cfg.lgf_width
        self.lin_b1 = Linear(c, width, rng)
        self.lin_b2 = Linear(c, width, rng)
        self.conv_b2 = Conv1dDepthwise(width, cfg.conv1d_kernel, rng)
        self.ssm_b2 = SelectiveSSM(width, cfg.d_state, rng, skip=cfg.ssm_skip)
        self.norm_b2 = LayerNorm(width)
        self.conv_b3_in = Conv2d(c, width, cfg.conv2d_kernel, rng,
                                 depthwise_separable=cfg.depthwise_separable)
        self.conv_b3_out = Conv2d(width, width, cfg.conv2d_kernel, rng,
                                  depthwise_separable=cfg.depthwise_separable)
        self.lin_out = Linear(width, c, rng)

    def forward(self, f1: Tensor, f2: Tensor, hw) -> Tensor:
        if f1.data.shape != f2.data.shape:
            raise ValueError(f"LGF input mismatch: {f1.data.shape} vs {f2.data.shape}")
        _check_tokens(f1, self.cfg.d_model, hw)
        gate = GATE_ACTIVATIONS[self.cfg.gate_activation]
        b1 = ad.silu(self.lin_b1(f1))
        b2 = self.norm_b2(self.ssm_b2(self.conv_b2(self.lin_b2(f1))))
        img = tokens_to_image(f2, hw)
        b3 = image_to_tokens(self.conv_b3_out(ad.silu(self.conv_b3_in(img))))
        return self.lin_out((b1 * b2) * gate(b3))


class AGLGF(Module):
    """Adaptive gate over the global- and local-guided fusion outputs.

    Each output is mean-pooled over tokens, the pooled pair is concatenated
    and mapped 2C -> 2; the softmaxed scores weight a convex combination of
    the two feature maps. One weight set serves both guidance directions.
    """

    def __init__(self, cfg: BlockConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.ggf = GGF(cfg, rng)
        self.lgf = LGF(cfg, rng)
        self.gate_lin = Linear(2 * cfg.d_model, 2, rng)

    def gate(self, f_ggf: Tensor, f_lgf: Tensor) -> Tensor:
        if f_ggf.data.shape != f_lgf.data.shape:
            raise ValueError(f"gate input mismatch: {f_ggf.data.shape} vs {f_lgf.data.shape}")
        pooled = ad.concat([f_ggf.mean(axis=0), f_lgf.mean(axis=0)], axis=0)
        scores = ad.softmax(self.gate_lin(pooled.reshape(1, 2 * self.cfg.d_model)), axis=1)
        w_g, w_l = ad.split(scores, [1, 1], axis=1)
        return w_g * f_ggf + w_l * f_lgf

    def fuse_one_direction(self, f1: Tensor, f2: Tensor, hw) -> Tensor:
        return self.gate(self.ggf(f1, f2), self.lgf(f1, f2, hw))

    def forward(self, f1: Tensor, f2: Tensor, hw) -> tuple[Tensor, Tensor]:
        out1 = self.fuse_one_direction(f1, f2, hw)
        out2 = self.fuse_one_direction(f2, f1, hw)
        return out1, out2
