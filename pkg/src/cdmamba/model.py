"""Siamese encoder-decoder for bi-temporal change detection.

Pipeline: a 3x3 conv stem, four encoder stages of SRCM blocks over token
grids (bilinear 1/2 downsampling between stages, 1x1 convs at channel
changes), guided fusion of the two temporal features at configured stages,
absolute-difference features everywhere, a three-stage decoder (bilinear x2
upsampling, skip concatenation, depthwise-separable SRCM blocks), and a 1x1
projection to two logits.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, bilinear_resize, image_to_tokens, tokens_to_image
from .blocks import AGLGF, SRCM, BlockConfig
from .layers import Conv2d, Module


@dataclass
class ModelConfig:
    input_channels: int = 3
    stem_channels: int = 16
    stage_channels: tuple = (16, 32, 64, 128)
    stage_depths: tuple = (1, 2, 2, 4)
    decoder_depths: tuple = (1, 1, 1)
    aglgf_stages: tuple = (1, 2)            # 1-based stage indices
    num_classes: int = 2
    expand: int = 2
    d_state: int = 16
    conv1d_kernel: int = 4
    conv2d_kernel: int = 3
    gate_activation: str = "relu"
    lgf_dim_multiplier: float = 2.0
    ssm_skip: bool = True

    # spatial scale of each stage relative to the input
    stage_scales: tuple = field(init=False)

    def __post_init__(self):
        self.stage_channels = tuple(int(c) for c in self.stage_channels)
        self.stage_depths = tuple(int(d) for d in self.stage_depths)
        self.decoder_depths = tuple(int(d) for d in self.decoder_depths)
        self.aglgf_stages = tuple(sorted(set(int(s) for s in self.aglgf_stages)))
        if len(self.stage_channels) != 4 or len(self.stage_depths) != 4:
            raise ValueError("the encoder has four stages; channels and depths must list four values")
        if len(self.decoder_depths) != len(self.stage_channels) - 1:
            raise ValueError("the decoder has one fewer stage than the encoder")
        if not set(self.aglgf_stages) <= {1, 2, 3, 4}:
            raise ValueError(f"aglgf_stages must be within 1..4, got {self.aglgf_stages}")
        if self.stem_channels != self.stage_channels[0]:
            raise ValueError("stem channels must equal the first stage width (stage 1 mapping is identity)")
        self.stage_scales = tuple(1.0 / (2 ** i) for i in range(len(self.stage_channels)))

    def block_config(self, channels: int, depthwise_separable: bool = False) -> BlockConfig:
        return BlockConfig(
            d_model=channels,
            expand=self.expand,
            d_state=self.d_state,
            conv1d_kernel=self.conv1d_kernel,
            conv2d_kernel=self.conv2d_kernel,
            gate_activation=self.gate_activation,
            lgf_dim_multiplier=self.lgf_dim_multiplier,
            depthwise_separable=depthwise_separable,
            ssm_skip=self.ssm_skip,
        )

    _FIELDS = (
        "input_channels", "stem_channels", "stage_channels", "stage_depths",
        "decoder_depths", "aglgf_stages", "num_classes", "expand", "d_state",
        "conv1d_kernel", "conv2d_kernel", "gate_activation", "lgf_dim_multiplier",
        "ssm_skip",
    )

    def to_text(self) -> str:
        lines = []
        for name in self._FIELDS:
            value = getattr(self, name)
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            lines.append(f"{name} = {value}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        kwargs = {}
        for raw in text.splitlines():
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, _, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if key not in cls._FIELDS:
                raise ValueError(f"unknown model config key {key!r}")
            if key in ("stage_channels", "stage_depths", "decoder_depths", "aglgf_stages"):
                kwargs[key] = tuple(int(v) for v in value.split(",") if v.strip() != "")
            elif key == "gate_activation":
                kwargs[key] = value
            elif key == "lgf_dim_multiplier":
                kwargs[key] = float(value)
            elif key == "ssm_skip":
                kwargs[key] = value.lower() in ("true", "1", "yes")
            else:
                kwargs[key] = int(value)
        return cls(**kwargs)


@dataclass
class StageFeatures:
    """Per-stage bi-temporal token features and their grids."""

    f1: list
    f2: list
    hw: list


class CDMamba(Module):
    def __init__(self, config: ModelConfig | None = None, seed: int = 0):
        self.config = config or ModelConfig()
        cfg = self.config
        rng = np.random.default_rng(seed)

        self.stem = Conv2d(cfg.input_channels, cfg.stem_channels, 3, rng, padding=1)

        self.stage_maps = []
        self.stages = []
        for i, (channels, depth) in enumerate(zip(cfg.stage_channels, cfg.stage_depths)):
            if i == 0:
                self.stage_maps.append(None)
            else:
                self.stage_maps.append(Conv2d(cfg.stage_channels[i - 1], channels, 1, rng, padding=0))
            block_cfg = cfg.block_config(channels)
            self.stages.append([SRCM(block_cfg, rng) for _ in range(depth)])

        self.aglgf = {
            str(stage): AGLGF(cfg.block_config(cfg.stage_channels[stage - 1]), rng)
            for stage in cfg.aglgf_stages
        }

        self.decoder_fuse = []
        self.decoder_stages = []
        for j, skip_idx in enumerate(range(len(cfg.stage_channels) - 2, -1, -1)):
            c_skip = cfg.stage_channels[skip_idx]
            c_up = cfg.stage_channels[skip_idx + 1]
            self.decoder_fuse.append(Conv2d(c_up + c_skip, c_skip, 1, rng, padding=0))
            block_cfg = cfg.block_config(c_skip, depthwise_separable=True)
            self.decoder_stages.append(
                [SRCM(block_cfg, rng) for _ in range(cfg.decoder_depths[j])])

        self.head = Conv2d(cfg.stage_channels[0], cfg.num_classes, 1, rng, padding=0)

    # ------------------------------------------------------------------
    def _check_input(self, t: Tensor) -> tuple[int, int]:
        c, h, w = t.data.shape
        if c != self.config.input_channels:
            raise ValueError(f"expected {self.config.input_channels} input channels, got {c}")
        halvings = len(self.config.stage_channels) - 1
        divisor = 2 ** halvings
        if h < divisor or w < divisor or h % divisor or w % divisor:
            raise ValueError(
                f"input size {h}x{w} must be at least {divisor} and divisible by {divisor} "
                f"(the encoder halves the grid {halvings} times)")
        return h, w

    def conv_stream(self, t: Tensor) -> Tensor:
        self._check_input(t)
        return self.stem(t)

    def _encode_one(self, t: Tensor):
        h, w = self._check_input(t)
        img = self.stem(t)
        feats, grids = [], []
        for i, blocks in enumerate(self.stages):
            if i > 0:
                img = bilinear_resize(img, 0.5)
                h, w = h // 2, w // 2
                img = self.stage_maps[i](img)
            tok = image_to_tokens(img)
            for blk in blocks:
                tok = blk(tok, (h, w))
            feats.append(tok)
            grids.append((h, w))
            img = tokens_to_image(tok, (h, w))
        return feats, grids

    def encoder_forward(self, t1: Tensor, t2: Tensor) -> StageFeatures:
        f1, grids = self._encode_one(t1)
        f2, _ = self._encode_one(t2)
        return StageFeatures(f1=f1, f2=f2, hw=grids)

    def diff_features(self, feats: StageFeatures) -> list:
        diffs = []
        for i, (f1, f2, hw) in enumerate(zip(feats.f1, feats.f2, feats.hw), start=1):
            if i in self.config.aglgf_stages:
                g1, g2 = self.aglgf[str(i)](f1, f2, hw)
                diffs.append(ad.absolute(g1 - g2))
            else:
                diffs.append(ad.absolute(f1 - f2))
        return diffs

    def decoder_forward(self, diffs: list, grids: list) -> Tensor:
        img = tokens_to_image(diffs[-1], grids[-1])
        for j, skip_idx in enumerate(range(len(diffs) - 2, -1, -1)):
            img = bilinear_resize(img, 2)
            h, w = grids[skip_idx]
            skip = tokens_to_image(diffs[skip_idx], (h, w))
            img = self.decoder_fuse[j](ad.concat([img, skip], axis=0))
            tok = image_to_tokens(img)
            for blk in self.decoder_stages[j]:
                tok = blk(tok, (h, w))
            img = tokens_to_image(tok, (h, w))
        return img

    def forward(self, t1: Tensor, t2: Tensor) -> Tensor:
        """Bi-temporal images [3,H,W] x2 -> change logits [num_classes,H,W]."""
        feats = self.encoder_forward(t1, t2)
        diffs = self.diff_features(feats)
        decoded = self.decoder_forward(diffs, feats.hw)
        return self.head(decoded)

    def predict(self, t1, t2) -> np.ndarray:
        """Hard change mask via argmax over the class axis (class 1 = changed)."""
        t1, t2 = ad.as_tensor(t1), ad.as_tensor(t2)
        with ad.no_grad():
            logits = self.forward(t1, t2)
        return np.argmax(logits.data, axis=0).astype(np.uint8)


# ---------------------------------------------------------------------------
# checkpoint format: little-endian, versioned, named float32 parameter table

_MAGIC = b"CDMB"
_VERSION = 1


def save_checkpoint(path, model: CDMamba) -> None:
    config_text = model.config.to_text().encode("utf-8")
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<I", _VERSION))
        f.write(struct.pack("<Q", len(config_text)))
        f.write(config_text)
        params = list(model.named_parameters())
        f.write(struct.pack("<I", len(params)))
        for name, p in params:
            encoded = name.encode("utf-8")
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            shape = p.data.shape
            f.write(struct.pack("<B", len(shape)))
            if shape:
                f.write(struct.pack(f"<{len(shape)}I", *shape))
            f.write(p.data.astype("<f4").tobytes())


def load_checkpoint(path, seed: int = 0) -> CDMamba:
    with open(path, "rb") as f:
        if f.read(4) != _MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (version,) = struct.unpack("<I", f.read(4))
        if version != _VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        (config_len,) = struct.unpack("<Q", f.read(8))
        config = ModelConfig.from_text(f.read(config_len).decode("utf-8"))
        model = CDMamba(config, seed=seed)
        lookup = dict(model.named_parameters())
        (count,) = struct.unpack("<I", f.read(4))
        seen = set()
        for _ in range(count):
            (name_len,) = struct.unpack("<H", f.read(2))
            name = f.read(name_len).decode("utf-8")
            (rank,) = struct.unpack("<B", f.read(1))
            shape = struct.unpack(f"<{rank}I", f.read(4 * rank)) if rank else ()
            n_values = int(np.prod(shape)) if shape else 1
            payload = np.frombuffer(f.read(4 * n_values), dtype="<f4")
            if name not in lookup:
                raise ValueError(f"{path}: unexpected parameter {name!r}")
            target = lookup[name]
            if tuple(target.data.shape) != shape:
                raise ValueError(
                    f"{path}: shape mismatch for {name!r}: expected {tuple(target.data.shape)}, "
                    f"found {shape}")
            target.data = payload.reshape(shape).astype(np.float64)
            seen.add(name)
        missing = set(lookup) - seen
        if missing:
            raise ValueError(f"{path}: missing parameters: {sorted(missing)[:5]} ...")
    return model
