"""Full segmentation network: cross-level fusion encoder, nine-branch
dilated pyramid bottleneck, and a ConvLSTM context-inference decoder.

Each of the three components sits behind a config toggle (use_aspp,
use_clf, use_inference) so the eight-row ablation matrix can be built
from one code path.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .blocks import ConvBlock, ConvLSTMCell, ParameterStore, aspp_branch
from .tensor import ShapeError, Tensor


class CheckpointError(ValueError):
    """Raised on malformed or mismatched checkpoints."""


@dataclass
class ModelConfig:
    """Architecture hyperparameters and ablation toggles."""

    levels: int = 4
    base_width: int = 32
    width_cap: int = 256
    width_factor: float = 1.0
    branch_width: int = 64
    aspp_rates: tuple = (1, 6, 12, 18)
    aspp_image_pool: bool = True
    use_aspp: bool = True
    use_clf: bool = True
    use_inference: bool = True
    input_size: tuple = (224, 176)

    def level_width(self, level):
        """Channel count at encoder level (level == levels is the bottleneck)."""
        w = min(self.base_width * (2 ** level), self.width_cap)
        return max(1, int(round(w * self.width_factor)))

    @property
    def widths(self):
        return [self.level_width(l) for l in range(self.levels)]

    @property
    def bottleneck_width(self):
        return self.level_width(self.levels)

    @property
    def branch_channels(self):
        return max(1, int(round(self.branch_width * self.width_factor)))

    def branch_count(self):
        """Parallel pyramid branches feeding the fusion convolution."""
        n = len(self.aspp_rates) + (1 if self.aspp_image_pool else 0)
        if self.use_clf:
            n += self.levels
        return n

    def to_dict(self):
        return {
            "levels": str(self.levels),
            "base_width": str(self.base_width),
            "width_cap": str(self.width_cap),
            "width_factor": repr(self.width_factor),
            "branch_width": str(self.branch_width),
            "aspp_rates": ",".join(str(r) for r in self.aspp_rates),
            "aspp_image_pool": str(int(self.aspp_image_pool)),
            "use_aspp": str(int(self.use_aspp)),
            "use_clf": str(int(self.use_clf)),
            "use_inference": str(int(self.use_inference)),
            "input_size": f"{self.input_size[0]}x{self.input_size[1]}",
        }

    @classmethod
    def from_dict(cls, d):
        h, w = d["input_size"].split("x")
        return cls(
            levels=int(d["levels"]),
            base_width=int(d["base_width"]),
            width_cap=int(d["width_cap"]),
            width_factor=float(d["width_factor"]),
            branch_width=int(d["branch_width"]),
            aspp_rates=tuple(int(r) for r in d["aspp_rates"].split(",")),
            aspp_image_pool=bool(int(d["aspp_image_pool"])),
            use_aspp=bool(int(d["use_aspp"])),
            use_clf=bool(int(d["use_clf"])),
            use_inference=bool(int(d["use_inference"])),
            input_size=(int(h), int(w)),
        )


@dataclass
class EncoderTaps:
    """Per-level pre-downsample feature maps at scales 1/2^l."""

    own: list = field(default_factory=list)     # before cross-level aggregation
    fused: list = field(default_factory=list)   # after aggregation (skip/tap maps)
    bottleneck_input: Tensor | None = None


class CrossLevelContextNet:
    """Binary lesion segmentation network with a sigmoid probability head."""

    def __init__(self, config: ModelConfig, seed: int | None = 0,
                 init_policy="scaled", init_std=0.05):
        self.config = config
        self.store = ParameterStore()
        self.last_prefusion_channels = None
        self._build()
        if seed is not None:
            # imported late: the initializer lives with the training harness
            from .train import gaussian_init
            gaussian_init(self.store, policy=init_policy, seed=seed, std=init_std)

    # -- construction -------------------------------------------------------

    def _build(self):
        cfg = self.config
        widths = cfg.widths
        s = self.store
        self.enc_conv1 = []
        self.enc_conv2 = []
        self.enc_down = []
        self.clf_adapters = []  # per level: {source_level: ConvBlock}
        self.fused_channels = []
        c_in = 1
        for l in range(cfg.levels):
            w = widths[l]
            self.enc_conv1.append(ConvBlock(s, f"encoder.level{l}.conv1", c_in, w))
            self.enc_conv2.append(ConvBlock(s, f"encoder.level{l}.conv2", w, w))
            adapters = {}
            c_fused = w
            if cfg.use_clf:
                for j in range(l):
                    adapters[j] = ConvBlock(
                        s, f"encoder.level{l}.clf_adapter_from{j}",
                        widths[j], widths[j], k=1, stride=2 ** (l - j))
                    c_fused += widths[j]
            self.clf_adapters.append(adapters)
            self.fused_channels.append(c_fused)
            c_next = widths[l + 1] if l + 1 < cfg.levels else cfg.bottleneck_width
            self.enc_down.append(
                ConvBlock(s, f"encoder.level{l}.down", c_fused, c_next, stride=2))
            c_in = c_next

        wb = cfg.bottleneck_width
        if cfg.use_aspp:
            b = cfg.branch_channels
            self.aspp_blocks = []
            for r in cfg.aspp_rates:
                k = 1 if r == 1 else 3
                self.aspp_blocks.append((r, ConvBlock(
                    s, f"aspp.branch_rate{r}", wb, b, k=k, dilation=r)))
            self.aspp_pool_block = None
            if cfg.aspp_image_pool:
                self.aspp_pool_block = ConvBlock(s, "aspp.image_pool", wb, b, k=1)
            self.aspp_taps = []
            if cfg.use_clf:
                for l in range(cfg.levels):
                    self.aspp_taps.append(ConvBlock(
                        s, f"aspp.clf_tap{l}", self.fused_channels[l], b,
                        k=1, stride=2 ** (cfg.levels - l)))
            self.aspp_fuse = ConvBlock(
                s, "aspp.fuse", cfg.branch_count() * b, wb, k=1)
        else:
            # 1x1 so that enabling the pyramid strictly adds parameters
            self.bottleneck_plain = ConvBlock(s, "bottleneck.plain", wb, wb, k=1)

        self.dec = []
        c_prev = wb
        for l in reversed(range(cfg.levels)):
            w = widths[l]
            c_skip = self.fused_channels[l]
            if cfg.use_inference:
                level = {
                    "skip_adapter": ConvBlock(
                        s, f"decoder.level{l}.skip_adapter", c_skip, w, k=1),
                    "up_h_adapter": ConvBlock(
                        s, f"decoder.level{l}.up_h_adapter", c_prev, w, k=1),
                    "up_c_adapter": ConvBlock(
                        s, f"decoder.level{l}.up_c_adapter", c_prev, w, k=1,
                        activation="none"),
                    "lstm": ConvLSTMCell(s, f"decoder.level{l}.lstm", w, w),
                    "out": ConvBlock(s, f"decoder.level{l}.out", w, w),
                }
            else:
                level = {
                    "conv1": ConvBlock(
                        s, f"decoder.level{l}.conv1", c_skip + c_prev, w),
                    "conv2": ConvBlock(s, f"decoder.level{l}.conv2", w, w),
                }
            self.dec.append((l, level))
            c_prev = w

        # plain biased 1x1 conv: batch-normalizing the logits would force
        # them to zero mean, planting false positives on lesion-free slices
        self.head = ConvBlock(s, "head", widths[0], 1, k=1,
                              activation="none", normalize=False)

    # -- forward ------------------------------------------------------------

    def clf_aggregate(self, taps: EncoderTaps, target_level: int, mode: str):
        """Concat the level's own features with stride-adapted earlier taps."""
        own = taps.own[target_level]
        if not self.config.use_clf or target_level == 0:
            return own
        parts = [own]
        for j in range(target_level):
            adapted = self.clf_adapters[target_level][j](taps.own[j], mode)
            if adapted.shape[2:] != own.shape[2:]:
                raise ShapeError(
                    f"cross-level adapter {j}->{target_level} produced spatial "
                    f"shape {adapted.shape[2:]}, expected {own.shape[2:]}"
                )
            parts.append(adapted)
        return T.concat_channels(parts)

    def encode(self, image, mode):
        taps = EncoderTaps()
        x = image
        for l in range(self.config.levels):
            x = self.enc_conv1[l](x, mode)
            x = self.enc_conv2[l](x, mode)
            taps.own.append(x)
            fused = self.clf_aggregate(taps, l, mode)
            taps.fused.append(fused)
            x = self.enc_down[l](fused, mode)
        taps.bottleneck_input = x
        return taps

    def extended_aspp(self, bottleneck, taps, mode):
        """Parallel multi-rate branches plus image pooling and, with
        cross-level fusion enabled, one stride-adapted branch per encoder
        level; all concatenated and fused by a 1x1 block."""
        cfg = self.config
        h, w = bottleneck.shape[2], bottleneck.shape[3]
        branches = []
        for rate, block in self.aspp_blocks:
            branches.append(aspp_branch(bottleneck, rate, block, mode))
        if self.aspp_pool_block is not None:
            pooled = T.global_avg_pool(bottleneck)
            pooled = self.aspp_pool_block(pooled, mode)
            branches.append(T.broadcast_spatial(pooled, (h, w)))
        if cfg.use_clf:
            for l, tap_block in enumerate(self.aspp_taps):
                branches.append(tap_block(taps.fused[l], mode))
        stacked = T.concat_channels(branches)
        self.last_prefusion_channels = stacked.shape[1]
        return self.aspp_fuse(stacked, mode)

    def decode(self, bottleneck_out, taps, mode):
        """Level-by-level decoding; the level traversal is the ConvLSTM
        sequence, with state re-seeded from the upsampled decoder feature
        at each level (the cell seed uses its own adapter so the forget
        gate stays on the gradient path)."""
        cfg = self.config
        x = bottleneck_out
        from .blocks import ConvLSTMState
        for l, level in self.dec:
            up = T.upsample_bilinear(x, 2)
            skip = taps.fused[l]
            if cfg.use_inference:
                x_t = level["skip_adapter"](skip, mode)
                h0 = level["up_h_adapter"](up, mode)
                c0 = level["up_c_adapter"](up, mode)
                h_new, _ = level["lstm"].step(x_t, ConvLSTMState(h=h0, c=c0))
                x = level["out"](h_new, mode)
            else:
                x = T.concat_channels([skip, up])
                x = level["conv1"](x, mode)
                x = level["conv2"](x, mode)
        return x

    def forward(self, image, mode="train"):
        cfg = self.config
        n, c, h, w = image.shape
        scale = 2 ** cfg.levels
        if h % scale or w % scale:
            raise ShapeError(
                f"input spatial dims {h}x{w} must be divisible by {scale}"
            )
        if c != 1:
            raise ShapeError(f"expected single-channel input, got c={c}")
        taps = self.encode(image, mode)
        if cfg.use_aspp:
            bott = self.extended_aspp(taps.bottleneck_input, taps, mode)
        else:
            bott = self.bottleneck_plain(taps.bottleneck_input, mode)
        x = self.decode(bott, taps, mode)
        logits = self.head(x, mode)
        return T.sigmoid(logits)

    def __call__(self, image, mode="train"):
        return self.forward(image, mode)

    def parameter_count(self):
        return self.store.total_parameters()

    # -- checkpointing ------------------------------------------------------

    def save_checkpoint(self, directory):
        os.makedirs(os.path.join(directory, "tensors"), exist_ok=True)
        lines = ["format=lesionseg-checkpoint-v1"]
        for key, value in self.config.to_dict().items():
            lines.append(f"config.{key}={value}")
        for name, p in self.store.params.items():
            lines.append(f"param.{name}=" + ",".join(str(d) for d in p.shape))
            T.save_tensor(os.path.join(directory, "tensors", name + ".clct"), p)
        for name, b in self.store.buffers.items():
            lines.append(f"buffer.{name}={b.size}")
            T.save_tensor(os.path.join(directory, "tensors", name + ".clct"), b)
        with open(os.path.join(directory, "manifest.txt"), "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")

    @classmethod
    def load_checkpoint(cls, directory):
        manifest = os.path.join(directory, "manifest.txt")
        if not os.path.isfile(manifest):
            raise CheckpointError(f"missing manifest: {manifest}")
        config_d, params_d, buffers_d = {}, {}, {}
        with open(manifest, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line or "=" not in line:
                    continue
                key, value = line.split("=", 1)
                if key.startswith("config."):
                    config_d[key[len("config."):]] = value
                elif key.startswith("param."):
                    params_d[key[len("param."):]] = tuple(
                        int(d) for d in value.split(","))
                elif key.startswith("buffer."):
                    buffers_d[key[len("buffer."):]] = int(value)
        config = ModelConfig.from_dict(config_d)
        model = cls(config, seed=None)
        expected = set(model.store.params) | set(model.store.buffers)
        listed = set(params_d) | set(buffers_d)
        if expected != listed:
            missing = sorted(expected - listed)
            extra = sorted(listed - expected)
            raise CheckpointError(
                f"checkpoint name mismatch: missing={missing} extra={extra}"
            )
        for name, p in model.store.params.items():
            if params_d[name] != p.shape:
                raise CheckpointError(
                    f"shape mismatch for {name}: checkpoint {params_d[name]} "
                    f"vs model {p.shape}"
                )
            loaded = T.load_tensor(os.path.join(directory, "tensors", name + ".clct"))
            p.data[...] = loaded.data
        for name, b in model.store.buffers.items():
            if buffers_d[name] != b.size:
                raise CheckpointError(
                    f"size mismatch for buffer {name}: checkpoint "
                    f"{buffers_d[name]} vs model {b.size}"
                )
            loaded = T.load_tensor(os.path.join(directory, "tensors", name + ".clct"))
            b[...] = loaded.data.reshape(b.shape)
        return model


def instantiate_ablation(row, **config_overrides):
    """Build a model for one (use_aspp, use_clf, use_inference) matrix row."""
    use_aspp, use_clf, use_inference = (bool(v) for v in row)
    seed = config_overrides.pop("seed", 0)
    config = ModelConfig(use_aspp=use_aspp, use_clf=use_clf,
                         use_inference=use_inference, **config_overrides)
    return CrossLevelContextNet(config, seed=seed)
