"""Dual-stream U-Net: shared encoder, segmentation and super-resolution decoders,
task heads, and the multi-scale attention fusion (MAF) module.

Four variants are supported, each a superset of the previous one:

* ``baseline``       segmentation U-Net predicting at input resolution
* ``interp``         same network, logits upsampled x N
* ``interp_sr``      adds the SR decoder and sub-pixel SR head
* ``interp_sr_maf``  adds MAF, whose re-weighted features go through the
  stream heads a second time (shared weights)
"""

from __future__ import annotations

import enum
from dataclasses import asdict, dataclass
from typing import Iterator

import numpy as np

from .engine import RunningStats, TensorND, no_grad, ops


class Variant(str, enum.Enum):
    BASELINE = "baseline"
    INTERP = "interp"
    INTERP_SR = "interp_sr"
    INTERP_SR_MAF = "interp_sr_maf"

    @classmethod
    def parse(cls, value) -> "Variant":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("+", "_").replace("-", "_")
        aliases = {"interpsr": "interp_sr", "interpsrmaf": "interp_sr_maf", "unet": "baseline"}
        key = aliases.get(key, key)
        try:
            return cls(key)
        except ValueError:
            raise ValueError(f"unknown variant {value!r}; expected one of "
                             f"{', '.join(v.value for v in cls)}") from None

    @property
    def upsamples(self) -> bool:
        return self is not Variant.BASELINE

    @property
    def has_sr(self) -> bool:
        return self in (Variant.INTERP_SR, Variant.INTERP_SR_MAF)

    @property
    def has_maf(self) -> bool:
        return self is Variant.INTERP_SR_MAF


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int = 3
    num_classes: int = 2
    upscale: int = 2
    base_width: int = 16
    depth: int = 3
    fusion_dim: int = 32
    ssc_groups: int = 4
    sr_hidden: int = 32
    variant: Variant = Variant.INTERP_SR_MAF
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant.parse(self.variant))
        if self.ssc_groups < 2 or self.fusion_dim % self.ssc_groups:
            raise ValueError(f"fusion_dim {self.fusion_dim} must be divisible by ssc_groups "
                             f"{self.ssc_groups} (>= 2)")
        if self.upscale < 1:
            raise ValueError("upscale must be >= 1")
        if self.depth < 2:
            raise ValueError("depth must be >= 2")
        if min(self.in_channels, self.num_classes, self.base_width, self.sr_hidden) < 1:
            raise ValueError("channel counts must be positive")

    @property
    def widths(self) -> list[int]:
        return [self.base_width * 2 ** i for i in range(self.depth)]

    @property
    def divisor(self) -> int:
        return 2 ** (self.depth - 1)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["variant"] = self.variant.value
        return d


# parameter groups each variant needs
GROUPS = {
    Variant.BASELINE: ("encoder", "seg_decoder", "seg_head"),
    Variant.INTERP: ("encoder", "seg_decoder", "seg_head"),
    Variant.INTERP_SR: ("encoder", "seg_decoder", "seg_head", "sr_decoder", "sr_head"),
    Variant.INTERP_SR_MAF: ("encoder", "seg_decoder", "seg_head", "sr_decoder", "sr_head", "maf"),
}


class ParamStore:
    """Named learnable tensors plus batch-norm running statistics.

    Names are unique. ``aliases`` maps extra names onto existing entries;
    an alias resolves to the very same tensor object, never a copy.
    """

    def __init__(self):
        self.params: dict[str, TensorND] = {}
        self.no_decay: set[str] = set()
        self.buffers: dict[str, RunningStats] = {}
        self.aliases: dict[str, str] = {}

    def add(self, name: str, value: np.ndarray, decay: bool = True) -> TensorND:
        if name in self.params or name in self.aliases:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = TensorND(value, requires_grad=True, name=name)
        self.params[name] = t
        if not decay:
            self.no_decay.add(name)
        return t

    def add_buffer(self, name: str, stats: RunningStats) -> RunningStats:
        if name in self.buffers:
            raise KeyError(f"duplicate buffer name {name!r}")
        self.buffers[name] = stats
        return stats

    def alias(self, name: str, target: str) -> None:
        if target not in self.params:
            raise KeyError(target)
        self.aliases[name] = target

    def __getitem__(self, name: str) -> TensorND:
        return self.params[self.aliases.get(name, name)]

    def __contains__(self, name: str) -> bool:
        return name in self.params or name in self.aliases

    def __iter__(self) -> Iterator[str]:
        return iter(self.params)

    def __len__(self) -> int:
        return len(self.params)

    def names(self) -> list[str]:
        return list(self.params)

    def tensors(self) -> list[TensorND]:
        return list(self.params.values())

    def decays(self, name: str) -> bool:
        return name not in self.no_decay

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {f"param/{k}": v.data for k, v in self.params.items()}
        for k, s in self.buffers.items():
            out[f"buffer/{k}.running_mean"] = s.mean
            out[f"buffer/{k}.running_var"] = s.var
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        expected = set(self.state_arrays())
        got = {k for k in arrays if k.startswith(("param/", "buffer/"))}
        if got != expected:
            missing, extra = sorted(expected - got), sorted(got - expected)
            raise KeyError(f"state mismatch: missing {missing[:5]}, unexpected {extra[:5]}")
        for k, p in self.params.items():
            src = arrays[f"param/{k}"]
            if src.shape != p.shape:
                raise ValueError(f"{k}: stored shape {src.shape} != {p.shape}")
            p.data[...] = src
        for k, s in self.buffers.items():
            s.mean = np.array(arrays[f"buffer/{k}.running_mean"], dtype=float)
            s.var = np.array(arrays[f"buffer/{k}.running_var"], dtype=float)


# -- layers ----------------------------------------------------------------

class Conv:
    def __init__(self, store: ParamStore, rng: np.random.Generator, name: str, cin: int, cout: int,
                 k: int = 3, dilation: int = 1, bias: bool = True):
        fan_in = cin * k * k
        self.weight = store.add(f"{name}.weight", rng.normal(0.0, np.sqrt(2.0 / fan_in), (cout, cin, k, k)))
        self.bias = store.add(f"{name}.bias", np.zeros(cout), decay=False) if bias else None
        self.dilation = dilation
        self.padding = dilation * (k - 1) // 2

    def __call__(self, x: TensorND) -> TensorND:
        return ops.conv2d(x, self.weight, self.bias, padding=self.padding, dilation=self.dilation)


class BatchNorm:
    def __init__(self, store: ParamStore, name: str, channels: int, momentum: float, eps: float):
        self.gamma = store.add(f"{name}.gamma", np.ones(channels), decay=False)
        self.beta = store.add(f"{name}.beta", np.zeros(channels), decay=False)
        self.stats = store.add_buffer(name, RunningStats(channels, momentum))
        self.eps = eps

    def __call__(self, x: TensorND, training: bool) -> TensorND:
        return ops.batch_norm(x, self.gamma, self.beta, self.stats, training, self.eps)


class ConvBNReLU:
    def __init__(self, store, rng, name, cin, cout, cfg: ModelConfig):
        self.conv = Conv(store, rng, f"{name}.conv", cin, cout, bias=False)
        self.bn = BatchNorm(store, f"{name}.bn", cout, cfg.bn_momentum, cfg.bn_eps)

    def __call__(self, x, training):
        return ops.relu(self.bn(self.conv(x), training))


class Decoder:
    """Mirror of the encoder: bilinear x2, concat skip, two conv blocks per level."""

    def __init__(self, store, rng, name, cfg: ModelConfig):
        w = cfg.widths
        self.levels = []
        for i in range(cfg.depth - 2, -1, -1):
            self.levels.append((
                ConvBNReLU(store, rng, f"{name}.level{i}.block0", w[i + 1] + w[i], w[i], cfg),
                ConvBNReLU(store, rng, f"{name}.level{i}.block1", w[i], w[i], cfg),
            ))

    def __call__(self, f_en, skips, training):
        x = f_en
        for (b0, b1), skip in zip(self.levels, reversed(skips[:-1])):
            x = ops.concat([ops.interpolate_bilinear(x, 2), skip], axis=1)
            x = b1(b0(x, training), training)
        return x


class SegHead:
    """1x1 conv to class logits, then bilinear upsampling by ``scale``."""

    def __init__(self, store, rng, cfg: ModelConfig):
        self.conv = Conv(store, rng, "seg_head", cfg.base_width, cfg.num_classes, k=1)
        self.scale = cfg.upscale

    def __call__(self, f, upsample: bool = True):
        logits = self.conv(f)
        if upsample and self.scale > 1:
            logits = ops.interpolate_bilinear(logits, self.scale)
        return logits


class SRHead:
    """Sub-pixel head: conv3x3 + ReLU, conv3x3 to 3*N*N channels, pixel shuffle."""

    def __init__(self, store, rng, cfg: ModelConfig):
        self.conv1 = Conv(store, rng, "sr_head.conv1", cfg.base_width, cfg.sr_hidden)
        self.conv2 = Conv(store, rng, "sr_head.conv2", cfg.sr_hidden, 3 * cfg.upscale ** 2)
        self.scale = cfg.upscale

    def __call__(self, f):
        return ops.pixel_shuffle(self.conv2(ops.relu(self.conv1(f))), self.scale)


class SSC:
    """Split spatial convolution over ``groups`` channel groups.

    Group 1 gets a 1x1 conv; group g >= 2 a 3x3 conv with dilation g - 1.
    Outputs are concatenated in order and batch-normalized.
    """

    def __init__(self, store, rng, cfg: ModelConfig):
        d, k = cfg.fusion_dim, cfg.ssc_groups
        self.width = d // k
        self.convs = [Conv(store, rng, "maf.ssc.group1", self.width, self.width, k=1, bias=False)]
        for g in range(2, k + 1):
            self.convs.append(Conv(store, rng, f"maf.ssc.group{g}", self.width, self.width,
                                   k=3, dilation=g - 1, bias=False))
        self.bn = BatchNorm(store, "maf.ssc.bn", d, cfg.bn_momentum, cfg.bn_eps)

    def __call__(self, x, training):
        parts = [conv(ops.take_channels(x, g * self.width, (g + 1) * self.width))
                 for g, conv in enumerate(self.convs)]
        return self.bn(ops.concat(parts, axis=1), training)


class MAF:
    def __init__(self, store, rng, cfg: ModelConfig):
        c = cfg.base_width
        self.align = Conv(store, rng, "maf.align", 2 * c, cfg.fusion_dim, k=1)
        self.ssc = SSC(store, rng, cfg)
        self.att_seg = Conv(store, rng, "maf.att_seg", cfg.fusion_dim, c, k=1)
        self.att_sr = Conv(store, rng, "maf.att_sr", cfg.fusion_dim, c, k=1)

    def __call__(self, f_seg, f_sr, training):
        if f_seg.shape != f_sr.shape:
            raise ValueError(f"MAF: feature shapes differ, {f_seg.shape} vs {f_sr.shape}")
        fused = self.ssc(self.align(ops.concat([f_seg, f_sr], axis=1)), training)
        w_seg = ops.sigmoid(self.att_seg(fused))
        w_sr = ops.sigmoid(self.att_sr(fused))
        rw_seg = ops.add(ops.mul(w_seg, f_seg), f_seg)
        rw_sr = ops.add(ops.mul(w_sr, f_sr), f_sr)
        return rw_seg, rw_sr, w_seg, w_sr


@dataclass
class ForwardBundle:
    o_seg: TensorND
    f_seg: TensorND
    o_sr: TensorND | None = None
    f_sr: TensorND | None = None
    o_fuseg: TensorND | None = None
    o_fusr: TensorND | None = None
    w_seg: TensorND | None = None
    w_sr: TensorND | None = None


class SSMAFNet:
    def __init__(self, config: ModelConfig, store: ParamStore, rng: np.random.Generator):
        cfg = self.config = config
        self.store = store
        w = cfg.widths
        self.encoder = []
        cin = cfg.in_channels
        for i, wi in enumerate(w):
            self.encoder.append((
                ConvBNReLU(store, rng, f"encoder.stage{i}.block0", cin, wi, cfg),
                ConvBNReLU(store, rng, f"encoder.stage{i}.block1", wi, wi, cfg),
            ))
            cin = wi
        self.seg_decoder = Decoder(store, rng, "seg_decoder", cfg)
        self.seg_head = SegHead(store, rng, cfg)
        self.sr_decoder = self.sr_head = self.maf = None
        if cfg.variant.has_sr:
            self.sr_decoder = Decoder(store, rng, "sr_decoder", cfg)
            self.sr_head = SRHead(store, rng, cfg)
        if cfg.variant.has_maf:
            self.maf = MAF(store, rng, cfg)
            # the fusion branch reuses the stream heads
            for head in ("seg_head", "sr_head.conv1", "sr_head.conv2"):
                for part in ("weight", "bias"):
                    store.alias(f"maf.{head}.{part}", f"{head}.{part}")
        self.fused_seg_head = self.seg_head
        self.fused_sr_head = self.sr_head

    @property
    def variant(self) -> Variant:
        return self.config.variant

    def parameters(self) -> list[TensorND]:
        return self.store.tensors()

    def _check_input(self, x) -> TensorND:
        x = x if isinstance(x, TensorND) else TensorND(x)
        if x.ndim == 3:
            x = TensorND._wrap(x.data[None])
        if x.ndim != 4 or x.shape[1] != self.config.in_channels:
            raise ValueError(f"expected (B, {self.config.in_channels}, H, W) input, got {x.shape}")
        div = self.config.divisor
        H, W = x.shape[2:]
        if H % div or W % div:
            raise ValueError(f"input extent {H}x{W} must be divisible by 2^(depth-1) = {div}")
        return x

    def encode(self, x, training: bool = True) -> tuple[TensorND, list[TensorND]]:
        """Shared encoder; returns the deepest features and one skip per stage."""
        h = self._check_input(x)
        skips = []
        for i, (b0, b1) in enumerate(self.encoder):
            if i > 0:
                h = ops.max_pool2d(h, 2)
            h = b1(b0(h, training), training)
            skips.append(h)
        return h, skips

    def decode_seg(self, f_en, skips, training: bool = True) -> TensorND:
        return self.seg_decoder(f_en, skips, training)

    def decode_sr(self, f_en, skips, training: bool = True) -> TensorND:
        if self.sr_decoder is None:
            raise ValueError(f"variant {self.variant.value} has no SR decoder")
        return self.sr_decoder(f_en, skips, training)

    def forward_train(self, x, variant=None, training: bool = True) -> ForwardBundle:
        variant = self.variant if variant is None else Variant.parse(variant)
        if GROUPS[variant] != GROUPS[self.variant]:
            raise ValueError(f"model built for {self.variant.value} cannot run variant {variant.value}")
        f_en, skips = self.encode(x, training)
        f_seg = self.decode_seg(f_en, skips, training)
        o_seg = self.seg_head(f_seg, upsample=variant.upsamples)
        bundle = ForwardBundle(o_seg=o_seg, f_seg=f_seg)
        if variant.has_sr:
            bundle.f_sr = self.decode_sr(f_en, skips, training)
            bundle.o_sr = self.sr_head(bundle.f_sr)
        if variant.has_maf:
            rw_seg, rw_sr, bundle.w_seg, bundle.w_sr = self.maf(f_seg, bundle.f_sr, training)
            bundle.o_fuseg = self.fused_seg_head(rw_seg)
            bundle.o_fusr = self.fused_sr_head(rw_sr)
        return bundle

    def forward_infer(self, x) -> TensorND:
        """Segmentation probabilities from the segmentation stream alone (eval mode)."""
        with no_grad():
            f_en, skips = self.encode(x, training=False)
            f_seg = self.decode_seg(f_en, skips, training=False)
            logits = self.seg_head(f_seg, upsample=self.variant.upsamples)
            return ops.softmax(logits, axis=1)


def build_model(config: ModelConfig, seed: int = 0) -> tuple[ParamStore, SSMAFNet]:
    """Deterministically initialise a network (He-normal convs, zero biases, unit BN)."""
    store = ParamStore()
    rng = np.random.default_rng(seed)
    return store, SSMAFNet(config, store, rng)
