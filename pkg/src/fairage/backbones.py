"""Frozen feature extractors behind uniform interfaces.

Four backbones feed the encoders, the losses, and the evaluation harness:

- :class:`RaceFeatureNet`    race features; taps three intermediate blocks and
  exposes the pre-classifier embedding plus 4-way race logits
- :class:`FacePyramidNet`    three face feature maps, coarse to fine
- :class:`IdentityEmbedder`  identity embedding
- :class:`AgeFeatureNet`     age-sensitive embedding plus an expected-value
  age estimate over integer years 0..100

Each backbone is either a deterministic toy instantiation (weights drawn
from a seeded generator, then frozen) or the same architecture loaded from a
weight container via ``load_weights``. Frozen means: parameters take no
gradient, but gradients still flow through to the inputs, which the losses
rely on.
"""

import torch
from torch import nn
from torch.nn import functional as F

from .core import ConfigError, derive_seed, validate_image
from . import weights as weightio

EMBED_DIM = 64
EMBED_SCALE = 8.0  # embeddings live on a sphere of this radius
AGE_BINS = 101  # integer years 0..100


def init_deterministic(module: nn.Module, seed: int) -> None:
    """Fill all parameters from one seeded stream, in sorted name order."""
    g = torch.Generator()
    g.manual_seed(int(seed))
    for name, p in sorted(module.named_parameters(), key=lambda kv: kv[0]):
        with torch.no_grad():
            if p.dim() >= 2:
                fan_in = p[0].numel()
                draw = torch.randn(p.shape, generator=g, dtype=torch.float32)
                p.copy_((draw * (1.6 / fan_in ** 0.5)).to(p.dtype))
            else:
                p.zero_()


def freeze(module: nn.Module) -> nn.Module:
    module.requires_grad_(False)
    module.eval()
    return module


def _ensure_batch(x: torch.Tensor):
    if x.dim() == 3:
        return x.unsqueeze(0), False
    return x, True


def _unbatch(t: torch.Tensor, batched: bool) -> torch.Tensor:
    return t if batched else t.squeeze(0)


class _Block(nn.Module):
    """3x3 conv + GELU with a variance-preserving skip whenever shapes allow."""

    _SKIP_SCALE = 0.5 ** 0.5

    def __init__(self, in_ch, out_ch, stride=1):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1)
        self.skip = in_ch == out_ch and stride == 1

    def forward(self, x):
        y = F.gelu(self.conv(x))
        return (x + y) * self._SKIP_SCALE if self.skip else y


class RaceFeatureNet(nn.Module):
    """Residual-style race network with tapped intermediate features.

    ``forward`` returns the three tapped maps (ordered coarse-compatible with
    the face pyramid pairing) plus the pooled pre-classifier embedding.
    """

    # (width, stride) per block; taps default to blocks 7, 13, 15 (1-based)
    BLOCK_PLAN = [
        (24, 1), (24, 1), (24, 1), (24, 1), (24, 1), (24, 1), (64, 1),     # blocks 1-7
        (48, 2), (48, 1), (48, 1), (48, 1), (48, 1), (128, 1),             # blocks 8-13
        (96, 2), (256, 1), (128, 1),                                       # blocks 14-16
    ]

    def __init__(self, taps=(7, 13, 15), seed=0):
        super().__init__()
        n = len(self.BLOCK_PLAN)
        if not all(1 <= t <= n for t in taps) or list(taps) != sorted(set(taps)):
            raise ConfigError(f"race taps must be distinct ascending block indices in 1..{n}, got {taps}")
        self.taps = tuple(taps)
        self.stem = nn.Sequential(nn.Conv2d(3, 24, 8, stride=8), nn.GELU(),
                                  nn.Conv2d(24, 32, 3, stride=2, padding=1), nn.GELU())
        blocks = []
        ch = 32
        for width, stride in self.BLOCK_PLAN:
            blocks.append(_Block(ch, width, stride))
            ch = width
        self.blocks = nn.ModuleList(blocks)
        self.embed = nn.Linear(ch, EMBED_DIM)
        self.head = nn.Linear(EMBED_DIM, 4)
        init_deterministic(self, seed)
        freeze(self)

    def tap_shapes(self, image_size=256):
        """Channel/size of each tapped map, derived without running data."""
        size = image_size // 16
        shapes = []
        ch = 32
        taps = {}
        for index, (width, stride) in enumerate(self.BLOCK_PLAN, start=1):
            size //= stride
            ch = width
            if index in self.taps:
                taps[index] = (ch, size)
        return [taps[t] for t in self.taps]

    def forward(self, x):
        x, batched = _ensure_batch(x)
        validate_image(x, channels=3, name="race input")
        h = self.stem(x)
        tapped = {}
        for index, block in enumerate(self.blocks, start=1):
            h = block(h)
            if index in self.taps:
                tapped[index] = h
        pooled = h.mean(dim=(2, 3))
        emb = EMBED_SCALE * F.normalize(self.embed(pooled), dim=-1)
        outs = [tapped[t] for t in self.taps] + [emb]
        return tuple(_unbatch(o, batched) for o in outs)

    def embedding(self, x):
        return self.forward(x)[-1]

    def logits(self, x):
        """4-way race logits over the embedding (used by the eval classifier)."""
        return _unbatch(self.head(self.embedding(_ensure_batch(x)[0])), x.dim() == 4)


class FacePyramidNet(nn.Module):
    """Face feature pyramid: three maps with doubling spatial size."""

    # (channels, spatial) for 256 input: p1 coarse 16x16, p2 32x32, p3 fine 64x64
    LEVEL_CHANNELS = (32, 24, 16)

    def __init__(self, seed=0):
        super().__init__()
        c1, c2, c3 = self.LEVEL_CHANNELS
        self.stem = nn.Sequential(nn.Conv2d(3, 16, 4, stride=4), nn.GELU())
        self.down2 = nn.Sequential(nn.Conv2d(16, 24, 3, stride=2, padding=1), nn.GELU())
        self.down1 = nn.Sequential(nn.Conv2d(24, 32, 3, stride=2, padding=1), nn.GELU())
        self.proj3 = nn.Conv2d(16, c3, 1)
        self.proj2 = nn.Conv2d(24, c2, 1)
        self.proj1 = nn.Conv2d(32, c1, 1)
        init_deterministic(self, seed)
        freeze(self)

    def level_shapes(self, image_size=256):
        c1, c2, c3 = self.LEVEL_CHANNELS
        s = image_size // 16
        return [(c1, s), (c2, s * 2), (c3, s * 4)]

    def forward(self, x):
        x, batched = _ensure_batch(x)
        validate_image(x, channels=3, name="pyramid input")
        f3 = self.stem(x)
        f2 = self.down2(f3)
        f1 = self.down1(f2)
        p1, p2, p3 = self.proj1(f1), self.proj2(f2), self.proj3(f3)
        return tuple(_unbatch(p, batched) for p in (p1, p2, p3))


class _VectorNet(nn.Module):
    """Shared trunk for the identity and age embedders."""

    def __init__(self, seed=0, extra_head=None):
        super().__init__()
        self.trunk = nn.Sequential(
            nn.Conv2d(3, 24, 8, stride=8), nn.GELU(),
            nn.Conv2d(24, 48, 3, stride=2, padding=1), nn.GELU(),
            nn.Conv2d(48, 64, 3, stride=2, padding=1), nn.GELU(),
        )
        self.embed = nn.Linear(64, EMBED_DIM)
        if extra_head is not None:
            self.extra = extra_head
        init_deterministic(self, seed)
        freeze(self)

    def forward(self, x):
        x, batched = _ensure_batch(x)
        validate_image(x, channels=3, name="embedder input")
        h = self.trunk(x).mean(dim=(2, 3))
        return _unbatch(EMBED_SCALE * F.normalize(self.embed(h), dim=-1), batched)


class IdentityEmbedder(_VectorNet):
    """Identity embedding used by the identity loss and the cosine metrics."""


class AgeFeatureNet(_VectorNet):
    """Age feature embedding plus an expected-value age estimate.

    The estimate head is deliberately uncalibrated at toy scale; reports that
    use it carry a disclaimer.
    """

    def __init__(self, seed=0):
        super().__init__(seed, extra_head=nn.Linear(EMBED_DIM, AGE_BINS))

    def estimate_age(self, x):
        emb = self.forward(x)
        logits = self.extra(emb if emb.dim() == 2 else emb.unsqueeze(0))
        years = torch.arange(AGE_BINS, dtype=logits.dtype)
        estimate = (logits.softmax(dim=-1) * years).sum(dim=-1)
        return estimate if x.dim() == 4 else estimate.squeeze(0)


_KINDS = {
    "race": lambda cfg, seed: RaceFeatureNet(taps=cfg.race_taps, seed=seed),
    "pyramid": lambda cfg, seed: FacePyramidNet(seed=seed),
    "identity": lambda cfg, seed: IdentityEmbedder(seed=seed),
    "age": lambda cfg, seed: AgeFeatureNet(seed=seed),
}


def build_backbone(kind: str, source: str, config) -> nn.Module:
    """Build one backbone from ``source``: ``"toy"`` or a weight container path."""
    if kind not in _KINDS:
        raise ConfigError(f"unknown backbone kind {kind!r}, expected one of {sorted(_KINDS)}")
    net = _KINDS[kind](config, derive_seed(config.toy_seed, "backbone", kind))
    if source != "toy":
        weightio.load_module(source, net)
        freeze(net)
    return net


def build_all_backbones(config, sources=None) -> dict:
    """Build the full backbone set; ``sources`` maps kind -> 'toy' or path."""
    sources = sources or {}
    return {kind: build_backbone(kind, sources.get(kind, "toy"), config) for kind in _KINDS}
