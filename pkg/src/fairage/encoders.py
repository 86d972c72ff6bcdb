"""Style-code encoders.

Two encoders map images to 18x512 style-code matrices:

- :class:`AgeStyleEncoder` consumes a 4-channel image (RGB plus the constant
  age plane) through a small feature pyramid and three style heads.
- :class:`RaceAwareFaceEncoder` runs the frozen face pyramid and race
  backbones, fuses each face level with its race counterpart through a
  :class:`RaceFusionBlock`, augments every fused level with the upsampled
  previous one, and maps the three levels to style rows.

Both start from an identity-flavored initialization: the race fusion path
outputs exactly the face features at step 0 (zeroed fusion output, unit face
scale), so training begins from a pure face encoder and learns the race
injection from there.
"""

import torch
from torch import nn
from torch.nn import functional as F

from .core import (STYLE_DIM, STYLE_ROWS, ConfigError, ShapeError,
                   ValidationError, derive_seed, validate_image)
from .backbones import init_deterministic


class Map2StyleHead(nn.Module):
    """Stride-reducing conv stack mapping a feature map to ``rows`` style rows.

    The output projection is an equalized-learning-rate convolution: its raw
    weight is stored ``out_gain`` times smaller and rescaled at use, which
    multiplies the effective Adam step for the code-producing layer without
    changing the initial output distribution.
    """

    def __init__(self, in_ch: int, in_size: int, rows: int, hidden: int = 32,
                 out_gain: float = 1.0):
        super().__init__()
        if rows < 1:
            raise ConfigError(f"style head needs at least one row, got {rows}")
        size, layers, ch = in_size, [], in_ch
        while size > 4:
            layers += [nn.Conv2d(ch, hidden, 3, stride=2, padding=1), nn.GELU()]
            ch, size = hidden, size // 2
        if size != 4:
            raise ConfigError(f"head input size {in_size} does not reduce to 4 by halving")
        layers += [nn.Conv2d(ch, 2 * hidden, 4), nn.GELU()]
        self.reduce = nn.Sequential(*layers)
        self.out = nn.Conv2d(2 * hidden, rows * STYLE_DIM, 1)
        self.out_gain = out_gain
        self.rows = rows

    def rescale_for_gain(self):
        """Shrink the raw output weights so gain * raw matches the usual init."""
        with torch.no_grad():
            self.out.weight.div_(self.out_gain)
            self.out.bias.div_(self.out_gain)

    def forward(self, x):
        y = self.out(self.reduce(x)) * self.out_gain
        return y.view(x.shape[0], self.rows, STYLE_DIM)


class RaceFusionBlock(nn.Module):
    """Fuse one face level with its race counterpart.

    A transposed convolution equalizes the race map to the face map's shape,
    a small conv autoencoder fuses the pair, and a learnable scalar carries
    the face features past the fusion. The fusion output layer starts at
    zero and ``face_scale`` at one, so the block is an exact face
    pass-through at step 0.
    """

    def __init__(self, face_shape, race_shape, seed=0):
        super().__init__()
        (face_ch, face_size), (race_ch, race_size) = face_shape, race_shape
        if face_size < race_size or face_size % race_size:
            raise ShapeError(
                f"race map size {race_size} does not upsample to face map size {face_size}")
        stride = face_size // race_size
        if stride == 1:
            self.equalize = nn.Conv2d(race_ch, face_ch, 3, padding=1)
        else:
            self.equalize = nn.ConvTranspose2d(race_ch, face_ch, stride, stride=stride)
        self.fuse_in = nn.Conv2d(2 * face_ch, face_ch, 3, stride=2, padding=1)
        self.fuse_out = nn.ConvTranspose2d(face_ch, face_ch, 4, stride=2, padding=1)
        self.face_scale = nn.Parameter(torch.tensor(0.0))
        init_deterministic(self, seed)
        with torch.no_grad():
            self.fuse_out.weight.zero_()
            self.fuse_out.bias.zero_()
            self.face_scale.fill_(1.0)
        self._face_shape = (face_ch, face_size)
        self._race_shape = (race_ch, race_size)

    def forward(self, face, race):
        if tuple(face.shape[-3:]) != (*self._face_shape[:1], self._face_shape[1], self._face_shape[1]):
            raise ShapeError(f"face map shape {tuple(face.shape[-3:])} does not match "
                             f"configured {self._face_shape}")
        if tuple(race.shape[-3:]) != (*self._race_shape[:1], self._race_shape[1], self._race_shape[1]):
            raise ShapeError(f"race map shape {tuple(race.shape[-3:])} does not match "
                             f"configured {self._race_shape}")
        equalized = self.equalize(race)
        fused = self.fuse_out(F.gelu(self.fuse_in(torch.cat([face, equalized], dim=1))))
        return fused + self.face_scale * face


class RaceAwareFaceEncoder(nn.Module):
    """Face encoder that injects race features level by level.

    ``bypass=True`` skips the fusion entirely (exact face pass-through),
    which is the path the full-face reconstruction uses.
    """

    def __init__(self, face_net, race_net, head_split=(3, 4, 11), seed=0, image_size=256):
        super().__init__()
        if sum(head_split) != STYLE_ROWS or len(head_split) != 3:
            raise ConfigError(f"head_split must be three counts summing to {STYLE_ROWS}")
        self.face_net = face_net
        self.race_net = race_net
        self.image_size = image_size
        face_shapes = face_net.level_shapes(image_size)
        race_shapes = race_net.tap_shapes(image_size)
        self.mixers = nn.ModuleList(
            RaceFusionBlock(face_shapes[i], race_shapes[i], seed=derive_seed(seed, "mixer", i))
            for i in range(3))
        heads = []
        for i, rows in enumerate(head_split):
            in_ch = face_shapes[i][0] + (face_shapes[i - 1][0] if i > 0 else 0)
            heads.append(Map2StyleHead(in_ch, face_shapes[i][1], rows))
        self.heads = nn.ModuleList(heads)
        for i, head in enumerate(self.heads):
            init_deterministic(head, derive_seed(seed, "head", i))
            head.rescale_for_gain()

    def forward(self, x, bypass: bool = False):
        batched = x.dim() == 4
        xs = x if batched else x.unsqueeze(0)
        validate_image(xs, channels=3, name="face encoder input")
        if tuple(xs.shape[-2:]) != (self.image_size, self.image_size):
            raise ShapeError(f"face encoder expects {self.image_size}x{self.image_size} input, "
                             f"got {tuple(xs.shape[-2:])}")
        faces = self.face_net(xs)
        races = self.race_net(xs)[:3]
        levels = []
        for i in range(3):
            levels.append(faces[i] if bypass else self.mixers[i](faces[i], races[i]))
        rows = []
        previous = None
        for i, head in enumerate(self.heads):
            fused = levels[i]
            if previous is not None:
                up = F.interpolate(previous, size=fused.shape[-2:], mode="bilinear",
                                   align_corners=False)
                fused = torch.cat([fused, up], dim=1)
            rows.append(head(fused))
            previous = levels[i]
        codes = torch.cat(rows, dim=1)
        return codes if batched else codes.squeeze(0)


class AgeStyleEncoder(nn.Module):
    """Pyramid encoder over the age-augmented 4-channel image."""

    def __init__(self, head_split=(3, 4, 11), seed=0, image_size=256):
        super().__init__()
        if sum(head_split) != STYLE_ROWS or len(head_split) != 3:
            raise ConfigError(f"head_split must be three counts summing to {STYLE_ROWS}")
        self.image_size = image_size
        self.stem = nn.Sequential(nn.Conv2d(4, 16, 4, stride=4), nn.GELU())
        self.down2 = nn.Sequential(nn.Conv2d(16, 24, 3, stride=2, padding=1), nn.GELU())
        self.down1 = nn.Sequential(nn.Conv2d(24, 32, 3, stride=2, padding=1), nn.GELU())
        base = image_size // 16
        channels = [(32, base), (24, base * 2), (16, base * 4)]
        self.heads = nn.ModuleList(
            Map2StyleHead(ch, size, rows) for (ch, size), rows in zip(channels, head_split))
        init_deterministic(self, seed)
        for head in self.heads:
            head.rescale_for_gain()

    def forward(self, x):
        batched = x.dim() == 4
        xs = x if batched else x.unsqueeze(0)
        if xs.dim() != 4:
            raise ShapeError(f"age encoder input must be (4,H,W) or (B,4,H,W), got {tuple(x.shape)}")
        if xs.shape[1] == 3:
            raise ValidationError("age encoder input is missing the age channel "
                                  "(append it before encoding)")
        validate_image(xs, channels=4, name="age encoder input")
        if tuple(xs.shape[-2:]) != (self.image_size, self.image_size):
            raise ShapeError(f"age encoder expects {self.image_size}x{self.image_size} input, "
                             f"got {tuple(xs.shape[-2:])}")
        fine = self.stem(xs)
        mid = self.down2(fine)
        coarse = self.down1(mid)
        rows = [head(level) for head, level in zip(self.heads, (coarse, mid, fine))]
        codes = torch.cat(rows, dim=1)
        return codes if batched else codes.squeeze(0)
