"""Style mixing and image synthesis.

:class:`StyleCodeMixer` blends the age and face style codes row by row with
learnable gates and per-row linear transforms; at initialization it is the
exact average of the two inputs.

:class:`StyleGenerator` is a compact style-based synthesis network: a learned
4x4 constant followed by 18 modulated convolutions (one style row each, six
of them upsampling) and a final tanh, so outputs always lie in [-1, 1]. The
stochastic noise inputs of the usual design are fixed at zero, which makes
generation bit-deterministic. Frozen by default; pass ``frozen=False`` to
fine-tune it.

:class:`FaceAgingModel` wires the encoders, the mixer, and the generator into
the full transform, and exposes the race-free reconstruction path used to
turn mirror-padded crops back into full faces.
"""

import torch
from torch import nn
from torch.nn import functional as F

from .core import (STYLE_DIM, STYLE_ROWS, ShapeError, ValidationError,
                   append_age_channel, derive_seed, validate_age,
                   validate_image, validate_style_codes)
from .backbones import freeze, init_deterministic
from .encoders import AgeStyleEncoder, RaceAwareFaceEncoder


class StyleCodeMixer(nn.Module):
    """Gated per-row blend of age and face style codes.

    ``out[r] = sigmoid(g[r]) * A[r](age[r]) + (1 - sigmoid(g[r])) * B[r](face[r])``

    Each per-row transform is identity plus a scaled residual map,
    ``A[r](s) = s + lr_mul * dA[r] @ s`` with ``dA`` starting at zero, so the
    initial output is exactly ``(age + face) / 2``. The residual multiplier
    is the usual equalized-learning-rate device: Adam steps raw parameters
    by about the learning rate, so the multiplier sets how far one step
    actually moves the codes.
    """

    def __init__(self, lr_mul: float = 8.0, gate_mul: float = 64.0):
        super().__init__()
        self.lr_mul = lr_mul
        self.gate_mul = gate_mul
        self.gate = nn.Parameter(torch.zeros(STYLE_ROWS))
        self.age_transform = nn.Parameter(torch.zeros(STYLE_ROWS, STYLE_DIM, STYLE_DIM))
        self.face_transform = nn.Parameter(torch.zeros(STYLE_ROWS, STYLE_DIM, STYLE_DIM))

    def _apply_transform(self, residual, s):
        return s + self.lr_mul * torch.einsum("rij,brj->bri", residual, s)

    def forward(self, s_age, s_face):
        if s_age.shape != s_face.shape:
            raise ShapeError(f"style code shapes differ: {tuple(s_age.shape)} "
                             f"vs {tuple(s_face.shape)}")
        validate_style_codes(s_age, "age style codes")
        validate_style_codes(s_face, "face style codes")
        batched = s_age.dim() == 3
        if not batched:
            s_age, s_face = s_age.unsqueeze(0), s_face.unsqueeze(0)
        a = self._apply_transform(self.age_transform, s_age)
        b = self._apply_transform(self.face_transform, s_face)
        g = torch.sigmoid(self.gate_mul * self.gate).view(1, STYLE_ROWS, 1)
        mixed = g * a + (1.0 - g) * b
        return mixed if batched else mixed.squeeze(0)


class ModulatedConv2d(nn.Module):
    """Convolution whose kernel is scaled per-sample by an affine of the style."""

    def __init__(self, in_ch, out_ch, kernel, up=False, demodulate=True):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(out_ch, in_ch, kernel, kernel))
        self.bias = nn.Parameter(torch.zeros(out_ch))
        self.affine = nn.Linear(STYLE_DIM, in_ch)
        self.kernel = kernel
        self.up = up
        self.demodulate = demodulate

    def forward(self, x, style):
        b, in_ch, _, _ = x.shape
        mod = self.affine(style)
        # scaling the input per channel is exactly kernel modulation, but runs
        # as one plain convolution instead of a batch-grouped one
        x = x * mod.view(b, in_ch, 1, 1)
        if self.up:
            x = F.interpolate(x, scale_factor=2, mode="nearest")
        y = F.conv2d(x, self.weight, padding=self.kernel // 2)
        if self.demodulate:
            kernel_sq = self.weight.pow(2).sum(dim=(2, 3))
            denom = torch.rsqrt(mod.pow(2) @ kernel_sq.t() + 1e-8)
            y = y * denom.view(b, -1, 1, 1)
        return y + self.bias.view(1, -1, 1, 1)


class StyleGenerator(nn.Module):
    """18-layer modulated-convolution generator from a learned 4x4 constant."""

    # (out channels, upsample) per layer; the last layer renders RGB
    LAYER_PLAN = [
        (48, False), (48, False), (48, False), (48, False),
        (48, False), (48, False), (48, False), (48, False),
        (48, True), (48, False),
        (32, True), (32, False),
        (24, True), (24, False),
        (16, True),
        (8, True),
        (4, True),
    ]

    def __init__(self, seed=0, frozen=True):
        super().__init__()
        self.const = nn.Parameter(torch.empty(1, 48, 4, 4))
        layers, ch = [], 48
        for out_ch, up in self.LAYER_PLAN:
            layers.append(ModulatedConv2d(ch, out_ch, 3, up=up))
            ch = out_ch
        layers.append(ModulatedConv2d(ch, 3, 1, demodulate=False))
        self.layers = nn.ModuleList(layers)
        assert len(self.layers) == STYLE_ROWS
        init_deterministic(self, seed)
        g = torch.Generator()
        g.manual_seed(derive_seed(seed, "const"))
        with torch.no_grad():
            self.const.copy_(torch.randn(self.const.shape, generator=g))
            for layer in self.layers:
                layer.affine.bias.fill_(1.0)
        self.frozen = frozen
        if frozen:
            freeze(self)

    @property
    def output_size(self):
        return 4 * 2 ** sum(1 for _, up in self.LAYER_PLAN if up)

    def forward(self, codes):
        validate_style_codes(codes, "generator codes")
        batched = codes.dim() == 3
        cs = codes if batched else codes.unsqueeze(0)
        x = self.const.expand(cs.shape[0], -1, -1, -1).to(cs.dtype)
        for i, layer in enumerate(self.layers):
            x = layer(x, cs[:, i])
            if i < len(self.layers) - 1:
                # gain keeps activation variance roughly unit through the stack
                x = F.gelu(x) * 1.7
        image = torch.tanh(x)
        return image if batched else image.squeeze(0)


class FaceAgingModel(nn.Module):
    """End-to-end age transformation pipeline."""

    def __init__(self, age_encoder: AgeStyleEncoder, face_encoder: RaceAwareFaceEncoder,
                 mixer: StyleCodeMixer, generator: StyleGenerator):
        super().__init__()
        self.age_encoder = age_encoder
        self.face_encoder = face_encoder
        self.mixer = mixer
        self.generator = generator

    def _check_normalized(self, x):
        validate_image(x, channels=3, name="input image")
        with torch.no_grad():
            lo, hi = x.detach().min().item(), x.detach().max().item()
        if lo < -1.0 - 1e-5 or hi > 1.0 + 1e-5:
            raise ValidationError(f"input image must be normalized to [-1, 1], got [{lo}, {hi}]")

    def transform(self, x, source_age, target_age):
        """Re-age ``x`` to ``target_age``; returns (image, mixed style codes).

        ``source_age`` is validated and carried for the cycle pass but does
        not influence the forward computation; ``target_age`` may be a
        scalar or one value per batch sample.
        """
        self._check_normalized(x)
        for age in (source_age if isinstance(source_age, (list, tuple)) else [source_age]):
            validate_age(age)
        x_age = append_age_channel(x, target_age)
        s_age = self.age_encoder(x_age)
        s_face = self.face_encoder(x)
        codes = self.mixer(s_age, s_face)
        return self.generator(codes), codes

    def forward(self, x, source_age, target_age):
        return self.transform(x, source_age, target_age)

    def reconstruct_fullface(self, x):
        """Race-free encoder/generator round trip for mirror-padded crops."""
        self._check_normalized(x)
        codes = self.face_encoder(x, bypass=True)
        return self.generator(codes)

    def trainable_named_parameters(self):
        """Deterministically ordered trainable parameters (encoders + mixer,
        plus the generator when unfrozen)."""
        return sorted(((n, p) for n, p in self.named_parameters() if p.requires_grad),
                      key=lambda kv: kv[0])

    def frozen_named_parameters(self):
        return sorted(((n, p) for n, p in self.named_parameters() if not p.requires_grad),
                      key=lambda kv: kv[0])


def build_model(config, backbone_set, generator_source: str = "toy",
                frozen_generator: bool = None) -> FaceAgingModel:
    """Assemble the full pipeline from a config and a backbone dict."""
    from . import weights as weightio

    if frozen_generator is None:
        frozen_generator = not config.unfreeze_generator
    seed = config.toy_seed
    age_encoder = AgeStyleEncoder(head_split=config.head_split,
                                  seed=derive_seed(seed, "age-encoder"),
                                  image_size=config.image_size)
    face_encoder = RaceAwareFaceEncoder(backbone_set["pyramid"], backbone_set["race"],
                                        head_split=config.head_split,
                                        seed=derive_seed(seed, "face-encoder"),
                                        image_size=config.image_size)
    generator = StyleGenerator(seed=derive_seed(seed, "generator"), frozen=frozen_generator)
    if generator_source != "toy":
        weightio.load_module(generator_source, generator)
        if frozen_generator:
            freeze(generator)
    return FaceAgingModel(age_encoder, face_encoder, StyleCodeMixer(), generator)
