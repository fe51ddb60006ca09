"""Conditioned UNet for movement-grid prediction.

The backbone is a 4-down/4-up UNet over the binary pre-event grid.  A
spatial condition map (POI context, optionally with the tiled reliance
vector) is fused at the input and encoded into a resolution-matched pyramid
that conditioned blocks attend to; a reliance-driven MLP head emits
per-block affine modulation parameters.  Five variants expose the ablation
ladder, from a plain UNet up to the fully conditioned model.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import InvalidConfig, ShapeMismatch

VARIANTS = ("baseline", "spatial", "spatial_sir_concat", "spatial_sir_modulation", "full")
VARIANT_LABELS = {
    "baseline": "Baseline (Plain UNet)",
    "spatial": "+Spatial",
    "spatial_sir_concat": "+Spatial+SIR (Concat)",
    "spatial_sir_modulation": "+Spatial+SIR (Modulation)",
    "full": "Full Model",
}
DEPTH = 4
N_MODULATED_BLOCKS = 2 * DEPTH + 1  # encoder blocks + bottleneck + decoder blocks


@dataclass
class CUNetConfig:
    g: int
    k: int
    variant: str = "full"
    base_channels: int = 32
    mlp_hidden: int = 64
    mlp_layers: int = 2
    attention_token_budget: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise InvalidConfig(f"unknown variant {self.variant!r}")
        if self.base_channels < 8:
            raise InvalidConfig("base_channels must be >= 8")
        if self.attention_token_budget < 1:
            raise InvalidConfig("attention_token_budget must be >= 1")
        if self.g < 1 or self.k < 1:
            raise InvalidConfig("g and k must be positive")

    @property
    def has_condition(self) -> bool:
        return self.variant != "baseline"

    @property
    def condition_includes_sir(self) -> bool:
        return self.variant in ("spatial_sir_concat", "full")

    @property
    def has_modulation(self) -> bool:
        return self.variant in ("spatial_sir_modulation", "full")

    @property
    def condition_channels(self) -> int:
        if not self.has_condition:
            return 0
        return 2 * self.k if self.condition_includes_sir else self.k

    def to_dict(self) -> dict:
        return {
            "g": self.g, "k": self.k, "variant": self.variant,
            "base_channels": self.base_channels, "mlp_hidden": self.mlp_hidden,
            "mlp_layers": self.mlp_layers,
            "attention_token_budget": self.attention_token_budget, "seed": self.seed,
        }


def _he_uniform(rng, shape, fan_in, dtype=np.float32):
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class _Registry:
    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def param(self, name, data) -> Tensor:
        if name in self.params:
            raise InvalidConfig(f"duplicate parameter name {name}")
        t = Tensor(np.asarray(data, dtype=np.float32), requires_grad=True)
        self.params[name] = t
        return t

    def buffer(self, name, data) -> np.ndarray:
        arr = np.asarray(data, dtype=np.float32)
        self.buffers[name] = arr
        return arr


class _Conv:
    def __init__(self, reg, name, c_in, c_out, kernel, stride, padding, rng, zero=False):
        fan_in = c_in * kernel * kernel
        w = np.zeros((c_out, c_in, kernel, kernel), np.float32) if zero \
            else _he_uniform(rng, (c_out, c_in, kernel, kernel), fan_in)
        self.weight = reg.param(f"{name}.weight", w)
        self.bias = reg.param(f"{name}.bias", np.zeros(c_out, np.float32))
        self.stride, self.padding = stride, padding

    def __call__(self, x):
        return ad.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class _ConvTranspose:
    def __init__(self, reg, name, c_in, c_out, kernel, stride, rng):
        fan_in = c_in * kernel * kernel
        w = _he_uniform(rng, (c_in, c_out, kernel, kernel), fan_in)
        self.weight = reg.param(f"{name}.weight", w)
        self.bias = reg.param(f"{name}.bias", np.zeros(c_out, np.float32))
        self.stride = stride

    def __call__(self, x):
        return ad.conv_transpose2d(x, self.weight, self.bias, self.stride, 0)


class _BatchNorm:
    def __init__(self, reg, name, channels):
        self.gamma = reg.param(f"{name}.gamma", np.ones(channels, np.float32))
        self.beta = reg.param(f"{name}.beta", np.zeros(channels, np.float32))
        self.running_mean = reg.buffer(f"{name}.running_mean", np.zeros(channels, np.float32))
        self.running_var = reg.buffer(f"{name}.running_var", np.ones(channels, np.float32))

    def __call__(self, x, training):
        return ad.batchnorm2d(x, self.gamma, self.beta,
                              self.running_mean, self.running_var, training)


class _Linear:
    def __init__(self, reg, name, f_in, f_out, rng, zero=False):
        w = np.zeros((f_out, f_in), np.float32) if zero \
            else _he_uniform(rng, (f_out, f_in), f_in)
        self.weight = reg.param(f"{name}.weight", w)
        self.bias = reg.param(f"{name}.bias", np.zeros(f_out, np.float32))

    def __call__(self, x):
        return ad.linear(x, self.weight, self.bias)


class ModulationHead:
    """Shared MLP over the reliance vector plus per-block projections.

    Each projection's single linear layer is zero-initialized, so a freshly
    built head emits all-zero (gamma, beta) pairs and modulation starts as
    the identity.
    """

    def __init__(self, reg, config: CUNetConfig, block_channels, rng):
        self.mlp = []
        f_in = config.k
        for i in range(config.mlp_layers):
            self.mlp.append(_Linear(reg, f"mod.mlp.{i}", f_in, config.mlp_hidden, rng))
            f_in = config.mlp_hidden
        self.projs = [
            _Linear(reg, f"mod.proj.{l}", f_in, 2 * c, rng, zero=True)
            for l, c in enumerate(block_channels)
        ]
        self.block_channels = list(block_channels)

    def features(self, sir: Tensor) -> Tensor:
        h = sir
        for layer in self.mlp:
            h = ad.relu(layer(h))
        return h

    def __call__(self, sir: Tensor):
        """Per-block (gamma, beta) pairs, each of shape [B, C_l]."""
        h = self.features(sir)
        out = []
        for proj, c in zip(self.projs, self.block_channels):
            gb = proj(h)
            out.append((_slice_cols(gb, 0, c), _slice_cols(gb, c, 2 * c)))
        return out


def _slice_cols(t: Tensor, lo: int, hi: int) -> Tensor:
    full = t.shape[1]

    def backward(g):
        pad = np.zeros((g.shape[0], full), dtype=g.dtype)
        pad[:, lo:hi] = g
        return (pad,)

    return ad._result(t.data[:, lo:hi].copy(), (t,), backward)


class CUNetModel:
    """Built model: named parameters, named buffers, and the forward pass."""

    def __init__(self, config: CUNetConfig):
        self.config = config
        reg = _Registry()
        rng = np.random.default_rng(config.seed)
        b = config.base_channels
        enc_out = [b * 2 ** (i + 1) for i in range(DEPTH)]      # after each down block
        dec_out = [enc_out[DEPTH - 1 - i] // 2 for i in range(DEPTH)]
        bott = enc_out[-1]
        self.block_channels = enc_out + [bott] + dec_out        # 9 modulated widths

        cond_half = b // 2
        if config.has_condition:
            self.stem_in = _Conv(reg, "stem.input", 1, b - cond_half, 3, 1, 1, rng)
            self.stem_cond = _Conv(reg, "stem.cond", config.condition_channels,
                                   cond_half, 3, 1, 1, rng)
        else:
            self.stem_in = _Conv(reg, "stem.input", 1, b, 3, 1, 1, rng)
            self.stem_cond = None

        self.enc_conv, self.enc_bn = [], []
        c = b
        for i in range(DEPTH):
            self.enc_conv.append(_Conv(reg, f"enc.{i}.conv", c, 2 * c, 3, 2, 1, rng))
            self.enc_bn.append(_BatchNorm(reg, f"enc.{i}.bn", 2 * c))
            c *= 2

        self.bott_conv = _Conv(reg, "bottleneck.conv", bott, bott, 3, 1, 1, rng)
        self.bott_bn = _BatchNorm(reg, "bottleneck.bn", bott)

        self.dec_up, self.dec_conv, self.dec_bn = [], [], []
        c = bott
        for i in range(DEPTH):
            self.dec_up.append(_ConvTranspose(reg, f"dec.{i}.up", c, c // 2, 2, 2, rng))
            self.dec_conv.append(_Conv(reg, f"dec.{i}.conv", c, c // 2, 3, 1, 1, rng))
            self.dec_bn.append(_BatchNorm(reg, f"dec.{i}.bn", c // 2))
            c //= 2

        self.out_conv = _Conv(reg, "out.conv", b, 1, 1, 1, 0, rng)

        # condition pyramid: resolution/width-matched encodings of the condition map
        self.pyramid = []
        if config.has_condition:
            widths = [b] + enc_out
            c_in = config.condition_channels
            for i, c_out in enumerate(widths):
                stride = 1 if i == 0 else 2
                self.pyramid.append(
                    _Conv(reg, f"cond_pyr.{i}.conv", c_in, c_out, 3, stride, 1, rng))
                c_in = c_out

        self.mod_head = None
        if config.has_modulation:
            self.mod_head = ModulationHead(reg, config, self.block_channels, rng)

        self.params = reg.params
        self.buffers = reg.buffers

    # -- forward ------------------------------------------------------------

    def _condition_tokens(self, cond: Tensor, training: bool):
        """Pyramid levels as pooled token tensors, index 0 at full resolution."""
        budget_side = max(1, int(np.sqrt(self.config.attention_token_budget)))
        levels = []
        h = cond
        for conv in self.pyramid:
            h = ad.relu(conv(h))
            side = min(h.shape[2], budget_side)
            pooled = ad.adaptive_avg_pool(h, side, side) if side < h.shape[2] else h
            levels.append(ad.to_tokens(pooled))
        return levels

    def _block_tail(self, h: Tensor, block_idx: int, level_idx: int,
                    cond_tokens, mod_pairs) -> Tensor:
        """Cross-attention (residual) then modulation, where the variant has them."""
        if cond_tokens is not None:
            tokens = cond_tokens[level_idx]
            q = ad.to_tokens(h)
            attended = ad.cross_attention(q, tokens, tokens)
            h = ad.add(h, ad.from_tokens(attended, h.shape[2], h.shape[3]))
        if mod_pairs is not None:
            gamma, beta = mod_pairs[block_idx]
            h = ad.film_modulate(h, gamma, beta)
        return h

    def forward(self, v_pre, sc=None, sir=None, training=False) -> Tensor:
        """Probability map of shape [B,1,G,G] for inputs at grid size G."""
        cfg = self.config
        x = v_pre if isinstance(v_pre, Tensor) else Tensor(np.asarray(v_pre, np.float32))
        if x.data.ndim != 4 or x.shape[1] != 1:
            raise ShapeMismatch(f"v_pre must be [B,1,G,G], got {x.shape}")
        g = x.shape[2]
        if x.shape[3] != g:
            raise ShapeMismatch("v_pre must be square")

        cond = None
        if cfg.has_condition:
            if sc is None:
                raise ShapeMismatch("variant requires a spatial context batch")
            sc_t = sc if isinstance(sc, Tensor) else Tensor(np.asarray(sc, np.float32))
            cond = sc_t
            if cfg.condition_includes_sir:
                if sir is None:
                    raise ShapeMismatch("variant requires a reliance batch")
                sir_t = sir if isinstance(sir, Tensor) else Tensor(np.asarray(sir, np.float32))
                cond = ad.concat_channels(sc_t, ad.tile_vector_to_map(sir_t, g, g))
            if cond.shape != (x.shape[0], cfg.condition_channels, g, g):
                raise ShapeMismatch(f"condition map shape {cond.shape}")

        mod_pairs = None
        if cfg.has_modulation:
            if sir is None:
                raise ShapeMismatch("variant requires a reliance batch")
            sir_t = sir if isinstance(sir, Tensor) else Tensor(np.asarray(sir, np.float32))
            mod_pairs = self.mod_head(sir_t)

        # pad to a multiple of 2^DEPTH so four halvings stay exact
        mult = 2 ** DEPTH
        gp = ((g + mult - 1) // mult) * mult
        pad = gp - g
        x = ad.pad2d(x, pad, pad)
        if cond is not None:
            cond = ad.pad2d(cond, pad, pad)

        cond_tokens = self._condition_tokens(cond, training) if cond is not None else None

        if self.stem_cond is not None:
            h = ad.concat_channels(self.stem_cond(cond), self.stem_in(x))
        else:
            h = self.stem_in(x)

        skips = [h]
        for i in range(DEPTH):
            h = ad.relu(self.enc_bn[i](self.enc_conv[i](h), training))
            h = self._block_tail(h, i, i + 1, cond_tokens, mod_pairs)
            skips.append(h)

        h = ad.relu(self.bott_bn(self.bott_conv(h), training))
        h = self._block_tail(h, DEPTH, DEPTH, cond_tokens, mod_pairs)

        for i in range(DEPTH):
            h = self.dec_up[i](h)
            h = ad.concat_channels(h, skips[DEPTH - 1 - i])
            h = ad.relu(self.dec_bn[i](self.dec_conv[i](h), training))
            h = self._block_tail(h, DEPTH + 1 + i, DEPTH - 1 - i, cond_tokens, mod_pairs)

        out = ad.sigmoid(self.out_conv(h))
        return ad.crop2d(out, g, g)

    def zero_grad(self):
        for t in self.params.values():
            t.zero_grad()


def build(config: CUNetConfig) -> CUNetModel:
    """Deterministically initialize a model from its config seed."""
    return CUNetModel(config)


def make_condition_map(sc_batch, sir_batch, variant: str):
    """Standalone condition-map construction (None for the baseline)."""
    if variant not in VARIANTS:
        raise InvalidConfig(f"unknown variant {variant!r}")
    if variant == "baseline":
        return None
    sc = np.asarray(sc_batch, np.float32)
    if variant in ("spatial", "spatial_sir_modulation"):
        return sc
    sir = np.asarray(sir_batch, np.float32)
    if sir.shape[0] != sc.shape[0] or sir.shape[1] != sc.shape[1]:
        raise ShapeMismatch(f"sc {sc.shape} vs sir {sir.shape}")
    tiled = np.broadcast_to(sir[:, :, None, None], sc.shape).astype(np.float32)
    return np.concatenate([sc, tiled], axis=1)


def modulation_params(head: ModulationHead, sir) -> list[tuple[np.ndarray, np.ndarray]]:
    """Evaluate the head on a [B,K] reliance batch; returns numpy pairs."""
    sir_t = sir if isinstance(sir, Tensor) else Tensor(np.asarray(sir, np.float32))
    return [(g.data, b.data) for g, b in head(sir_t)]


def count_parameters(model: CUNetModel) -> int:
    return sum(t.data.size for t in model.params.values())
