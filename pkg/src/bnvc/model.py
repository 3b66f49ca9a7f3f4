"""The codec's networks: motion autoencoder, multi-reference fusion,
contextual autoencoder, hyper-modules, frame generator, and feature
extractor, all hanging off one ordered parameter store.

Latent coding is mean-removed: the hyper path predicts (mu, sigma) per
latent element, the coded symbol is round(y - mu), and reconstruction
adds mu back. Scales are parameterized as exp(clamped log-scale) so
they always live in [SCALE_MIN, SCALE_MAX].
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .entropy import SCALE_MAX, SCALE_MIN
from .errors import UsageError
from .fusion import ContextPyramid, FusionMode, MultiRefFusion
from .network import Conv, ParamStore, ResBlock, read_manifest, save_weights
from .tensor import (
    Tensor,
    bilinear_resize,
    clamp,
    concat_channels,
    exp,
    leaky_relu,
    log,
    std_normal_cdf,
    sigmoid,
    sum_all,
)

__all__ = ["ModelConfig", "CodecModel", "LAMBDA_VALUES"]

LAMBDA_VALUES = (256.0, 512.0, 1024.0, 2048.0)

_LOG_SCALE_MIN = float(np.log(SCALE_MIN))
_LOG_SCALE_MAX = float(np.log(SCALE_MAX))


@dataclass(frozen=True)
class ModelConfig:
    """Architecture knobs; everything else derives from these."""

    n_ref: int = 4
    fusion: FusionMode = FusionMode.BUTTERFLY
    ctx_channels: tuple[int, int, int] = (16, 24, 32)
    mv_latent: int = 16
    mv_hyper: int = 8
    ctx_latent: int = 24
    ctx_hyper: int = 12

    @property
    def feat_channels(self) -> int:
        return self.ctx_channels[0]

    @classmethod
    def toy(cls, n_ref: int = 4, fusion: FusionMode = FusionMode.BUTTERFLY) -> "ModelConfig":
        """Small widths for training experiments and fast tests."""
        return cls(
            n_ref=n_ref,
            fusion=fusion,
            ctx_channels=(8, 12, 16),
            mv_latent=8,
            mv_hyper=4,
            ctx_latent=12,
            ctx_hyper=6,
        )

    def to_manifest(self) -> dict:
        return {
            "n_ref": self.n_ref,
            "fusion": self.fusion.value,
            "ctx_channels": list(self.ctx_channels),
            "mv_latent": self.mv_latent,
            "mv_hyper": self.mv_hyper,
            "ctx_latent": self.ctx_latent,
            "ctx_hyper": self.ctx_hyper,
        }

    @classmethod
    def from_manifest(cls, m: dict) -> "ModelConfig":
        return cls(
            n_ref=int(m["n_ref"]),
            fusion=FusionMode.parse(m["fusion"]),
            ctx_channels=tuple(int(c) for c in m["ctx_channels"]),
            mv_latent=int(m["mv_latent"]),
            mv_hyper=int(m["mv_hyper"]),
            ctx_latent=int(m["ctx_latent"]),
            ctx_hyper=int(m["ctx_hyper"]),
        )


def conv_down_extent(extent: int) -> int:
    """Spatial extent after one stride-2, k=3, pad=1 convolution."""
    return (extent - 1) // 2 + 1


class CodecModel:
    """All parameters and forward paths of the codec."""

    def __init__(self, config: ModelConfig = ModelConfig(), seed: int = 0):
        self.config = config
        self.store = ParamStore()
        rng = np.random.default_rng(seed)
        c0, c1, c2 = config.ctx_channels
        m = config.mv_latent
        hm = config.mv_hyper
        lc = config.ctx_latent
        hc = config.ctx_hyper

        # feature extractor for frames that lack a stored feature
        self.feat1 = Conv(self.store, "feat.conv1", 3, c0, rng=rng)
        self.feat2 = Conv(self.store, "feat.conv2", c0, c0, rng=rng)

        # motion autoencoder: two stride-2 convs down, hyper one further
        self.mv_enc1 = Conv(self.store, "mv_enc.conv1", 2, m, stride=2, rng=rng)
        self.mv_enc2 = Conv(self.store, "mv_enc.conv2", m, m, stride=2, rng=rng)
        self.mv_hyper_enc = Conv(self.store, "mv_hyper.enc", m, hm, stride=2, rng=rng)
        self.mv_hyper_dec = Conv(self.store, "mv_hyper.dec", hm, m, rng=rng)
        self.mv_head_mean = Conv(self.store, "mv_hyper.mean", m, m, rng=rng)
        self.mv_head_scale = Conv(self.store, "mv_hyper.scale", m, m, rng=rng)
        self.mv_dec1 = Conv(self.store, "mv_dec.conv1", m, m, rng=rng)
        self.mv_dec2 = Conv(self.store, "mv_dec.conv2", m, m, rng=rng)
        self.mv_dec3 = Conv(self.store, "mv_dec.conv3", m, 2, rng=rng, init_scale=0.1)
        self.store.add("mv_prior.loc", np.zeros((hm, 1, 1)))
        self.store.add("mv_prior.log_scale", np.zeros((hm, 1, 1)))

        # multi-reference fusion front-end
        self.fusion = MultiRefFusion(self.store, "fusion", config.n_ref, config.ctx_channels, config.fusion, rng)

        # contextual autoencoder with context injected at each scale
        self.ctx_enc1 = Conv(self.store, "ctx_enc.conv1", 3 + c0, c1, stride=2, rng=rng)
        self.ctx_enc2 = Conv(self.store, "ctx_enc.conv2", c1 + c1, c2, stride=2, rng=rng)
        self.ctx_enc3 = Conv(self.store, "ctx_enc.conv3", c2 + c2, lc, rng=rng)
        self.ctx_hyper_enc = Conv(self.store, "ctx_hyper.enc", lc, hc, stride=2, rng=rng)
        self.ctx_hyper_dec = Conv(self.store, "ctx_hyper.dec", hc + c2, c2, rng=rng)
        self.ctx_head_mean = Conv(self.store, "ctx_hyper.mean", c2, lc, rng=rng)
        self.ctx_head_scale = Conv(self.store, "ctx_hyper.scale", c2, lc, rng=rng)
        self.ctx_dec1 = Conv(self.store, "ctx_dec.conv1", lc + c2, c2, rng=rng)
        self.ctx_dec2 = Conv(self.store, "ctx_dec.conv2", c2 + c1, c1, rng=rng)
        self.ctx_dec3 = Conv(self.store, "ctx_dec.conv3", c1 + c0, c0, rng=rng)
        self.store.add("ctx_prior.loc", np.zeros((hc, 1, 1)))
        self.store.add("ctx_prior.log_scale", np.zeros((hc, 1, 1)))

        # frame generator: two plain residual blocks, then the RGB head;
        # the trunk output doubles as the stored reference feature
        self.gen_in = Conv(self.store, "gen.conv_in", c0 + c0, c0, rng=rng)
        self.gen_res1 = ResBlock(self.store, "gen.res1", c0, rng)
        self.gen_res2 = ResBlock(self.store, "gen.res2", c0, rng)
        self.gen_out = Conv(self.store, "gen.conv_out", c0, 3, rng=rng, init_scale=0.1, bias_fill=0.5)

    # -- shapes ---------------------------------------------------------

    def latent_hw(self, h: int, w: int) -> tuple[int, int]:
        if h % 4 or w % 4:
            raise UsageError(f"frame size must be divisible by 4, got {h}x{w}")
        return h // 4, w // 4

    def hyper_hw(self, h: int, w: int) -> tuple[int, int]:
        lh, lw = self.latent_hw(h, w)
        return conv_down_extent(lh), conv_down_extent(lw)

    # -- feature extraction ----------------------------------------------

    def extract_feature(self, x_rgb: Tensor) -> Tensor:
        return self.feat2(leaky_relu(self.feat1(x_rgb)))

    # -- motion path -----------------------------------------------------

    def mv_analyze(self, flow: Tensor) -> Tensor:
        return self.mv_enc2(leaky_relu(self.mv_enc1(flow)))

    def mv_hyper_analyze(self, y: Tensor) -> Tensor:
        return self.mv_hyper_enc(y)

    def mv_hyper_synthesize(self, z_hat: Tensor, latent_hw: tuple[int, int]) -> tuple[Tensor, Tensor]:
        h = leaky_relu(self.mv_hyper_dec(bilinear_resize(z_hat, *latent_hw)))
        return self.mv_head_mean(h), _to_scale(self.mv_head_scale(h))

    def mv_synthesize(self, y_hat: Tensor, frame_hw: tuple[int, int]) -> Tensor:
        h, w = frame_hw
        t = leaky_relu(self.mv_dec1(y_hat))
        t = leaky_relu(self.mv_dec2(bilinear_resize(t, h // 2, w // 2)))
        return self.mv_dec3(bilinear_resize(t, h, w))

    # -- contextual path ---------------------------------------------------

    def ctx_analyze(self, x: Tensor, ctx: ContextPyramid) -> Tensor:
        h = leaky_relu(self.ctx_enc1(concat_channels([x, ctx.c0])))
        h = leaky_relu(self.ctx_enc2(concat_channels([h, ctx.c1])))
        return self.ctx_enc3(concat_channels([h, ctx.c2]))

    def ctx_hyper_analyze(self, y: Tensor) -> Tensor:
        return self.ctx_hyper_enc(y)

    def ctx_hyper_synthesize(self, z_hat: Tensor, ctx: ContextPyramid, latent_hw: tuple[int, int]) -> tuple[Tensor, Tensor]:
        zi = bilinear_resize(z_hat, *latent_hw)
        h = leaky_relu(self.ctx_hyper_dec(concat_channels([zi, ctx.c2])))
        return self.ctx_head_mean(h), _to_scale(self.ctx_head_scale(h))

    def ctx_synthesize(self, y_hat: Tensor, ctx: ContextPyramid, frame_hw: tuple[int, int]) -> Tensor:
        h, w = frame_hw
        t = leaky_relu(self.ctx_dec1(concat_channels([y_hat, ctx.c2])))
        t = leaky_relu(self.ctx_dec2(concat_channels([bilinear_resize(t, h // 2, w // 2), ctx.c1])))
        return self.ctx_dec3(concat_channels([bilinear_resize(t, h, w), ctx.c0]))

    def generate_frame(self, f_hat: Tensor, ctx_c0: Tensor) -> tuple[Tensor, Tensor]:
        trunk = leaky_relu(self.gen_in(concat_channels([f_hat, ctx_c0])))
        trunk = self.gen_res2(self.gen_res1(trunk))
        return self.gen_out(trunk), trunk

    # -- priors and rate terms ----------------------------------------------

    def prior_params(self, which: str) -> tuple[Tensor, Tensor]:
        """(loc, scale) of the factorized hyper prior, shaped (C, 1, 1)."""
        loc = self.store[f"{which}_prior.loc"]
        return loc, _to_scale(self.store[f"{which}_prior.log_scale"])

    def gaussian_rate_bits(self, values: Tensor, mean: Tensor, scale: Tensor) -> Tensor:
        """Differentiable unit-bin Gaussian code length, in bits."""
        hi = std_normal_cdf((values + 0.5 - mean) / scale)
        lo = std_normal_cdf((values - 0.5 - mean) / scale)
        p = clamp(hi - lo, lo=1e-12)
        return sum_all(log(p)) * Tensor(-1.0 / np.log(2.0))

    def factorized_rate_bits(self, values: Tensor, which: str) -> Tensor:
        loc, scale = self.prior_params(which)
        hi = sigmoid((values + 0.5 - loc) / scale)
        lo = sigmoid((values - 0.5 - loc) / scale)
        p = clamp(hi - lo, lo=1e-12)
        return sum_all(log(p)) * Tensor(-1.0 / np.log(2.0))

    # -- persistence -----------------------------------------------------

    def prepare_for_coding(self) -> int:
        """Snap parameters through float32 and return the weights hash.

        Guarantees the values used for arithmetic coding are exactly the
        values a decoder recovers from the weights file.
        """
        self.store.snap_to_f32()
        return self.store.weights_hash()

    def save(self, manifest_path: str | Path) -> None:
        save_weights(self.store, Path(manifest_path), extra={"model": self.config.to_manifest()})

    @classmethod
    def load(cls, manifest_path: str | Path) -> "CodecModel":
        manifest_path = Path(manifest_path)
        manifest = read_manifest(manifest_path)
        config = ModelConfig.from_manifest(manifest["model"])
        model = cls(config, seed=0)
        model.store.load(manifest_path.parent / manifest["data_file"], manifest["params"])
        return model


def _to_scale(raw: Tensor) -> Tensor:
    return exp(clamp(raw, _LOG_SCALE_MIN, _LOG_SCALE_MAX))
