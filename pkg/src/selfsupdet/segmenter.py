"""Bottleneck autoencoder producing foreground appearance and a soft mask.

The crop is squeezed through a small latent vector (default 64), far below
the patch's pixel dimension, so the decoder can only afford the salient
content; a shared encoder feeds two separate decoder branches, one for RGB
appearance and one for the single-channel mask, both sigmoid-bounded.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor
from .autodiff.nn import Conv2d, Linear, Module


class _PatchDecoder(Module):
    """Latent vector back to a (channels, P, P) sigmoid patch."""

    def __init__(self, rng, latent: int, patch: int, out_channels: int):
        super().__init__()
        self.patch = patch
        self.base = patch // 8
        self.add_module("fc", Linear(rng, latent, 64 * self.base * self.base))
        self.add_module("up0", Conv2d(rng, 64, 32, k=3, stride=1, padding=1))
        self.add_module("up1", Conv2d(rng, 32, 16, k=3, stride=1, padding=1))
        self.add_module("up2", Conv2d(rng, 16, 16, k=3, stride=1, padding=1))
        self.add_module("head", Conv2d(rng, 16, out_channels, k=1, stride=1, padding=0))

    def __call__(self, z: Tensor) -> Tensor:
        from .autodiff import functional as F
        n = z.data.shape[0]
        h = self._modules["fc"](z).leaky_relu(0.1).reshape(n, 64, self.base, self.base)
        for name in ("up0", "up1", "up2"):
            h = self._modules[name](F.upsample_nearest2(h)).leaky_relu(0.1)
        return self._modules["head"](h).sigmoid()


class SegAutoencoder(Module):
    """Patch in, (appearance, mask) out; both match the patch resolution."""

    def __init__(self, rng: np.random.Generator, patch: int = 32, latent: int = 64):
        super().__init__()
        if patch % 8:
            raise ValueError(f"patch resolution {patch} must be a multiple of 8")
        self.patch = patch
        self.latent = latent
        self.add_module("enc0", Conv2d(rng, 3, 16, k=3, stride=2, padding=1))
        self.add_module("enc1", Conv2d(rng, 16, 32, k=3, stride=2, padding=1))
        self.add_module("enc2", Conv2d(rng, 32, 64, k=3, stride=2, padding=1))
        feat = 64 * (patch // 8) ** 2
        self.add_module("to_latent", Linear(rng, feat, latent))
        self.add_module("dec_fg", _PatchDecoder(rng, latent, patch, 3))
        self.add_module("dec_mask", _PatchDecoder(rng, latent, patch, 1))

    def encode(self, patches: Tensor) -> Tensor:
        n = patches.data.shape[0]
        h = patches
        for name in ("enc0", "enc1", "enc2"):
            h = self._modules[name](h).leaky_relu(0.1)
        return self._modules["to_latent"](h.reshape(n, -1))

    def forward(self, patches: Tensor) -> tuple[Tensor, Tensor]:
        """(N, 3, P, P) crop to appearance (N, 3, P, P) and mask (N, 1, P, P)."""
        if patches.data.ndim != 4 or patches.data.shape[1] != 3 \
                or patches.data.shape[2:] != (self.patch, self.patch):
            raise ValueError(
                f"segmenter expects (N, 3, {self.patch}, {self.patch}) patches, got {patches.shape}")
        z = self.encode(patches)
        return self._modules["dec_fg"](z), self._modules["dec_mask"](z)

    __call__ = forward
