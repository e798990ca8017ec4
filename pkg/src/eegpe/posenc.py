"""Positional-encoding variants behind one interface.

Each variant produces an additive term for patch embeddings laid out as
[B, C, W, d] (batch, channel, patch, feature). ``apply_pe`` adds it.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .geometry import Montage, spe_channel_table, temporal_sinusoid_table
from .tensor import Tensor

TAGS = ("nope", "acpe", "spe", "spe-proj", "learnable")
DISPLAY = {"nope": "NoPE", "acpe": "ACPE", "spe": "SPE", "spe-proj": "SPE+Proj", "learnable": "Learnable PE"}

DEFAULT_ACPE_KERNEL = (7, 3)
LEARNABLE_INIT_STD = 0.02
PROJ_INIT_NOISE = 0.01


# ---------------------------------------------------------------- terms

def acpe_term(emb: Tensor, kernel: Tensor) -> Tensor:
    """Depthwise conv over the (channel, patch) grid; kernel is [d, k_s, k_t]."""
    _, ks, kt = kernel.shape
    if ks <= kt:
        raise ConfigError(f"ACPE needs a spatial extent larger than the temporal one, got ({ks}, {kt})")
    grid = T.transpose(emb, (0, 3, 1, 2))
    return T.transpose(T.depthwise_conv2d(grid, kernel), (0, 2, 3, 1))


def spe_term(montage: Montage, C, W, d, frequencies=None) -> np.ndarray:
    if len(montage) != C:
        raise ConfigError(f"SPE: montage has {len(montage)} channels, data has {C}")
    pos_c = spe_channel_table(montage, d, frequencies)
    pos_w = temporal_sinusoid_table(W, d)
    return pos_w[None, :, :] + pos_c[:, None, :]


def spe_proj_term(montage: Montage, C, W, d, proj_w: Tensor, proj_c: Tensor, frequencies=None) -> Tensor:
    if len(montage) != C:
        raise ConfigError(f"SPE+Proj: montage has {len(montage)} channels, data has {C}")
    pos_c = spe_channel_table(montage, d, frequencies)
    pos_w = temporal_sinusoid_table(W, d)
    pw = T.reshape(T.linear(pos_w, proj_w), (1, W, d))
    pc = T.reshape(T.linear(pos_c, proj_c), (C, 1, d))
    return pw + pc


def learnable_term(e_c: Tensor, e_w: Tensor) -> Tensor:
    C, d = e_c.shape
    W = e_w.shape[0]
    if e_w.shape[1] != d:
        raise ConfigError(f"learnable tables disagree on dim: {e_c.shape} vs {e_w.shape}")
    return T.reshape(e_c, (C, 1, d)) + T.reshape(e_w, (1, W, d))


# ---------------------------------------------------------------- variants

class PEVariant:
    tag = "base"
    montage_transferable = True
    order_sensitive = False

    def __init__(self, d):
        self.d = d
        self.params: dict[str, Tensor] = {}

    @property
    def display_name(self):
        return DISPLAY[self.tag]

    def n_params(self):
        return sum(p.size for p in self.params.values())

    def term(self, emb: Tensor, montage: Montage):
        """Positional term broadcastable to ``emb``; None means zero."""
        raise NotImplementedError

    def check_dims(self, C, W, montage):
        pass

    def reinitialize_for_montage(self, montage, n_patches, rng):
        return self

    def describe(self):
        return {"tag": self.tag}


class NoPE(PEVariant):
    tag = "nope"

    def term(self, emb, montage):
        return None


class ACPE(PEVariant):
    tag = "acpe"
    order_sensitive = True

    def __init__(self, d, kernel_size=DEFAULT_ACPE_KERNEL, rng=None):
        super().__init__(d)
        ks, kt = (int(v) for v in kernel_size)
        if ks % 2 == 0 or kt % 2 == 0:
            raise ConfigError(f"ACPE kernel extents must be odd, got ({ks}, {kt})")
        if ks <= kt:
            raise ConfigError(f"ACPE needs k_s > k_t, got ({ks}, {kt})")
        self.kernel_size = (ks, kt)
        rng = rng if rng is not None else np.random.default_rng(0)
        bound = 1.0 / math.sqrt(ks * kt)
        self.params["kernel"] = T.parameter(rng.uniform(-bound, bound, (d, ks, kt)), "pe.kernel")

    def term(self, emb, montage):
        return acpe_term(emb, self.params["kernel"])

    def describe(self):
        return {"tag": self.tag, "kernel": list(self.kernel_size)}


class SPE(PEVariant):
    tag = "spe"

    def __init__(self, d, frequencies=None):
        super().__init__(d)
        if d % 4:
            raise ConfigError(f"SPE needs dim divisible by 4, got {d}")
        self.frequencies = None if frequencies is None else tuple(float(f) for f in frequencies)
        self._cache = {}

    def check_dims(self, C, W, montage):
        if montage is None or len(montage) != C:
            n = None if montage is None else len(montage)
            raise ConfigError(f"{self.display_name}: montage has {n} channels, data has {C}")

    def table(self, montage, C, W):
        key = (montage.channel_names, montage.positions.tobytes(), W)
        if key not in self._cache:
            self._cache[key] = spe_term(montage, C, W, self.d, self.frequencies)
        return self._cache[key]

    def term(self, emb, montage):
        _, C, W, _ = emb.shape
        self.check_dims(C, W, montage)
        return T.as_tensor(self.table(montage, C, W))

    def reinitialize_for_montage(self, montage, n_patches, rng):
        self._cache.clear()
        return self

    def describe(self):
        return {"tag": self.tag, "frequencies": None if self.frequencies is None else list(self.frequencies)}


class SPEProj(SPE):
    tag = "spe-proj"

    def __init__(self, d, frequencies=None, rng=None):
        super().__init__(d, frequencies)
        rng = rng if rng is not None else np.random.default_rng(0)
        eye = np.eye(d)
        self.params["proj_w"] = T.parameter(eye + rng.normal(0, PROJ_INIT_NOISE, (d, d)), "pe.proj_w")
        self.params["proj_c"] = T.parameter(eye + rng.normal(0, PROJ_INIT_NOISE, (d, d)), "pe.proj_c")

    def term(self, emb, montage):
        _, C, W, _ = emb.shape
        self.check_dims(C, W, montage)
        return spe_proj_term(montage, C, W, self.d, self.params["proj_w"], self.params["proj_c"],
                             self.frequencies)


class Learnable(PEVariant):
    tag = "learnable"
    montage_transferable = False

    def __init__(self, d, n_channels, n_patches, rng=None):
        super().__init__(d)
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params["channel"] = T.parameter(rng.normal(0, LEARNABLE_INIT_STD, (n_channels, d)), "pe.channel")
        self.params["patch"] = T.parameter(rng.normal(0, LEARNABLE_INIT_STD, (n_patches, d)), "pe.patch")

    @property
    def n_channels(self):
        return self.params["channel"].shape[0]

    @property
    def n_patches(self):
        return self.params["patch"].shape[0]

    def check_dims(self, C, W, montage):
        if (C, W) != (self.n_channels, self.n_patches):
            raise ConfigError(f"{self.display_name}: tables are sized for C={self.n_channels}, "
                              f"W={self.n_patches} but data has C={C}, W={W}")

    def term(self, emb, montage):
        _, C, W, _ = emb.shape
        self.check_dims(C, W, montage)
        return learnable_term(self.params["channel"], self.params["patch"])

    def reinitialize_for_montage(self, montage, n_patches, rng):
        return Learnable(self.d, len(montage), n_patches, rng)


def make_pe(tag, d, n_channels, n_patches, rng=None, acpe_kernel=DEFAULT_ACPE_KERNEL, frequencies=None):
    if tag == "nope":
        return NoPE(d)
    if tag == "acpe":
        return ACPE(d, acpe_kernel, rng)
    if tag == "spe":
        return SPE(d, frequencies)
    if tag == "spe-proj":
        return SPEProj(d, frequencies, rng)
    if tag == "learnable":
        return Learnable(d, n_channels, n_patches, rng)
    raise ConfigError(f"unknown positional encoding {tag!r}; choose from {', '.join(TAGS)}")


def expected_param_count(tag, d, n_channels, n_patches, acpe_kernel=DEFAULT_ACPE_KERNEL):
    return {
        "nope": 0,
        "spe": 0,
        "acpe": d * acpe_kernel[0] * acpe_kernel[1],
        "spe-proj": 2 * d * d,
        "learnable": (n_channels + n_patches) * d,
    }[tag]


def apply_pe(variant: PEVariant, emb: Tensor, montage: Montage | None) -> Tensor:
    """emb + positional term, shape preserved. NoPE returns ``emb`` itself."""
    term = variant.term(emb, montage)
    if term is None:
        return emb
    return emb + term


def reinitialize_for_montage(variant: PEVariant, new_montage: Montage, n_patches=None, rng=None):
    if n_patches is None:
        n_patches = getattr(variant, "n_patches", 1)
    return variant.reinitialize_for_montage(new_montage, n_patches, rng)
