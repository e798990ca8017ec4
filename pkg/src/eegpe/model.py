"""Criss-cross transformer backbone with patch embedding, masking and heads.

Tensor layout throughout is [B, C, W, d]: batch, channel, patch, feature.
Raw input is [B, C, W, t] with t samples per patch.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import CheckpointError, ConfigError, ContractError
from .geometry import Montage
from .kernels import conv1d_out_len
from .posenc import DEFAULT_ACPE_KERNEL, TAGS, Learnable, PEVariant, apply_pe, make_pe
from .tensor import Tensor

HEAD_KINDS = ("linear-1", "mlp-3")


@dataclass
class ModelConfig:
    layers: int = 2
    heads: int = 4
    dim: int = 32
    ff_dim: int = 128
    patch_len: int = 40
    pe: str = "nope"
    mask_ratio: float = 0.5
    acpe_kernel: tuple = DEFAULT_ACPE_KERNEL
    spe_frequencies: list | None = None
    conv_channels: int = 8
    conv_kernel: int = 7
    ln_eps: float = 1e-5

    def __post_init__(self):
        self.acpe_kernel = tuple(int(k) for k in self.acpe_kernel)
        if self.spe_frequencies is not None:
            self.spe_frequencies = [float(f) for f in self.spe_frequencies]
        self.validate()

    def validate(self):
        if self.layers < 0 or self.dim < 1 or self.ff_dim < 1:
            raise ConfigError("layers, dim and ff_dim must be positive")
        if self.heads < 2 or self.heads % 2:
            raise ConfigError(f"heads must be even (split spatial/temporal), got {self.heads}")
        if self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.pe not in TAGS:
            raise ConfigError(f"unknown positional encoding {self.pe!r}; choose from {', '.join(TAGS)}")
        if self.pe in ("spe", "spe-proj") and self.dim % 4:
            raise ConfigError(f"SPE variants need dim divisible by 4, got {self.dim}")
        if not 0.0 <= self.mask_ratio <= 1.0:
            raise ConfigError(f"mask ratio must lie in [0, 1], got {self.mask_ratio}")
        if self.patch_len % 2:
            raise ConfigError(f"patch length must be even for the spectral path, got {self.patch_len}")
        if self.conv_kernel % 2 == 0:
            raise ConfigError("temporal conv kernel must be odd")

    def to_dict(self):
        d = asdict(self)
        d["acpe_kernel"] = list(self.acpe_kernel)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {', '.join(sorted(unknown))}")
        return cls(**d)

    @property
    def temporal_lengths(self):
        """Sequence lengths after each stride-2 conv of the temporal path."""
        pad = self.conv_kernel // 2
        l1 = conv1d_out_len(self.patch_len, self.conv_kernel, 2, pad)
        l2 = conv1d_out_len(l1, self.conv_kernel, 2, pad)
        return l1, l2


PRESETS = {
    "desk": dict(layers=2, heads=4, dim=32, ff_dim=128, patch_len=40),
    "tiny": dict(layers=2, heads=4, dim=32, ff_dim=128, patch_len=40),
    # full-scale backbone dimensions; used for parameter-count checks only
    "full": dict(layers=12, heads=8, dim=200, ff_dim=800, patch_len=200),
}


def preset(name, **overrides) -> ModelConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown model preset {name!r}; choose from {', '.join(PRESETS)}")
    return ModelConfig(**{**PRESETS[name], **overrides})


@dataclass
class HeadConfig:
    kind: str = "linear-1"
    n_classes: int = 2

    def __post_init__(self):
        if self.kind not in HEAD_KINDS:
            raise ConfigError(f"unknown head {self.kind!r}; choose from {', '.join(HEAD_KINDS)}")
        if self.n_classes < 2:
            raise ConfigError(f"classification needs at least 2 classes, got {self.n_classes}")


# ---------------------------------------------------------------- masking / losses

def mask_patches(emb: Tensor, ratio, rng=None, mask_token: Tensor | None = None, mask=None):
    """Replace floor(ratio * C * W) slots per sample with the mask token.

    ``rng`` is a seed or Generator; an explicit boolean ``mask`` [B, C, W]
    overrides random selection. Returns (masked embedding, mask).
    """
    B, C, W, d = emb.shape
    if mask is None:
        if not 0.0 <= ratio <= 1.0:
            raise ConfigError(f"mask ratio must lie in [0, 1], got {ratio}")
        k = int(math.floor(ratio * C * W))
        rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
        mask = np.zeros((B, C * W), dtype=bool)
        for b in range(B):
            mask[b, rng.choice(C * W, size=k, replace=False)] = True
        mask = mask.reshape(B, C, W)
    else:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (B, C, W):
            raise ConfigError(f"mask shape {mask.shape} does not match embedding slots {(B, C, W)}")
    if not mask.any():
        return emb, mask
    if mask_token is None:
        mask_token = T.as_tensor(np.zeros(d))
    m = mask[..., None].astype(np.float64)
    return emb * (1.0 - m) + m * T.reshape(mask_token, (1, 1, 1, d)), mask


def mask_indices(mask):
    """Flat slot indices (into B*C*W) of masked slots."""
    return np.flatnonzero(np.asarray(mask).reshape(-1))


def recon_loss(pred: Tensor, target, mask=None) -> Tensor:
    """Mean squared error; with ``mask`` only the masked rows of [N, t] inputs count."""
    target = T.as_tensor(target)
    if mask is not None:
        rows = mask_indices(mask)
        if rows.size == 0:
            raise ContractError("reconstruction loss over an empty mask set is undefined")
        pred = T.take_rows(pred, rows)
        target = T.as_tensor(target.data[rows])
    if pred.shape != target.shape:
        raise ContractError(f"reconstruction shape {pred.shape} != target shape {target.shape}")
    if pred.size == 0:
        raise ContractError("reconstruction loss over an empty mask set is undefined")
    return T.mse(pred, target)


# ---------------------------------------------------------------- model

def _uniform(rng, fan_in, shape):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, shape)


class CrissCrossModel:
    """Backbone + PE variant + reconstruction head (+ optional classifier head).

    ``params`` is the named parameter map; PE parameters sit under ``pe.`` and
    are exposed via ``state()``.
    """

    def __init__(self, config: ModelConfig, montage: Montage, n_patches: int, rng=None,
                 head: HeadConfig | None = None):
        config.validate()
        self.config = config
        self.montage = montage
        self.n_patches = int(n_patches)
        rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
        c = config
        d, f, t = c.dim, c.ff_dim, c.patch_len
        p = {}

        def lin(name, n_in, n_out):
            p[f"{name}.weight"] = _uniform(rng, n_in, (n_out, n_in))
            p[f"{name}.bias"] = np.zeros(n_out)

        def norm(name):
            p[f"{name}.gain"] = np.ones(d)
            p[f"{name}.bias"] = np.zeros(d)

        ch, k = c.conv_channels, c.conv_kernel
        p["embed.conv1.weight"] = _uniform(rng, k, (ch, 1, k))
        p["embed.conv1.bias"] = np.zeros(ch)
        p["embed.conv2.weight"] = _uniform(rng, ch * k, (ch, ch, k))
        p["embed.conv2.bias"] = np.zeros(ch)
        lin("embed.temporal_fc", ch * c.temporal_lengths[1], d)
        lin("embed.spectral_fc", t // 2 + 1, d)
        p["mask_token"] = rng.normal(0.0, 0.02, d)
        half = d // 2
        for i in range(c.layers):
            b = f"blocks.{i}"
            norm(f"{b}.norm1")
            for axis in ("spatial", "temporal"):
                for proj in ("q", "k", "v"):
                    lin(f"{b}.{axis}.{proj}", d, half)
            lin(f"{b}.proj", d, d)
            norm(f"{b}.norm2")
            lin(f"{b}.ff1", d, f)
            lin(f"{b}.ff2", f, d)
        norm("final_norm")
        lin("recon", d, t)
        self.params: dict[str, Tensor] = {name: T.parameter(v, name) for name, v in p.items()}
        self.pe: PEVariant = make_pe(c.pe, d, len(montage), self.n_patches, rng, c.acpe_kernel,
                                     c.spe_frequencies)
        self.head_config = None
        if head is not None:
            self.add_head(head, rng)

    # ------------------------------------------------------------ parameters

    def state(self) -> dict[str, Tensor]:
        s = dict(self.params)
        for name, t in self.pe.params.items():
            s[f"pe.{name}"] = t
        return s

    def backbone_names(self):
        """Everything except the reconstruction and classification heads."""
        return [n for n in self.state() if not (n.startswith("head.") or n.startswith("recon."))]

    def n_params(self, include_heads=False):
        return sum(t.size for n, t in self.state().items()
                   if include_heads or not (n.startswith("head.") or n.startswith("recon.")))

    def add_head(self, head: HeadConfig, rng=None):
        rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
        for name in [n for n in self.params if n.startswith("head.")]:
            del self.params[name]
        c = self.config
        n_in = len(self.montage) * self.n_patches * c.dim
        dims = [n_in, head.n_classes] if head.kind == "linear-1" else [n_in, c.dim, c.dim, head.n_classes]
        for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
            self.params[f"head.{i}.weight"] = T.parameter(_uniform(rng, a, (b, a)), f"head.{i}.weight")
            self.params[f"head.{i}.bias"] = T.parameter(np.zeros(b), f"head.{i}.bias")
        self.head_config = head

    def set_pe(self, pe: PEVariant):
        self.pe = pe

    # ------------------------------------------------------------ forward

    def _check_input(self, x):
        x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
        if x.ndim != 4:
            raise ConfigError(f"expected input [B, C, W, t], got shape {x.shape}")
        if x.shape[3] != self.config.patch_len:
            raise ConfigError(f"patch length {x.shape[3]} does not match config {self.config.patch_len}")
        return x

    def patch_embed(self, x) -> Tensor:
        """Temporal conv path + spectral (|DFT| -> linear) path, summed per patch."""
        x = self._check_input(x)
        B, C, W, t = x.shape
        p = self.params
        k = self.config.conv_kernel
        flat = x.reshape(B * C * W, 1, t)
        h = T.conv1d(flat, p["embed.conv1.weight"], p["embed.conv1.bias"], stride=2, pad=k // 2)
        h = T.gelu(h)
        h = T.conv1d(h, p["embed.conv2.weight"], p["embed.conv2.bias"], stride=2, pad=k // 2)
        h = T.reshape(h, (B * C * W, -1))
        temporal = T.linear(h, p["embed.temporal_fc.weight"], p["embed.temporal_fc.bias"])
        spec = T.rdft_magnitude(x.reshape(B * C * W, t))
        spectral = T.linear(spec, p["embed.spectral_fc.weight"], p["embed.spectral_fc.bias"])
        return T.reshape(temporal + spectral, (B, C, W, self.config.dim))

    def _attend(self, q, k, v):
        dh = q.shape[-1]
        scores = T.scale(T.matmul(q, T.swap_last(k)), 1.0 / math.sqrt(dh))
        return T.matmul(T.softmax(scores, axis=-1), v)

    def criss_cross_block(self, h: Tensor, i: int) -> Tensor:
        p = self.params
        b = f"blocks.{i}"
        B, C, W, d = h.shape
        hs = self.config.heads // 2
        dh = d // self.config.heads
        z = T.layer_norm(h, p[f"{b}.norm1.gain"], p[f"{b}.norm1.bias"], self.config.ln_eps)

        def heads(axis, perm):
            q, k, v = (T.transpose(T.reshape(T.linear(z, p[f"{b}.{axis}.{n}.weight"], p[f"{b}.{axis}.{n}.bias"]),
                                             (B, C, W, hs, dh)), perm) for n in "qkv")
            return self._attend(q, k, v)

        # spatial: per patch, attend across channels -> [B, W, hs, C, dh]
        s = heads("spatial", (0, 2, 3, 1, 4))
        s = T.reshape(T.transpose(s, (0, 3, 1, 2, 4)), (B, C, W, d // 2))
        # temporal: per channel, attend across patches -> [B, C, hs, W, dh]
        t = heads("temporal", (0, 1, 3, 2, 4))
        t = T.reshape(T.transpose(t, (0, 1, 3, 2, 4)), (B, C, W, d // 2))
        a = T.linear(T.concat([s, t], axis=-1), p[f"{b}.proj.weight"], p[f"{b}.proj.bias"])
        h = h + a
        z = T.layer_norm(h, p[f"{b}.norm2.gain"], p[f"{b}.norm2.bias"], self.config.ln_eps)
        z = T.gelu(T.linear(z, p[f"{b}.ff1.weight"], p[f"{b}.ff1.bias"]))
        return h + T.linear(z, p[f"{b}.ff2.weight"], p[f"{b}.ff2.bias"])

    def encode(self, x, ratio=0.0, rng=None, mask=None, montage=None):
        """Pre-head representations [B, C, W, d] and the mask used."""
        montage = self.montage if montage is None else montage
        emb = self.patch_embed(x)
        if mask is None and ratio == 0.0:
            mask = np.zeros(emb.shape[:3], dtype=bool)
        else:
            emb, mask = mask_patches(emb, ratio, rng, self.params["mask_token"], mask)
        h = apply_pe(self.pe, emb, montage)
        for i in range(self.config.layers):
            h = self.criss_cross_block(h, i)
        p = self.params
        h = T.layer_norm(h, p["final_norm.gain"], p["final_norm.bias"], self.config.ln_eps)
        return h, mask

    def forward_pretrain(self, x, ratio=None, rng=None, mask=None):
        """Returns (reconstructions [M, t], targets [M, t], mask [B, C, W])."""
        x = self._check_input(x)
        ratio = self.config.mask_ratio if ratio is None else ratio
        h, mask = self.encode(x, ratio, rng, mask)
        rows = mask_indices(mask)
        if rows.size == 0:
            raise ContractError("pretraining needs a non-empty mask set (mask ratio > 0)")
        B, C, W, d = h.shape
        picked = T.take_rows(T.reshape(h, (B * C * W, d)), rows)
        recon = T.linear(picked, self.params["recon.weight"], self.params["recon.bias"])
        target = x.reshape(B * C * W, -1)[rows]
        return recon, target, mask

    def pretrain_loss(self, x, ratio=None, rng=None, mask=None) -> Tensor:
        recon, target, _ = self.forward_pretrain(x, ratio, rng, mask)
        return recon_loss(recon, target)

    def classify_features(self, features: Tensor) -> Tensor:
        """Apply the classifier head to pre-head representations [B, C, W, d]."""
        if self.head_config is None:
            raise ConfigError("model has no classification head")
        B = features.shape[0]
        z = T.reshape(features, (B, -1))
        n_layers = 1 if self.head_config.kind == "linear-1" else 3
        expect = self.params["head.0.weight"].shape[1]
        if z.shape[1] != expect:
            raise ConfigError(f"head expects C*W*d = {expect} inputs, got {z.shape[1]}")
        for i in range(n_layers):
            z = T.linear(z, self.params[f"head.{i}.weight"], self.params[f"head.{i}.bias"])
            if i < n_layers - 1:
                z = T.gelu(z)
        return z

    def forward_classify(self, x, montage=None) -> Tensor:
        h, _ = self.encode(x, montage=montage)
        return self.classify_features(h)


def full_backbone_param_count(c: ModelConfig, n_channels, n_patches):
    """Closed-form parameter count (backbone + PE, no heads)."""
    d, f, t, ch, k = c.dim, c.ff_dim, c.patch_len, c.conv_channels, c.conv_kernel
    embed = (ch * k + ch) + (ch * ch * k + ch) + (ch * c.temporal_lengths[1] * d + d) + ((t // 2 + 1) * d + d)
    block = 2 * (2 * d) + 6 * (d * (d // 2) + d // 2) + (d * d + d) + (d * f + f) + (f * d + d)
    from .posenc import expected_param_count
    pe = expected_param_count(c.pe, d, n_channels, n_patches, c.acpe_kernel)
    return embed + d + c.layers * block + 2 * d + pe


# ---------------------------------------------------------------- checkpoints

MAGIC = b"EEGPE1\n"


def save_checkpoint(model: CrissCrossModel, path, extra=None):
    """magic, u64 LE manifest length, JSON manifest, then LE float64 blobs in manifest order."""
    state = model.state()
    manifest = {
        "config": model.config.to_dict(),
        "pe": model.pe.describe(),
        "montage": model.montage.to_dict(),
        "n_patches": model.n_patches,
        "head": None if model.head_config is None else asdict(model.head_config),
        "params": [{"name": n, "shape": list(t.shape)} for n, t in state.items()],
        "extra": extra or {},
    }
    text = json.dumps(manifest, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(text)))
        fh.write(text)
        for t in state.values():
            fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def read_manifest(path):
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
        (n,) = struct.unpack("<Q", fh.read(8))
        manifest = json.loads(fh.read(n).decode("utf-8"))
        blob = fh.read()
    return manifest, blob


def load_checkpoint(path) -> CrissCrossModel:
    manifest, blob = read_manifest(path)
    config = ModelConfig.from_dict(manifest["config"])
    montage = Montage.from_dict(manifest["montage"])
    head = HeadConfig(**manifest["head"]) if manifest.get("head") else None
    model = CrissCrossModel(config, montage, manifest["n_patches"], rng=0, head=head)
    state = model.state()
    names = [e["name"] for e in manifest["params"]]
    if set(names) != set(state):
        missing = sorted(set(state) - set(names))
        extra = sorted(set(names) - set(state))
        raise CheckpointError(f"{path}: parameter set mismatch (missing {missing}, unexpected {extra})")
    offset = 0
    for entry in manifest["params"]:
        target = state[entry["name"]]
        shape = tuple(entry["shape"])
        if shape != target.shape:
            raise CheckpointError(f"{path}: {entry['name']} has shape {shape}, config implies {target.shape}")
        n = int(np.prod(shape)) * 8
        if offset + n > len(blob):
            raise CheckpointError(f"{path}: truncated at {entry['name']}")
        target.data = np.frombuffer(blob, dtype="<f8", count=n // 8, offset=offset).astype(np.float64).reshape(shape)
        offset += n
    if offset != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - offset} trailing bytes")
    return model


def copy_state(model: CrissCrossModel):
    return {n: t.data.copy() for n, t in model.state().items()}


def restore_state(model: CrissCrossModel, snapshot):
    for n, t in model.state().items():
        t.data = snapshot[n].copy()
