"""The network: time-frequency fusion embedding, a temporal encoder stack,
an adaptive multi-channel encoder stack, and task heads.

Attention runs twice over the same (channels, patches, dim) activations:
temporal blocks attend over the patch axis independently per channel, and
channel blocks attend over the channel axis independently per patch index.
No parameter shape depends on the channel count, so one weight set serves
any montage, and channel-axis reductions are permutation-stable (see
`numerics.attn_mix`), making the whole forward pass equivariant to channel
reordering, bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields, replace

import numpy as np

from . import numerics as nm
from .errors import CapacityError, ConfigError, FormatError, IoError
from .numerics import Tensor
from .preprocess import PatchGrid
from .rng import Rng
from .spectral import BandPowerTensor

_INIT_STD = 0.02


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters; every parameter shape derives from these."""

    patch_len: int = 1500
    model_dim: int = 2048
    heads: int = 16
    ffn_dim: int = 3072
    temporal_layers: int = 12
    channel_layers: int = 4
    max_patches: int = 15
    head_dim_k: int | None = None
    head_dim_v: int | None = None
    n_bands: int = 8
    dropout: float = 0.1
    attn_scale: str = "d"  # "d": sqrt(model_dim); "dk": sqrt(head_dim_k)
    use_freq_embed: bool = True
    conv_embed: bool = False
    conv_kernel: int = 10
    interleave: bool = False

    def __post_init__(self) -> None:
        if self.patch_len < 1 or self.model_dim < 1 or self.heads < 1:
            raise ConfigError("patch_len, model_dim, and heads must be positive")
        if self.model_dim % self.heads != 0 and self.head_dim_k is None:
            raise ConfigError(
                f"model_dim {self.model_dim} not divisible by heads {self.heads}; "
                "set head_dim_k/head_dim_v explicitly"
            )
        if self.temporal_layers < 0 or self.channel_layers < 0:
            raise ConfigError("layer counts must be >= 0")
        if not 0 <= self.dropout < 1:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.attn_scale not in ("d", "dk"):
            raise ConfigError(f"attn_scale must be 'd' or 'dk', got {self.attn_scale!r}")
        if self.conv_embed and self.patch_len % self.conv_kernel != 0:
            raise ConfigError(
                f"conv_kernel {self.conv_kernel} must divide patch_len {self.patch_len}"
            )

    @property
    def d_k(self) -> int:
        return self.head_dim_k if self.head_dim_k is not None else self.model_dim // self.heads

    @property
    def d_v(self) -> int:
        return self.head_dim_v if self.head_dim_v is not None else self.model_dim // self.heads

    @property
    def scale_denominator(self) -> float:
        return math.sqrt(self.model_dim if self.attn_scale == "d" else self.d_k)


_PRESETS = {
    "tiny": dict(
        patch_len=8, model_dim=8, heads=2, ffn_dim=16, temporal_layers=1,
        channel_layers=1, max_patches=16, dropout=0.0, conv_kernel=4,
    ),
    "base": dict(
        patch_len=1500, model_dim=2048, heads=16, ffn_dim=3072,
        temporal_layers=12, channel_layers=4, max_patches=15, dropout=0.1,
    ),
    "large": dict(
        patch_len=1500, model_dim=2048, heads=16, ffn_dim=7168,
        temporal_layers=12, channel_layers=4, max_patches=15, dropout=0.1,
    ),
}


def preset(name: str, **overrides) -> ModelConfig:
    if name not in _PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(_PRESETS)}")
    return ModelConfig(**{**_PRESETS[name], **overrides})


def apply_ablation(cfg: ModelConfig, name: str) -> ModelConfig:
    """Build-time variants: freq | temporal | channel | conv-embed."""
    if name == "freq":
        return replace(cfg, use_freq_embed=False)
    if name == "temporal":
        return replace(cfg, temporal_layers=0)
    if name == "channel":
        return replace(cfg, channel_layers=0)
    if name == "conv-embed":
        return replace(cfg, conv_embed=True)
    raise ConfigError(f"unknown ablation {name!r}")


# ---------------------------------------------------------------------------
# parameter store
# ---------------------------------------------------------------------------


def _layer_shapes(prefix: str, cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, dk, dv, h = cfg.model_dim, cfg.d_k, cfg.d_v, cfg.heads
    return {
        f"{prefix}.ln1.gain": (d,),
        f"{prefix}.ln1.bias": (d,),
        f"{prefix}.attn.wq": (d, h * dk),
        f"{prefix}.attn.wk": (d, h * dk),
        f"{prefix}.attn.wv": (d, h * dv),
        f"{prefix}.attn.wo": (h * dv, d),
        f"{prefix}.ln2.gain": (d,),
        f"{prefix}.ln2.bias": (d,),
        f"{prefix}.ffn.w1": (d, cfg.ffn_dim),
        f"{prefix}.ffn.b1": (cfg.ffn_dim,),
        f"{prefix}.ffn.w2": (cfg.ffn_dim, d),
        f"{prefix}.ffn.b2": (d,),
    }


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Backbone parameter names and shapes, in canonical order."""
    d = cfg.model_dim
    shapes: dict[str, tuple[int, ...]] = {}
    if cfg.conv_embed:
        shapes["embed.patch.w"] = (cfg.conv_kernel, d)
    else:
        shapes["embed.patch.w"] = (cfg.patch_len, d)
    shapes["embed.patch.b"] = (d,)
    if cfg.use_freq_embed:
        shapes["embed.freq.w"] = (cfg.n_bands, d)
        shapes["embed.freq.b"] = (d,)
    shapes["embed.pos"] = (cfg.max_patches, d)
    shapes["embed.mask"] = (d,)
    for i in range(cfg.temporal_layers):
        shapes.update(_layer_shapes(f"temporal{i}", cfg))
    for i in range(cfg.channel_layers):
        shapes.update(_layer_shapes(f"channel{i}", cfg))
    return shapes


def reconstruct_head_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    return {"head.recon.w": (cfg.model_dim, cfg.patch_len), "head.recon.b": (cfg.patch_len,)}


def classify_head_shapes(cfg: ModelConfig, n_classes: int) -> dict[str, tuple[int, ...]]:
    d = cfg.model_dim
    if n_classes < 1:
        raise ConfigError("n_classes must be >= 1")
    if d // 4 < 1:
        raise ConfigError(f"model_dim {d} too small for the 3-stage classifier")
    return {
        "head.cls.w1": (d, d // 2),
        "head.cls.b1": (d // 2,),
        "head.cls.w2": (d // 2, d // 4),
        "head.cls.b2": (d // 4,),
        "head.cls.w3": (d // 4, n_classes),
        "head.cls.b3": (n_classes,),
    }


def forecast_head_shapes(
    cfg: ModelConfig, context_patches: int, horizon_patches: int
) -> dict[str, tuple[int, ...]]:
    if horizon_patches < 1 or context_patches < 1:
        raise ConfigError("context_patches and horizon_patches must be >= 1")
    flat = context_patches * cfg.model_dim
    horizon = horizon_patches * cfg.patch_len
    return {"head.fcst.w": (flat, horizon), "head.fcst.b": (horizon,)}


def _init_array(name: str, shape: tuple[int, ...], stream: Rng) -> np.ndarray:
    if name.endswith((".bias", ".b", ".b1", ".b2", ".b3")):
        return np.zeros(shape)
    if name.endswith(".gain"):
        return np.ones(shape)
    if name in ("embed.pos", "embed.mask"):
        return _INIT_STD * stream.normals(int(np.prod(shape))).reshape(shape)
    fan_in, fan_out = shape[0], shape[-1]
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return (stream.uniforms(int(np.prod(shape))) * 2.0 - 1.0).reshape(shape) * limit


class ParameterStore:
    """Named learnable tensors; names and shapes derive from a ModelConfig."""

    def __init__(self):
        self._tensors: dict[str, Tensor] = {}

    @classmethod
    def initialize(cls, cfg: ModelConfig, seed: int) -> "ParameterStore":
        store = cls()
        store.add(param_shapes(cfg), seed)
        return store

    def add(self, shapes: dict[str, tuple[int, ...]], seed: int) -> None:
        """Initialize and register parameters; re-adding a name is an error."""
        stream = Rng(seed)
        for index, (name, shape) in enumerate(shapes.items()):
            if name in self._tensors:
                raise ConfigError(f"parameter {name!r} already exists")
            self._tensors[name] = Tensor(
                _init_array(name, shape, stream.split(index)), requires_grad=True
            )

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def names(self) -> list[str]:
        return list(self._tensors)

    def items(self):
        return self._tensors.items()

    def tensors(self, prefix: str = "") -> dict[str, Tensor]:
        return {k: v for k, v in self._tensors.items() if k.startswith(prefix)}

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self._tensors.items()}

    def n_scalars(self) -> int:
        return sum(v.size for v in self._tensors.values())

    def clone(self) -> "ParameterStore":
        out = ParameterStore()
        for k, v in self._tensors.items():
            out._tensors[k] = Tensor(v.data.copy(), requires_grad=True)
        return out


def save_params(store: ParameterStore, path) -> None:
    nm.save_checkpoint(store.arrays(), path)


def load_params(path, cfg: ModelConfig) -> ParameterStore:
    """Load a checkpoint, validating backbone shapes against the config."""
    arrays = nm.load_checkpoint(path)
    expected = param_shapes(cfg)
    for name, shape in expected.items():
        if name not in arrays:
            raise FormatError(f"checkpoint missing parameter {name!r}")
        if arrays[name].shape != shape:
            raise FormatError(
                f"checkpoint parameter {name!r} has shape {arrays[name].shape}, "
                f"config requires {shape}"
            )
    store = ParameterStore()
    for name, array in arrays.items():
        store._tensors[name] = Tensor(array, requires_grad=True)
    return store


# ---------------------------------------------------------------------------
# embeddings
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class EmbeddingTensor:
    """(channels, patches, model_dim) activations with a role tag."""

    values: Tensor
    role: str = "input"

    def __post_init__(self) -> None:
        if self.values.data.ndim != 3:
            raise ConfigError(f"embedding must be 3-D, got {self.values.shape}")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape


def _positional_rows(params: ParameterStore, n_patches: int) -> Tensor:
    pos = nm.embedding_lookup(params["embed.pos"], np.arange(n_patches))
    return nm.reshape(pos, (1, n_patches, pos.shape[-1]))


def embed(
    grid: PatchGrid,
    bands: BandPowerTensor | None,
    params: ParameterStore,
    cfg: ModelConfig,
) -> EmbeddingTensor:
    """Fuse patch content, softmax-normalized band powers, and position."""
    c, p, length = grid.patches.shape
    if length != cfg.patch_len:
        raise ConfigError(f"grid patch_len {length} != config patch_len {cfg.patch_len}")
    if p > cfg.max_patches:
        raise CapacityError(f"{p} patches exceeds max_patches {cfg.max_patches}")
    patches = Tensor(grid.patches)
    if cfg.conv_embed:
        k = cfg.conv_kernel
        windows = nm.reshape(patches, (c, p, length // k, k))
        moved = nm.matmul(windows, params["embed.patch.w"])
        e_patch = nm.add(nm.mean(moved, axis=2), params["embed.patch.b"])
    else:
        e_patch = nm.add(nm.matmul(patches, params["embed.patch.w"]), params["embed.patch.b"])
    total = e_patch
    if cfg.use_freq_embed:
        if bands is None:
            raise ConfigError("config uses the frequency embedding but bands is None")
        if bands.values.shape[:2] != (c, p):
            raise ConfigError(
                f"band tensor shape {bands.values.shape} does not match grid ({c}, {p})"
            )
        weights = nm.softmax(Tensor(bands.values), axis=-1)
        e_freq = nm.add(nm.matmul(weights, params["embed.freq.w"]), params["embed.freq.b"])
        total = nm.add(total, e_freq)
    e_input = nm.add(total, _positional_rows(params, p))
    return EmbeddingTensor(e_input, role="input")


def apply_mask(
    e_input: EmbeddingTensor,
    mask_indices,
    params: ParameterStore,
    cfg: ModelConfig,
) -> EmbeddingTensor:
    """Replace masked (channel, patch) rows with [MASK] + position."""
    c, p, d = e_input.shape
    gate = np.zeros((c, p, 1))
    for ch, pa in mask_indices:
        if not (0 <= ch < c and 0 <= pa < p):
            raise IndexError(f"mask slot ({ch}, {pa}) out of range for ({c}, {p})")
        gate[ch, pa, 0] = 1.0
    mask_row = nm.reshape(params["embed.mask"], (1, 1, d))
    replacement = nm.add(mask_row, _positional_rows(params, p))
    kept = nm.mul(e_input.values, Tensor(1.0 - gate))
    injected = nm.mul(replacement, Tensor(gate))
    return EmbeddingTensor(nm.add(kept, injected), role="input")


# ---------------------------------------------------------------------------
# encoder blocks
# ---------------------------------------------------------------------------


def _maybe_dropout(x: Tensor, p: float, stream: Rng | None) -> Tensor:
    if p <= 0.0 or stream is None:
        return x
    keep = (stream.uniforms(x.size) >= p).astype(np.float64).reshape(x.shape)
    return nm.mul(x, Tensor(keep / (1.0 - p)))


def _affine_norm(x: Tensor, params: ParameterStore, name: str) -> Tensor:
    normed = nm.layer_norm(x, axis=-1)
    return nm.add(nm.mul(normed, params[f"{name}.gain"]), params[f"{name}.bias"])


def _split_heads(x: Tensor, heads: int, head_dim: int) -> Tensor:
    b, s, _ = x.shape
    return nm.transpose(nm.reshape(x, (b, s, heads, head_dim)), 1, 2)


def _merge_heads(x: Tensor) -> Tensor:
    b, h, s, dv = x.shape
    return nm.reshape(nm.transpose(x, 1, 2), (b, s, h * dv))


def _encoder_block(
    x: Tensor,
    params: ParameterStore,
    prefix: str,
    cfg: ModelConfig,
    stream: Rng | None,
) -> Tensor:
    """Pre-norm transformer block over the middle axis of (batch, seq, dim)."""
    a = _affine_norm(x, params, f"{prefix}.ln1")
    q = _split_heads(nm.matmul(a, params[f"{prefix}.attn.wq"]), cfg.heads, cfg.d_k)
    k = _split_heads(nm.matmul(a, params[f"{prefix}.attn.wk"]), cfg.heads, cfg.d_k)
    v = _split_heads(nm.matmul(a, params[f"{prefix}.attn.wv"]), cfg.heads, cfg.d_v)
    scores = nm.scale(nm.matmul(q, nm.transpose(k)), 1.0 / cfg.scale_denominator)
    probs = nm.softmax(scores, axis=-1)
    context = nm.matmul(_merge_heads(nm.attn_mix(probs, v)), params[f"{prefix}.attn.wo"])
    x = nm.add(x, _maybe_dropout(context, cfg.dropout, stream))
    f = _affine_norm(x, params, f"{prefix}.ln2")
    hidden = nm.gelu(nm.add(nm.matmul(f, params[f"{prefix}.ffn.w1"]), params[f"{prefix}.ffn.b1"]))
    produced = nm.add(nm.matmul(hidden, params[f"{prefix}.ffn.w2"]), params[f"{prefix}.ffn.b2"])
    return nm.add(x, _maybe_dropout(produced, cfg.dropout, stream))


def temporal_attention(
    e: EmbeddingTensor,
    params: ParameterStore,
    layer: int,
    cfg: ModelConfig,
    stream: Rng | None = None,
) -> EmbeddingTensor:
    """Attend over the patch axis, independently per channel."""
    out = _encoder_block(e.values, params, f"temporal{layer}", cfg, stream)
    return EmbeddingTensor(out, role="time")


def channel_attention(
    e: EmbeddingTensor,
    params: ParameterStore,
    layer: int,
    cfg: ModelConfig,
    stream: Rng | None = None,
) -> EmbeddingTensor:
    """Attend over the channel axis, independently per patch index."""
    flipped = nm.transpose(e.values, 0, 1)
    out = _encoder_block(flipped, params, f"channel{layer}", cfg, stream)
    return EmbeddingTensor(nm.transpose(out, 0, 1), role="channel")


def forward(
    grid: PatchGrid,
    bands: BandPowerTensor | None,
    params: ParameterStore,
    cfg: ModelConfig,
    mask_indices=None,
    stream: Rng | None = None,
) -> EmbeddingTensor:
    """Embed, optionally mask, then run the full encoder stack."""
    e = embed(grid, bands, params, cfg)
    if mask_indices:
        e = apply_mask(e, mask_indices, params, cfg)
    if cfg.interleave:
        for i in range(max(cfg.temporal_layers, cfg.channel_layers)):
            if i < cfg.temporal_layers:
                e = temporal_attention(e, params, i, cfg, stream)
            if i < cfg.channel_layers:
                e = channel_attention(e, params, i, cfg, stream)
    else:
        for i in range(cfg.temporal_layers):
            e = temporal_attention(e, params, i, cfg, stream)
        for i in range(cfg.channel_layers):
            e = channel_attention(e, params, i, cfg, stream)
    return e


# ---------------------------------------------------------------------------
# task heads
# ---------------------------------------------------------------------------


def head_reconstruct(e: EmbeddingTensor, params: ParameterStore) -> Tensor:
    """Per-slot linear map back to waveform space: (C, P, D) -> (C, P, L)."""
    return nm.add(nm.matmul(e.values, params["head.recon.w"]), params["head.recon.b"])


def head_classify(e: EmbeddingTensor, params: ParameterStore, n_classes: int) -> Tensor:
    """Mean-pool over channels and patches, reduce three times, softmax."""
    pooled = nm.reshape(nm.mean(e.values, axis=(0, 1)), (1, e.shape[2]))
    h1 = nm.gelu(nm.add(nm.matmul(pooled, params["head.cls.w1"]), params["head.cls.b1"]))
    h2 = nm.gelu(nm.add(nm.matmul(h1, params["head.cls.w2"]), params["head.cls.b2"]))
    logits = nm.add(nm.matmul(h2, params["head.cls.w3"]), params["head.cls.b3"])
    return nm.softmax(nm.reshape(logits, (n_classes,)), axis=-1)


def head_forecast(e: EmbeddingTensor, params: ParameterStore, horizon_patches: int) -> Tensor:
    """Flatten each channel's (P, D) block and project to the horizon."""
    c, p, d = e.shape
    flat = nm.reshape(e.values, (c, p * d))
    expected = params["head.fcst.w"].shape[0]
    if p * d != expected:
        raise ConfigError(
            f"forecast head expects {expected} flattened features, got {p * d}"
        )
    return nm.add(nm.matmul(flat, params["head.fcst.w"]), params["head.fcst.b"])


# ---------------------------------------------------------------------------
# config file I/O (plain key=value)
# ---------------------------------------------------------------------------


def write_model_config(cfg: ModelConfig, path) -> None:
    try:
        with open(path, "w") as fh:
            for f in fields(cfg):
                fh.write(f"{f.name}={getattr(cfg, f.name)}\n")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def read_model_config(path) -> ModelConfig:
    """Parse key=value lines; a `preset=<name>` line seeds the defaults."""
    try:
        with open(path) as fh:
            lines = [ln.strip() for ln in fh if ln.strip() and not ln.startswith("#")]
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    known = {f.name: f for f in fields(ModelConfig)}
    values: dict = {}
    base: dict = {}
    for line in lines:
        if "=" not in line:
            raise FormatError(f"{path}: expected key=value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key == "preset":
            base = dict(_PRESETS.get(raw) or {})
            if not base:
                raise ConfigError(f"{path}: unknown preset {raw!r}")
            continue
        if key not in known:
            raise ConfigError(f"{path}: unknown config key {key!r}")
        values[key] = _parse_field(raw)
    return ModelConfig(**{**base, **values})


def _parse_field(raw: str):
    if raw in ("True", "False"):
        return raw == "True"
    if raw == "None":
        return None
    try:
        return int(raw)
    except ValueError:
        pass
    try:
        return float(raw)
    except ValueError:
        return raw
