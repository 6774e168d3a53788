"""Depth-sequence transformer.

Pipeline: slice-wise 3-D CNN encoder (in-plane stride 2, depth stride 1) ->
spatial mean pool -> token sequence with a [CLS] token and padding to a fixed
capacity -> stack of depth attention blocks -> a per-slice localisation head
(softmax over depth per landmark) and a [CLS] classification head.
"""
from __future__ import annotations

import dataclasses
import math
import tracemalloc
from dataclasses import dataclass, field

import numpy as np

from .tensorcore import Tensor
from .tensorcore import ops as F
from .volume_io import Volume

HU_CLIP = (-100.0, 1500.0)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int = 1
    encoder_channels: tuple[int, ...] = (8, 16, 32)
    d_model: int = 32
    n_layers: int = 2
    n_heads: int = 4
    conv_kernel_depth: int = 3
    d_max: int = 32
    n_landmarks: int = 6
    n_classes: int = 3
    dropout: float = 0.0
    encoder_kernel: tuple[int, int, int] = (3, 3, 3)
    padding_side: str = "left"
    cls_position: str = "after_pads"
    attention_enabled: bool = True

    def __post_init__(self):
        object.__setattr__(self, "encoder_channels", tuple(int(c) for c in self.encoder_channels))
        object.__setattr__(self, "encoder_kernel", tuple(int(k) for k in self.encoder_kernel))
        problems = []
        if self.d_model % self.n_heads:
            problems.append("d_model must be divisible by n_heads")
        if self.d_max < 1:
            problems.append("d_max must be >= 1")
        if self.n_landmarks < 1:
            problems.append("n_landmarks must be >= 1")
        if self.n_layers < 0:
            problems.append("n_layers must be >= 0")
        if self.conv_kernel_depth % 2 == 0:
            problems.append("conv_kernel_depth must be odd")
        if any(k % 2 == 0 for k in self.encoder_kernel):
            problems.append("encoder_kernel sizes must be odd")
        if not 0.0 <= self.dropout < 1.0:
            problems.append("dropout must lie in [0, 1)")
        if self.padding_side not in ("left", "right"):
            problems.append("padding_side must be 'left' or 'right'")
        if self.cls_position not in ("after_pads", "front"):
            problems.append("cls_position must be 'after_pads' or 'front'")
        if problems:
            raise ConfigError("; ".join(problems))

    @property
    def seq_len(self) -> int:
        return self.d_max + 1

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["encoder_channels"] = list(self.encoder_channels)
        d["encoder_kernel"] = list(self.encoder_kernel)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)


def normalize_hu(voxels: np.ndarray) -> np.ndarray:
    """Clip HU to [-100, 1500] and rescale to [0, 1]."""
    lo, hi = HU_CLIP
    return (np.clip(np.asarray(voxels, dtype=np.float64), lo, hi) - lo) / (hi - lo)


# ------------------------------------------------------------------ parameters

def init_params(cfg: ModelConfig, seed: int = 0) -> dict[str, Tensor]:
    """Uniform(+-sqrt(1/fan_in)) for conv/linear weights and biases; unit/zero norms.

    Encoder convs carry no bias; the following norm supplies the shift.

    The [CLS] token and positional table are drawn from N(0, 0.02^2).
    """
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}

    def uniform(name, shape, fan_in):
        bound = math.sqrt(1.0 / fan_in)
        params[name] = Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, name=name)

    def const(name, shape, value):
        params[name] = Tensor(np.full(shape, value, dtype=np.float64), requires_grad=True, name=name)

    kh, kw, kd = cfg.encoder_kernel
    c_in = cfg.in_channels
    for i, c_out in enumerate(cfg.encoder_channels):
        fan = c_in * kh * kw * kd
        uniform(f"enc.{i}.w", (c_out, c_in, kh, kw, kd), fan)
        const(f"enc.{i}.norm.g", (c_out,), 1.0)
        const(f"enc.{i}.norm.b", (c_out,), 0.0)
        c_in = c_out
    C = cfg.d_model
    uniform("enc.proj.w", (c_in, C), c_in)
    uniform("enc.proj.b", (C,), c_in)
    params["cls_token"] = Tensor(rng.normal(0.0, 0.02, size=(C,)), requires_grad=True, name="cls_token")
    params["pos_embed"] = Tensor(rng.normal(0.0, 0.02, size=(cfg.seq_len, C)), requires_grad=True,
                                 name="pos_embed")
    k = cfg.conv_kernel_depth
    for l in range(cfg.n_layers):
        p = f"blocks.{l}."
        uniform(p + "conv.w", (C, k), k)
        uniform(p + "conv.b", (C,), k)
        if cfg.attention_enabled:
            const(p + "ln1.g", (C,), 1.0)
            const(p + "ln1.b", (C,), 0.0)
            for m in ("q", "k", "v", "o"):
                uniform(p + f"attn.w{m}", (C, C), C)
                uniform(p + f"attn.b{m}", (C,), C)
        const(p + "ln2.g", (C,), 1.0)
        const(p + "ln2.b", (C,), 0.0)
        uniform(p + "mlp.w1", (C, 4 * C), C)
        uniform(p + "mlp.b1", (4 * C,), C)
        uniform(p + "mlp.w2", (4 * C, C), 4 * C)
        uniform(p + "mlp.b2", (C,), 4 * C)
    const("final_ln.g", (C,), 1.0)
    const("final_ln.b", (C,), 0.0)
    uniform("head.loc.w", (C, cfg.n_landmarks), C)
    uniform("head.loc.b", (cfg.n_landmarks,), C)
    uniform("head.cls.w", (C, cfg.n_classes), C)
    uniform("head.cls.b", (cfg.n_classes,), C)
    return params


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    return {k: v.shape for k, v in init_params(cfg, 0).items()}


# --------------------------------------------------------------------- encoder

def encode_slices(x: Tensor, cfg: ModelConfig, params: dict[str, Tensor]) -> Tensor:
    """(B, Cin, H, W, D) -> (B, d_model, D); depth is never downsampled."""
    if x.ndim != 5:
        raise ConfigError(f"encoder input must be (B, C, H, W, D), got {x.shape}")
    H, W = x.shape[2], x.shape[3]
    factor = 2 ** len(cfg.encoder_channels)
    if H % factor or W % factor:
        raise ConfigError(f"in-plane dims {H}x{W} must be divisible by {factor}")
    pad = tuple(k // 2 for k in cfg.encoder_kernel)
    h = x
    for i in range(len(cfg.encoder_channels)):
        # no conv bias: on air voxels the output would be the bias alone, and the
        # per-voxel channel norm divides by its spread, which destabilises training
        h = F.conv3d(h, params[f"enc.{i}.w"], None, stride=(2, 2, 1), padding=pad)
        h = F.channel_norm(h, params[f"enc.{i}.norm.g"], params[f"enc.{i}.norm.b"])
        h = F.gelu(h)
    pooled = F.mean_pool(h, (2, 3))  # (B, C_last, D)
    tokens = F.linear(F.transpose(pooled, (0, 2, 1)), params["enc.proj.w"], params["enc.proj.b"])
    return F.transpose(tokens, (0, 2, 1))


# -------------------------------------------------------------------- sequence

@dataclass
class PreparedSequence:
    tokens: Tensor            # (B, L, C)
    mask: np.ndarray          # (B, L) bool: [CLS] + real slices
    cls_index: np.ndarray     # (B,)
    first_valid: np.ndarray   # (B,) position of the first real slice
    depths: np.ndarray        # (B,)

    @property
    def slice_mask(self) -> np.ndarray:
        m = self.mask.copy()
        m[np.arange(len(self.cls_index)), self.cls_index] = False
        return m


def sequence_layout(depth: int, cfg: ModelConfig) -> tuple[int, int]:
    """(cls_index, first_valid) for a sequence of ``depth`` real slices."""
    if depth > cfg.d_max:
        raise ConfigError(f"sequence of {depth} slices exceeds d_max={cfg.d_max}")
    if depth < 1:
        raise ConfigError("sequence needs at least one slice")
    n_pad = cfg.d_max - depth
    if cfg.padding_side == "right":
        return 0, 1
    if cfg.cls_position == "front":
        return 0, 1 + n_pad
    return n_pad, n_pad + 1


def prepare_sequence(features: list[Tensor], cfg: ModelConfig, params: dict[str, Tensor]) -> PreparedSequence:
    """Place per-sample slice features (each (d_model, D_b)) into padded token rows.

    Positional embeddings are added after placement, so with left padding the
    last real slice always sits at the final absolute position.
    """
    C = cfg.d_model
    L = cfg.seq_len
    rows, masks, cls_idx, first, depths = [], [], [], [], []
    cls = F.reshape(params["cls_token"], (1, C))
    for feat in features:
        if feat.ndim != 2 or feat.shape[0] != C:
            raise ConfigError(f"slice features must be (d_model, D), got {feat.shape}")
        D = feat.shape[1]
        ci, fv = sequence_layout(D, cfg)
        slices = F.transpose(feat, (1, 0))
        n_pad = cfg.d_max - D
        pad = Tensor(np.zeros((n_pad, C)))
        if cfg.padding_side == "right":
            parts = [cls, slices, pad]
        elif cfg.cls_position == "front":
            parts = [cls, pad, slices]
        else:
            parts = [pad, cls, slices]
        rows.append(F.concat([p for p in parts if p.shape[0]], axis=0))
        m = np.zeros(L, dtype=bool)
        m[ci] = True
        m[fv:fv + D] = True
        masks.append(m)
        cls_idx.append(ci)
        first.append(fv)
        depths.append(D)
    tokens = F.add(F.stack(rows, axis=0), params["pos_embed"])
    return PreparedSequence(tokens, np.stack(masks), np.asarray(cls_idx), np.asarray(first), np.asarray(depths))


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    if rate <= 0.0 or rng is None:
        return x
    keep = rng.random(x.shape) >= rate
    return F.mul(x, keep / (1.0 - rate))


def depth_attention_block(seq: PreparedSequence, cfg: ModelConfig, params: dict[str, Tensor], layer: int,
                          rng: np.random.Generator | None = None) -> PreparedSequence:
    """Residual sublayers: depthwise conv over tokens, pre-norm MHSA, pre-norm MLP.

    Padded tokens are zeroed before and after the convolution so their
    content never reaches a valid position. Without attention the MHSA
    sublayer is skipped, leaving a stacked depthwise-conv block.
    """
    p = f"blocks.{layer}."
    x = seq.tokens
    keep = seq.mask[:, :, None]
    h = F.masked_fill(x, keep)
    h = F.transpose(F.conv1d_depthwise(F.transpose(h, (0, 2, 1)), params[p + "conv.w"], params[p + "conv.b"]),
                    (0, 2, 1))
    x = F.add(x, dropout(F.masked_fill(h, keep), cfg.dropout, rng))
    if cfg.attention_enabled:
        h = F.layer_norm(x, params[p + "ln1.g"], params[p + "ln1.b"])
        attn = {k: params[p + "attn." + k] for k in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")}
        x = F.add(x, dropout(F.multihead_attention(h, seq.mask, cfg.n_heads, attn), cfg.dropout, rng))
    h = F.layer_norm(x, params[p + "ln2.g"], params[p + "ln2.b"])
    h = F.linear(F.gelu(F.linear(h, params[p + "mlp.w1"], params[p + "mlp.b1"])),
                 params[p + "mlp.w2"], params[p + "mlp.b2"])
    x = F.add(x, dropout(h, cfg.dropout, rng))
    return dataclasses.replace(seq, tokens=x)


# ----------------------------------------------------------------------- heads

@dataclass
class ModelOutput:
    loc_logits: Tensor        # (B, N, L) over sequence positions
    cls_logits: Tensor        # (B, n_classes)
    slice_mask: np.ndarray    # (B, L)
    first_valid: np.ndarray   # (B,)
    depths: np.ndarray        # (B,)
    tokens: Tensor = field(repr=False, default=None)

    def landmark_logits(self, b: int) -> np.ndarray:
        """(D_b, N) logits over the real slices of sample ``b``."""
        fv, D = int(self.first_valid[b]), int(self.depths[b])
        return self.loc_logits.data[b, :, fv:fv + D].T.copy()

    def landmark_probs(self, b: int) -> np.ndarray:
        """(N, D_b) per-landmark distributions over the real slices of sample ``b``."""
        probs = F.masked_softmax(Tensor(self.loc_logits.data[b]), self.slice_mask[b][None, :]).data
        fv, D = int(self.first_valid[b]), int(self.depths[b])
        return probs[:, fv:fv + D].copy()


def heads(seq: PreparedSequence, cfg: ModelConfig, params: dict[str, Tensor]) -> ModelOutput:
    h = F.layer_norm(seq.tokens, params["final_ln.g"], params["final_ln.b"])
    loc = F.transpose(F.linear(h, params["head.loc.w"], params["head.loc.b"]), (0, 2, 1))
    cls = F.linear(F.select_rows(h, seq.cls_index), params["head.cls.w"], params["head.cls.b"])
    return ModelOutput(loc, cls, seq.slice_mask, seq.first_valid, seq.depths, tokens=seq.tokens)


def run_blocks(seq: PreparedSequence, cfg: ModelConfig, params: dict[str, Tensor],
               rng: np.random.Generator | None = None) -> PreparedSequence:
    for l in range(cfg.n_layers):
        seq = depth_attention_block(seq, cfg, params, l, rng)
    return seq


def encode_batch(volumes, cfg: ModelConfig, params: dict[str, Tensor]) -> list[Tensor]:
    """Encode volumes (depths may differ) into (d_model, D) features.

    Items are either ``Volume`` objects (HU, normalised here) or already
    normalised (H, W, D) arrays.
    """
    if isinstance(volumes, Tensor):
        feats = encode_slices(volumes, cfg, params)
        return [feats[b] for b in range(volumes.shape[0])]
    arrays = [normalize_hu(v.voxels) if isinstance(v, Volume) else np.asarray(v, dtype=np.float64)
              for v in volumes]
    out: list[Tensor | None] = [None] * len(arrays)
    groups: dict[tuple[int, ...], list[int]] = {}
    for i, a in enumerate(arrays):
        if a.ndim != 3:
            raise ConfigError(f"volumes must be (H, W, D), got {a.shape}")
        groups.setdefault(a.shape, []).append(i)
    for shape in sorted(groups):
        idx = groups[shape]
        x = Tensor(np.stack([arrays[i] for i in idx])[:, None])
        feats = encode_slices(x, cfg, params)
        for j, i in enumerate(idx):
            out[i] = feats[j]
    return out  # type: ignore[return-value]


def forward(volumes, cfg: ModelConfig, params: dict[str, Tensor],
            rng: np.random.Generator | None = None) -> ModelOutput:
    feats = encode_batch(volumes, cfg, params)
    seq = prepare_sequence(feats, cfg, params)
    return heads(run_blocks(seq, cfg, params, rng), cfg, params)


class DST:
    """Holds a config plus its named parameters."""

    def __init__(self, cfg: ModelConfig, params: dict[str, Tensor] | None = None, seed: int = 0):
        self.cfg = cfg
        self.params = params if params is not None else init_params(cfg, seed)

    def __call__(self, volumes, rng: np.random.Generator | None = None) -> ModelOutput:
        return forward(volumes, self.cfg, self.params, rng)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, v in state.items():
            self.params[k].data = np.array(v, dtype=np.float64)


# ----------------------------------------------------------------------- FLOPs

def _conv_out(n: int, k: int, s: int, p: int) -> int:
    return (n + 2 * p - k) // s + 1


def estimate_flops(cfg: ModelConfig, dims: tuple[int, int, int]) -> dict[str, int]:
    """Analytic FLOP count (2 x multiply-accumulates) for one volume.

    ``attention_flops`` holds only the token-mixing terms that scale with
    L^2 (QK^T and the weighted value sum) for L = d_max + 1 tokens;
    ``block_flops`` holds the per-token work of the blocks (projections, MLP,
    depthwise conv), which scales linearly in L.
    """
    H, W, D = (int(n) for n in dims)
    kh, kw, kd = cfg.encoder_kernel
    enc = 0
    c_in = cfg.in_channels
    h, w = H, W
    for c_out in cfg.encoder_channels:
        h = _conv_out(h, kh, 2, kh // 2)
        w = _conv_out(w, kw, 2, kw // 2)
        enc += 2 * c_out * c_in * kh * kw * kd * h * w * D
        c_in = c_out
    enc += 2 * D * c_in * cfg.d_model
    L = cfg.seq_len
    C = cfg.d_model
    attention = 0
    block = 0
    for _ in range(cfg.n_layers):
        block += 2 * L * C * cfg.conv_kernel_depth
        block += 2 * L * C * 4 * C * 2
        if cfg.attention_enabled:
            dh = C // cfg.n_heads
            attention += cfg.n_heads * (2 * L * L * dh) * 2
            block += 2 * L * C * C * 4
    head = 2 * L * C * cfg.n_landmarks + 2 * C * cfg.n_classes
    total = enc + attention + block + head
    return {
        "encoder_flops": enc,
        "attention_flops": attention,
        "block_flops": block,
        "head_flops": head,
        "total": total,
    }


def voxel_attention_flops(cfg: ModelConfig, dims: tuple[int, int, int]) -> int:
    """L^2 attention cost if every voxel of the (H, W, D) grid were its own token."""
    H, W, D = (int(n) for n in dims)
    tokens = H * W * D
    return cfg.n_layers * 4 * tokens * tokens * cfg.d_model


def attention_peak_bytes(cfg: ModelConfig, depth: int, seed: int = 0) -> int:
    """Peak bytes allocated by one masked MHSA forward and backward pass.

    Runs on a random (1, depth + 1, d_model) token block, i.e. a full
    sequence of ``depth`` slices plus [CLS]. The in-plane size never enters:
    the encoder has pooled it away before this stage.
    """
    rng = np.random.default_rng(seed)
    C = cfg.d_model
    x = Tensor(rng.normal(size=(1, depth + 1, C)), requires_grad=True)
    mask = np.ones((1, depth + 1), dtype=bool)
    p = {}
    for m in "qkvo":
        p["w" + m] = Tensor(rng.normal(0.0, C ** -0.5, size=(C, C)), requires_grad=True)
        p["b" + m] = Tensor(np.zeros(C), requires_grad=True)
    tracemalloc.start()
    try:
        tracemalloc.reset_peak()
        base = tracemalloc.get_traced_memory()[0]
        F.reduce_sum(F.multihead_attention(x, mask, cfg.n_heads, p)).backward()
        peak = tracemalloc.get_traced_memory()[1]
    finally:
        tracemalloc.stop()
    return int(peak - base)
