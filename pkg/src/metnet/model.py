"""MetNet: spatial downsampler, ConvLSTM temporal encoder, axial-attention aggregator, categorical head.

Parameters live in a :class:`~metnet.params.ParameterStore` under dotted
names; every layer function takes the store and its name prefix.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import ops
from .params import ParameterStore, he_std, truncated_normal
from .preprocess import prob_above_threshold
from .profile import ModelProfile
from .tensor import Tensor, as_tensor

AXES = ("width", "height")
POS_EMBED_STD = 0.02
HEAD_STD = 0.01


# --- parameter layout --------------------------------------------------------

@dataclass(frozen=True)
class ParamSpec:
    name: str
    shape: tuple[int, ...]
    init: str  # "he", "zeros", "ones", "embed", "head"
    fan_in: int = 0


def _conv_specs(name, kh, cin, cout):
    return [ParamSpec(f"{name}.w", (kh, kh, cin, cout), "he", kh * kh * cin), ParamSpec(f"{name}.b", (cout,), "zeros")]


def _dense_specs(name, din, dout):
    return [ParamSpec(f"{name}.w", (din, dout), "he", din), ParamSpec(f"{name}.b", (dout,), "zeros")]


def _ln_specs(name, dim):
    return [ParamSpec(f"{name}.g", (dim,), "ones"), ParamSpec(f"{name}.b", (dim,), "zeros")]


def parameter_specs(profile: ModelProfile) -> list[ParamSpec]:
    c1, c2 = profile.downsampler_channels
    ce, ca = profile.encoder_channels, profile.aggregator_channels
    cin = profile.packed_channels
    specs: list[ParamSpec] = []
    if profile.first_conv:
        specs += _conv_specs("down.conv0", 3, cin, c1)
        cin = c1
    specs += _conv_specs("down.conv1", 3, cin, c2)
    specs += _conv_specs("down.conv2", 3, c2, c2)
    specs += _conv_specs("down.conv3", 3, c2, c2)
    specs += _ln_specs("down.ln", c2)
    specs += _conv_specs("enc", 3, c2 + ce, 4 * ce)
    specs += _dense_specs("agg.proj", ce, ca)
    for k in range(profile.blocks):
        p = f"agg.block{k}"
        specs += _ln_specs(f"{p}.ln1", ca)
        specs.append(ParamSpec(f"{p}.pos", (profile.target_size, ca), "embed"))
        for proj in ("q", "k", "v", "o"):
            specs += _dense_specs(f"{p}.{proj}", ca, ca)
        specs += _ln_specs(f"{p}.ln2", ca)
        specs += _dense_specs(f"{p}.ffn1", ca, profile.ffn_channels)
        specs += _dense_specs(f"{p}.ffn2", profile.ffn_channels, ca)
    specs += [ParamSpec("head.w", (ca, profile.bins), "head", ca), ParamSpec("head.b", (profile.bins,), "zeros")]
    return specs


def count_parameters(profile: ModelProfile) -> int:
    return int(sum(np.prod(s.shape) for s in parameter_specs(profile)))


def init_params(profile: ModelProfile, seed: int, dtype=np.float32) -> ParameterStore:
    """Truncated-normal He init for conv/dense weights, zero biases, unit norm gains.

    The output head starts small so the initial distribution is close to
    uniform (loss near ln K) instead of a random sharp one.
    """
    rng = np.random.default_rng(seed)
    store = ParameterStore()
    for s in parameter_specs(profile):
        if s.init == "he":
            value = truncated_normal(rng, s.shape, he_std(s.fan_in), dtype)
        elif s.init == "embed":
            value = truncated_normal(rng, s.shape, POS_EMBED_STD, dtype)
        elif s.init == "head":
            value = truncated_normal(rng, s.shape, HEAD_STD, dtype)
        elif s.init == "ones":
            value = np.ones(s.shape, dtype=dtype)
        else:
            value = np.zeros(s.shape, dtype=dtype)
        store.add(s.name, value)
    return store


# --- layers ----------------------------------------------------------------

def _conv(store, name, x, stride=1):
    return ops.conv2d(x, store[f"{name}.w"], store[f"{name}.b"], stride=stride, padding="same")


def _dense(store, name, x):
    return ops.dense(x, store[f"{name}.w"], store[f"{name}.b"])


def spatial_downsampler(store: ParameterStore, x: Tensor, profile: ModelProfile) -> Tensor:
    """conv3x3(C1) -> maxpool2 -> 3 x conv3x3(C2) -> maxpool2 -> layer norm, ReLU after each conv.

    With ``profile.first_conv`` off the first conv is skipped and pooling
    acts on the packed input directly. The closing layer norm keeps the
    ConvLSTM gate inputs at unit scale; without it the unbounded ReLU stack
    can grow until every gate saturates and the encoder output stops
    depending on the input.
    """
    h, w = x.shape[1:3]
    if h % 4 or w % 4:
        raise ops.ShapeError(f"downsampler input {h}x{w} not divisible by 4")
    if profile.first_conv:
        x = ops.relu(_conv(store, "down.conv0", x))
    x = ops.max_pool2d(x, 2, 2)
    for name in ("down.conv1", "down.conv2", "down.conv3"):
        x = ops.relu(_conv(store, name, x))
    x = ops.max_pool2d(x, 2, 2)
    return ops.layer_norm(x, store["down.ln.g"], store["down.ln.b"])


def conv_lstm_step(store: ParameterStore, x_t: Tensor, state: tuple[Tensor, Tensor], prefix: str = "enc") -> tuple[Tensor, Tensor]:
    """One ConvLSTM update with a single fused 3x3 gate convolution over [x_t, h]."""
    h, c = state
    if x_t.shape[:3] != h.shape[:3] or h.shape != c.shape:
        raise ops.ShapeError(f"conv_lstm_step: input {x_t.shape} and state {h.shape}/{c.shape} disagree")
    gates = _conv(store, prefix, ops.concat([x_t, h], axis=-1))
    gi, gf, go, gg = ops.split(gates, 4, axis=-1)
    i, f, o = ops.sigmoid(gi), ops.sigmoid(gf), ops.sigmoid(go)
    g = ops.tanh(gg)
    c_new = f * c + i * g
    h_new = o * ops.tanh(c_new)
    return h_new, c_new


def temporal_encode(store: ParameterStore, slices: Sequence[Tensor], profile: ModelProfile, prefix: str = "enc") -> Tensor:
    """Run the ConvLSTM oldest -> newest from a zero state; return the final hidden state."""
    if not slices:
        raise ValueError("temporal_encode needs at least one slice")
    first = slices[0]
    shape = first.shape[:3] + (profile.encoder_channels,)
    h = Tensor(np.zeros(shape, dtype=first.dtype))
    c = Tensor(np.zeros(shape, dtype=first.dtype))
    for x_t in slices:
        if x_t.shape != first.shape:
            raise ops.ShapeError(f"slice shapes differ: {x_t.shape} vs {first.shape}")
        h, c = conv_lstm_step(store, x_t, (h, c), prefix)
    return h


def axial_attention(store: ParameterStore, x: Tensor, axis: str, heads: int, prefix: str) -> Tensor:
    """Multi-head self-attention along each 1-D line of ``x`` ([N, H, W, C]).

    Learned per-position embeddings (``{prefix}.pos``) are added to the
    query/key inputs only. ``axis="width"`` attends within rows.
    """
    if axis not in AXES:
        raise ValueError(f"axis must be one of {AXES}, got {axis!r}")
    n, hh, ww, c = x.shape
    if c % heads:
        raise ops.ShapeError(f"heads ({heads}) must divide channels ({c})")
    if axis == "height":
        x = ops.transpose(x, (0, 2, 1, 3))
    a, length = x.shape[1], x.shape[2]
    d = c // heads
    lines = ops.reshape(x, (n * a, length, c))
    qk_in = lines + store[f"{prefix}.pos"][:length]

    def split_heads(t):
        return ops.transpose(ops.reshape(t, (n * a, length, heads, d)), (0, 2, 1, 3))

    q = split_heads(_dense(store, f"{prefix}.q", qk_in))
    k = split_heads(_dense(store, f"{prefix}.k", qk_in))
    v = split_heads(_dense(store, f"{prefix}.v", lines))
    scores = ops.matmul(q, ops.transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(d))
    attn = ops.softmax(scores, axis=-1)
    mixed = ops.reshape(ops.transpose(ops.matmul(attn, v), (0, 2, 1, 3)), (n * a, length, c))
    out = ops.reshape(_dense(store, f"{prefix}.o", mixed), (n, a, length, c))
    if axis == "height":
        out = ops.transpose(out, (0, 2, 1, 3))
    return out


def axial_attention_block(store: ParameterStore, x: Tensor, axis: str, heads: int, prefix: str) -> Tensor:
    """Pre-norm residual attention sublayer followed by a pre-norm residual ReLU feed-forward."""
    y = x + axial_attention(store, ops.layer_norm(x, store[f"{prefix}.ln1.g"], store[f"{prefix}.ln1.b"]), axis, heads, prefix)
    z = ops.layer_norm(y, store[f"{prefix}.ln2.g"], store[f"{prefix}.ln2.b"])
    return y + _dense(store, f"{prefix}.ffn2", ops.relu(_dense(store, f"{prefix}.ffn1", z)))


def spatial_aggregator(store: ParameterStore, x: Tensor, profile: ModelProfile) -> Tensor:
    """Project to the aggregator width, then alternate width/height axial blocks."""
    x = _dense(store, "agg.proj", x)
    for k in range(profile.blocks):
        x = axial_attention_block(store, x, AXES[k % 2], profile.heads, f"agg.block{k}")
    return x


def output_head(store: ParameterStore, x: Tensor, profile: ModelProfile) -> Tensor:
    """1x1 conv to ``bins`` logits per position; softmax is applied by the caller/loss."""
    t = profile.target_size
    if x.shape[1:3] != (t, t):
        raise ops.ShapeError(f"output head expects {t}x{t} grid, got {x.shape[1:3]}")
    return _dense(store, "head", x)


# --- packaging and full forward ------------------------------------------------

def _center_crop_5d(x: Tensor, size: int) -> Tensor:
    h = x.shape[2]
    top = (h - size) // 2
    left = (x.shape[3] - size) // 2
    return x[:, :, top : top + size, left : left + size, :]


def adapt_input(x: Tensor, profile: ModelProfile) -> Tensor:
    """Fit an assembled ``[N, t, H, W, c]`` batch to ``profile``.

    Keeps the newest ``profile.slices`` slices, centre-crops to
    ``profile.input_size`` and zeroes the precipitation channel when the
    profile excludes it. This is how ablations consume full-size samples.
    """
    if x.ndim != 5:
        raise ops.ShapeError(f"expected [N, t, H, W, c] input, got {x.shape}")
    n, t, h, w, c = x.shape
    if c != profile.input_channels:
        raise ops.ShapeError(f"input has {c} channels, profile expects {profile.input_channels}")
    if t < profile.slices:
        raise ops.ShapeError(f"input has {t} slices, profile needs {profile.slices}")
    if h < profile.input_size or w < profile.input_size:
        raise ops.ShapeError(f"input {h}x{w} smaller than profile input_size {profile.input_size}")
    if t > profile.slices:
        x = x[:, t - profile.slices :]
    if h > profile.input_size or w > profile.input_size:
        x = _center_crop_5d(x, profile.input_size)
    if not profile.use_precip:
        keep = np.ones(c, dtype=x.dtype)
        keep[0] = 0.0
        x = x * keep
    return x


def pack(x: Tensor, profile: ModelProfile) -> Tensor:
    """Space-to-depth on the non-lead channels; lead channels (spatially constant) are subsampled."""
    n, t, h, w, _ = x.shape
    b = profile.s2d_block
    base = profile.base_channels
    feats = x[..., :base]
    lead = x[:, :, ::b, ::b, base:]
    if b > 1:
        feats = ops.reshape(feats, (n, t, h // b, b, w // b, b, base))
        feats = ops.transpose(feats, (0, 1, 2, 4, 3, 5, 6))
        feats = ops.reshape(feats, (n, t, h // b, w // b, b * b * base))
    return ops.concat([feats, lead], axis=-1)


def forward(store: ParameterStore, x, profile: ModelProfile) -> Tensor:
    """Logits ``[N, target, target, bins]`` for a batch of assembled input patches."""
    x = adapt_input(as_tensor(x), profile)
    packed = pack(x, profile)
    n, t, p = packed.shape[:3]
    down = spatial_downsampler(store, ops.reshape(packed, (n * t, p, p, packed.shape[-1])), profile)
    down = ops.reshape(down, (n, t) + down.shape[1:])
    hidden = temporal_encode(store, [down[:, k] for k in range(t)], profile)
    return output_head(store, spatial_aggregator(store, hidden, profile), profile)


def softmax_np(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class CategoricalPrecipDistribution:
    """Per-pixel probabilities over rate bins, ``probs`` shaped ``[..., bins]``."""

    probs: np.ndarray
    bin_width: float = 0.2

    def prob_above(self, threshold: float) -> np.ndarray:
        return prob_above_threshold(self.probs, threshold, self.bin_width)

    def expected_rate(self) -> np.ndarray:
        centers = (np.arange(self.probs.shape[-1]) + 0.5) * self.bin_width
        return self.probs @ centers


def predict(store: ParameterStore, x, profile: ModelProfile, batch_size: int = 16) -> CategoricalPrecipDistribution:
    """Forward without taping, batched; returns probabilities."""
    x = np.asarray(x.data if isinstance(x, Tensor) else x)
    outs = []
    grads = {name: p.requires_grad for name, p in store.params.items()}
    try:
        for p in store.params.values():
            p.requires_grad = False
        for lo in range(0, x.shape[0], batch_size):
            outs.append(softmax_np(forward(store, x[lo : lo + batch_size], profile).data))
    finally:
        for name, p in store.params.items():
            p.requires_grad = grads[name]
    return CategoricalPrecipDistribution(np.concatenate(outs, axis=0), profile.bin_width)


# --- receptive field -------------------------------------------------------

def conv_receptive_field(profile: ModelProfile, cell: int, slice_index: int) -> tuple[int, int]:
    """Source-pixel interval (inclusive, one axis) that can reach aggregated cell ``cell``.

    Ignores the aggregator (attention is global). Slice ``k`` of ``t`` passes
    through ``t - k`` ConvLSTM 3x3 convolutions after the downsampler.
    """
    lstm_steps = profile.slices - slice_index
    lo, hi = cell - lstm_steps, cell + lstm_steps
    # Second pool, three 3x3 convs, first pool, optional first conv (packed pixels).
    lo, hi = 2 * lo, 2 * hi + 1
    lo, hi = lo - 3, hi + 3
    lo, hi = 2 * lo, 2 * hi + 1
    if profile.first_conv:
        lo, hi = lo - 1, hi + 1
    b = profile.s2d_block
    return lo * b, hi * b + b - 1
