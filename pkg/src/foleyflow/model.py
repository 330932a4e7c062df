"""Two-tower diffusion transformer for audio latent velocity prediction.

An audio tower (self-attention, text cross-attention, MLP) and a shallower-
featured video tower (self-attention, MLP) run side by side; after every
layer pair a residual cross-modal mixer exchanges information between the
towers. Timestep conditioning enters every block through adaLN-zero
modulation, so a freshly initialized model is an identity between its input
and output projections. The video tower and mixer are skipped entirely when
the condition bundle carries no video.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields, replace

import numpy as np

from . import container
from .errors import ConfigError, ContractError, FormatError, ShapeError
from .rng import SeededRng, derive_seed
from .tensor import (
    Tensor,
    concat,
    concat_rows,
    gelu,
    layer_norm,
    matmul,
    narrow,
    softmax,
    transpose,
)

# timesteps live in [0, 1]; the sinusoid sees them scaled so neighbouring
# steps of a fine grid stay distinguishable
_TIME_SCALE = 1000.0


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 32
    n_layers: int = 2
    n_heads: int = 4
    d_audio_latent: int = 16
    d_video_feat: int = 16
    d_text: int = 16
    t_audio: int = 32
    guidance_scale: float = 2.0

    def __post_init__(self):
        for name in ("d_model", "n_layers", "n_heads", "d_audio_latent", "d_video_feat", "d_text", "t_audio"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if self.d_model % self.n_heads != 0:
            raise ConfigError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.guidance_scale < 0:
            raise ConfigError(f"guidance_scale must be >= 0, got {self.guidance_scale}")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass(frozen=True)
class ConditionBundle:
    """Conditioning for one generation: optional text and video, keep flags.

    A kept modality must carry its features. A dropped modality may still
    carry stale buffers; the model never reads them (the text side falls
    back to a learned null token, the video side is bypassed).
    extra_tokens, when present, are appended to the cross-attention token
    list in text-embedding space regardless of the keep flags.
    """

    text_emb: object = None
    video_feat: object = None
    text_kept: bool = False
    video_kept: bool = False
    extra_tokens: object = None

    def __post_init__(self):
        if self.text_kept and self.text_emb is None:
            raise ContractError("text_kept=True requires text_emb")
        if self.video_kept and self.video_feat is None:
            raise ContractError("video_kept=True requires video_feat")

    @classmethod
    def unconditional(cls) -> "ConditionBundle":
        return cls()

    def drop_all(self) -> "ConditionBundle":
        """The classifier-free branch: no text, no video, no extra tokens."""
        return ConditionBundle()

    def with_extra_tokens(self, tokens) -> "ConditionBundle":
        return replace(self, extra_tokens=tokens)


def _as_constant(value, name: str) -> Tensor:
    if isinstance(value, Tensor):
        return value
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D (frames x dims), got shape {arr.shape}")
    return Tensor(arr)


def timestep_features(t: float, dim: int) -> np.ndarray:
    """Sinusoidal features of a scalar time in [0, 1], shape (1, dim)."""
    if not (0.0 <= t <= 1.0):
        raise ContractError(f"timestep {t} outside [0, 1]")
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half, dtype=np.float64) / max(half, 1))
    angles = t * _TIME_SCALE * freqs
    feats = np.concatenate([np.sin(angles), np.cos(angles)])
    if feats.size < dim:  # odd dim: zero-pad
        feats = np.concatenate([feats, np.zeros(dim - feats.size)])
    return feats.reshape(1, dim)


def resample_video(video_feat, t_audio: int):
    """Nearest-neighbour resample of (t_v, d) video features to t_audio rows.

    Output row j copies input row floor(j * t_v / t_audio). Returns the
    same kind of object it was given (Tensor in, Tensor out).
    """
    is_tensor = isinstance(video_feat, Tensor)
    data = video_feat.data if is_tensor else np.asarray(video_feat, dtype=np.float64)
    if data.ndim != 2 or data.shape[0] < 1:
        raise ShapeError(f"video features must be (t_v >= 1, d), got shape {data.shape}")
    if t_audio < 1:
        raise ContractError(f"t_audio must be >= 1, got {t_audio}")
    t_v = data.shape[0]
    idx = (np.arange(t_audio) * t_v) // t_audio
    out = data[idx].copy()
    return Tensor(out) if is_tensor else out


class Linear:
    """Affine map on the last axis; rows of the input are the batch."""

    def __init__(self, d_in: int, d_out: int, rng: SeededRng | None, zero_init: bool = False, std: float = 0.02):
        if zero_init or rng is None:
            w = np.zeros((d_in, d_out))
        else:
            w = rng.normal((d_in, d_out)) * std
        self.w = Tensor(w, requires_grad=True)
        self.b = Tensor(np.zeros(d_out), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return matmul(x, self.w) + self.b

    def named(self, prefix: str) -> list:
        return [(prefix + ".w", self.w), (prefix + ".b", self.b)]


def cross_modal_mix(y_a: Tensor, y_v: Tensor, mix_a: Linear, mix_v: Linear) -> tuple:
    """Residual exchange between the towers.

    Both streams see the concatenation of both, through their own affine
    map, added back onto themselves:

        x_a = y_a + mix_a([y_a, y_v])
        x_v = y_v + mix_v([y_a, y_v])
    """
    if y_a.shape != y_v.shape:
        raise ShapeError(f"mixer streams must match: {y_a.shape} vs {y_v.shape}")
    joint = concat(y_a, y_v)
    return y_a + mix_a(joint), y_v + mix_v(joint)


def _attention(q: Tensor, k: Tensor, v: Tensor, n_heads: int) -> Tensor:
    d = q.shape[-1]
    dh = d // n_heads
    scale = 1.0 / math.sqrt(dh)
    out = None
    for h in range(n_heads):
        lo, hi = h * dh, (h + 1) * dh
        qh, kh, vh = narrow(q, lo, hi), narrow(k, lo, hi), narrow(v, lo, hi)
        scores = matmul(qh, transpose(kh)) * scale
        oh = matmul(softmax(scores), vh)
        out = oh if out is None else concat(out, oh)
    return out


def _modulate(x: Tensor, shift: Tensor, scale: Tensor) -> Tensor:
    return x * (scale + 1.0) + shift


class _Block:
    """Shared machinery for tower blocks: adaLN-zero around gated sublayers."""

    def __init__(self, cfg: ModelConfig, rng: SeededRng, n_sublayers: int):
        d = cfg.d_model
        self.n_heads = cfg.n_heads
        self.adaln = Linear(d, n_sublayers * 3 * d, None, zero_init=True)
        # norms carry no affine parameters; adaLN supplies shift and scale
        self._ones = Tensor(np.ones(d))
        self._zeros = Tensor(np.zeros(d))

    def _norm(self, x: Tensor) -> Tensor:
        return layer_norm(x, self._ones, self._zeros)

    def _chunks(self, t_emb: Tensor, d: int) -> list:
        mod = self.adaln(gelu(t_emb))  # (1, n_sublayers * 3d)
        n = mod.shape[-1] // d
        return [narrow(mod, i * d, (i + 1) * d) for i in range(n)]


class AudioBlock(_Block):
    """Pre-norm self-attention, text cross-attention, MLP; all residual."""

    def __init__(self, cfg: ModelConfig, rng: SeededRng):
        super().__init__(cfg, rng, n_sublayers=3)
        d = cfg.d_model
        self.wq = Linear(d, d, rng)
        self.wk = Linear(d, d, rng)
        self.wv = Linear(d, d, rng)
        self.wo = Linear(d, d, rng)
        self.cq = Linear(d, d, rng)
        self.ck = Linear(d, d, rng)
        self.cv = Linear(d, d, rng)
        self.co = Linear(d, d, rng)
        self.fc1 = Linear(d, 4 * d, rng)
        self.fc2 = Linear(4 * d, d, rng)

    def __call__(self, x: Tensor, text_h: Tensor, t_emb: Tensor) -> Tensor:
        d = x.shape[-1]
        sh1, sc1, g1, sh2, sc2, g2, sh3, sc3, g3 = self._chunks(t_emb, d)
        y = _modulate(self._norm(x), sh1, sc1)
        x = x + g1 * self.wo(_attention(self.wq(y), self.wk(y), self.wv(y), self.n_heads))
        y = _modulate(self._norm(x), sh2, sc2)
        x = x + g2 * self.co(_attention(self.cq(y), self.ck(text_h), self.cv(text_h), self.n_heads))
        y = _modulate(self._norm(x), sh3, sc3)
        x = x + g3 * self.fc2(gelu(self.fc1(y)))
        return x

    def named(self, prefix: str) -> list:
        out = self.adaln.named(prefix + ".adaln")
        for tag in ("wq", "wk", "wv", "wo", "cq", "ck", "cv", "co", "fc1", "fc2"):
            out += getattr(self, tag).named(f"{prefix}.{tag}")
        return out


class VideoBlock(_Block):
    """Pre-norm self-attention and MLP; no cross-attention."""

    def __init__(self, cfg: ModelConfig, rng: SeededRng):
        super().__init__(cfg, rng, n_sublayers=2)
        d = cfg.d_model
        self.wq = Linear(d, d, rng)
        self.wk = Linear(d, d, rng)
        self.wv = Linear(d, d, rng)
        self.wo = Linear(d, d, rng)
        self.fc1 = Linear(d, 4 * d, rng)
        self.fc2 = Linear(4 * d, d, rng)

    def __call__(self, x: Tensor, t_emb: Tensor) -> Tensor:
        d = x.shape[-1]
        sh1, sc1, g1, sh2, sc2, g2 = self._chunks(t_emb, d)
        y = _modulate(self._norm(x), sh1, sc1)
        x = x + g1 * self.wo(_attention(self.wq(y), self.wk(y), self.wv(y), self.n_heads))
        y = _modulate(self._norm(x), sh2, sc2)
        x = x + g2 * self.fc2(gelu(self.fc1(y)))
        return x

    def named(self, prefix: str) -> list:
        out = self.adaln.named(prefix + ".adaln")
        for tag in ("wq", "wk", "wv", "wo", "fc1", "fc2"):
            out += getattr(self, tag).named(f"{prefix}.{tag}")
        return out


class TwoTowerModel:
    """Velocity predictor v(x_t, t, condition) over audio latent sequences."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.video_tower_invocations = 0
        rng = SeededRng(derive_seed(seed, "model-init"))
        cfg = config
        d = cfg.d_model

        self.audio_in = Linear(cfg.d_audio_latent, d, rng)
        self.video_in = Linear(cfg.d_video_feat, d, rng)
        self.text_proj = Linear(cfg.d_text, d, rng)
        self.out_proj = Linear(d, cfg.d_audio_latent, rng)
        self.time_mlp1 = Linear(d, d, rng)
        self.time_mlp2 = Linear(d, d, rng)
        # positions start at zero so a fresh model is exactly the
        # input-projection / output-projection composition
        self.audio_pos = Tensor(np.zeros((cfg.t_audio, d)), requires_grad=True)
        self.video_pos = Tensor(np.zeros((cfg.t_audio, d)), requires_grad=True)
        self.null_text = Tensor(rng.normal((1, cfg.d_text)) * 0.02, requires_grad=True)

        self.audio_blocks = [AudioBlock(cfg, rng) for _ in range(cfg.n_layers)]
        self.video_blocks = [VideoBlock(cfg, rng) for _ in range(cfg.n_layers)]
        # mixers start at zero: video information fades in as they train
        self.mix_a = [Linear(2 * d, d, None, zero_init=True) for _ in range(cfg.n_layers)]
        self.mix_v = [Linear(2 * d, d, None, zero_init=True) for _ in range(cfg.n_layers)]

        named: list = []
        named += self.audio_in.named("audio_in")
        named.append(("audio_pos", self.audio_pos))
        named += self.video_in.named("video_in")
        named.append(("video_pos", self.video_pos))
        named += self.text_proj.named("text_proj")
        named.append(("null_text", self.null_text))
        named += self.out_proj.named("out_proj")
        named += self.time_mlp1.named("time_mlp1")
        named += self.time_mlp2.named("time_mlp2")
        for i in range(cfg.n_layers):
            named += self.audio_blocks[i].named(f"layers.{i}.audio")
            named += self.video_blocks[i].named(f"layers.{i}.video")
            named += self.mix_a[i].named(f"layers.{i}.mix_a")
            named += self.mix_v[i].named(f"layers.{i}.mix_v")
        self._params = dict(named)
        if len(self._params) != len(named):
            raise ContractError("duplicate parameter names in model registry")

    # -- parameter plumbing -------------------------------------------------

    def parameters(self) -> dict:
        return self._params

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = None

    def param_count(self) -> int:
        return sum(p.size for p in self._params.values())

    def state_arrays(self) -> dict:
        return {name: p.data.copy() for name, p in self._params.items()}

    def load_state(self, arrays: dict) -> None:
        missing = sorted(set(self._params) - set(arrays))
        extra = sorted(set(arrays) - set(self._params))
        if missing or extra:
            raise FormatError(f"parameter names do not match model: missing {missing}, unexpected {extra}")
        for name, p in self._params.items():
            arr = np.asarray(arrays[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise FormatError(f"parameter {name} has shape {arr.shape}, expected {p.shape}")
            p.data = arr.copy()

    def save(self, path: str) -> None:
        container.write_checkpoint(path, self.config.to_dict(), self.state_arrays())

    @classmethod
    def load(cls, path: str) -> "TwoTowerModel":
        fields_dict, arrays = container.read_checkpoint(path)
        model = cls(ModelConfig(**fields_dict))
        model.load_state(arrays)
        return model

    # -- forward ------------------------------------------------------------

    def embed_timestep(self, t: float) -> Tensor:
        feats = Tensor(timestep_features(t, self.config.d_model))
        return self.time_mlp2(gelu(self.time_mlp1(feats)))

    def _text_tokens(self, cond: ConditionBundle) -> Tensor:
        if cond.text_kept:
            tokens = _as_constant(cond.text_emb, "text_emb")
            if tokens.shape[-1] != self.config.d_text:
                raise ShapeError(f"text_emb last dim {tokens.shape[-1]} != d_text {self.config.d_text}")
        else:
            tokens = self.null_text
        if cond.extra_tokens is not None:
            extra = _as_constant(cond.extra_tokens, "extra_tokens")
            if extra.shape[-1] != self.config.d_text:
                raise ShapeError(f"extra_tokens last dim {extra.shape[-1]} != d_text {self.config.d_text}")
            tokens = concat_rows(tokens, extra)
        return self.text_proj(tokens)

    def forward(self, x_t, t: float, cond: ConditionBundle) -> Tensor:
        cfg = self.config
        x = x_t if isinstance(x_t, Tensor) else Tensor(np.asarray(x_t, dtype=np.float64))
        if x.shape != (cfg.t_audio, cfg.d_audio_latent):
            raise ShapeError(f"input shape {x.shape} != (t_audio, d_audio_latent) = ({cfg.t_audio}, {cfg.d_audio_latent})")
        t_emb = self.embed_timestep(t)
        text_h = self._text_tokens(cond)

        h_a = self.audio_in(x) + self.audio_pos
        h_v = None
        if cond.video_kept:
            self.video_tower_invocations += 1
            vf = _as_constant(cond.video_feat, "video_feat")
            if vf.shape[-1] != cfg.d_video_feat:
                raise ShapeError(f"video_feat last dim {vf.shape[-1]} != d_video_feat {cfg.d_video_feat}")
            vf = resample_video(vf, cfg.t_audio)
            h_v = self.video_in(vf) + self.video_pos

        for i in range(cfg.n_layers):
            h_a = self.audio_blocks[i](h_a, text_h, t_emb)
            if h_v is not None:
                h_v = self.video_blocks[i](h_v, t_emb)
                h_a, h_v = cross_modal_mix(h_a, h_v, self.mix_a[i], self.mix_v[i])
        # the final video stream is dropped; only the audio stream is decoded
        return self.out_proj(h_a)

    __call__ = forward


def expected_param_count(cfg: ModelConfig) -> int:
    """Closed-form parameter count for a config.

    Composed from affine(i, o) = i*o + o:
      projections: affine(a,d) + affine(v,d) + affine(x,d) + affine(d,a)
      time MLP:    2 * affine(d,d)
      positions:   2 * T*d, null text token: x
      per layer:   audio block  affine(d,9d) + 8*affine(d,d)
                               + affine(d,4d) + affine(4d,d)
                   video block  affine(d,6d) + 4*affine(d,d)
                               + affine(d,4d) + affine(4d,d)
                   mixers       2 * affine(2d,d)
    """

    def affine(i: int, o: int) -> int:
        return i * o + o

    d, a, v, x, T, L = (
        cfg.d_model,
        cfg.d_audio_latent,
        cfg.d_video_feat,
        cfg.d_text,
        cfg.t_audio,
        cfg.n_layers,
    )
    audio_block = affine(d, 9 * d) + 8 * affine(d, d) + affine(d, 4 * d) + affine(4 * d, d)
    video_block = affine(d, 6 * d) + 4 * affine(d, d) + affine(d, 4 * d) + affine(4 * d, d)
    mixers = 2 * affine(2 * d, d)
    fixed = (
        affine(a, d)
        + affine(v, d)
        + affine(x, d)
        + affine(d, a)
        + 2 * affine(d, d)
        + 2 * T * d
        + x
    )
    return fixed + L * (audio_block + video_block + mixers)
