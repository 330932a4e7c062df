"""Seeded synthetic feature providers.

Real deployments plug pretrained encoders in behind these call shapes; the
repo ships deterministic stand-ins so the whole stack runs and tests on a
desk. Every provider output is a pure function of (provider id, input), so
results are reproducible across runs and platforms.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError
from .rng import SeededRng, derive_seed, string_seed


def _pool(features: np.ndarray) -> np.ndarray:
    """Order-insensitive summary of a (frames, dims) feature sequence."""
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[0] == 0:
        raise ContractError(f"provider input must be a non-empty 2-D sequence, got shape {feats.shape}")
    return np.concatenate([feats.mean(axis=0), feats.max(axis=0)])


class SyntheticEmbedder:
    """Deterministic stand-in for a pretrained embedding network.

    Pools a feature sequence over time and projects it with a random but
    provider-id-seeded matrix. One embedder maps sequences of any feature
    width into the same output space, so audio latents and video features
    can be compared under a shared provider id.
    """

    def __init__(self, provider_id: str, dim: int):
        if dim < 1:
            raise ContractError(f"embedding dim must be >= 1, got {dim}")
        self.provider_id = provider_id
        self.dim = dim
        self._weights: dict[int, np.ndarray] = {}

    def _projection(self, d_in: int) -> np.ndarray:
        w = self._weights.get(d_in)
        if w is None:
            rng = SeededRng(derive_seed(string_seed(self.provider_id), "proj", d_in, self.dim))
            w = rng.normal((d_in, self.dim)) / np.sqrt(d_in)
            self._weights[d_in] = w
        return w

    def embed(self, features: np.ndarray) -> np.ndarray:
        pooled = _pool(features)
        return pooled @ self._projection(pooled.size)

    def embed_set(self, sequences) -> np.ndarray:
        return np.stack([self.embed(seq) for seq in sequences])


class SyntheticClassifier:
    """Deterministic stand-in for an audio event classifier.

    Returns raw per-class scores; calibration to the simplex happens in
    the metrics layer.
    """

    def __init__(self, provider_id: str, n_classes: int):
        if n_classes < 2:
            raise ContractError(f"classifier needs >= 2 classes, got {n_classes}")
        self.provider_id = provider_id
        self.n_classes = n_classes
        self._embedder = SyntheticEmbedder(provider_id + "/scores", n_classes)

    def scores(self, features: np.ndarray) -> np.ndarray:
        return self._embedder.embed(features)


def text_embedding(text: str, n_tokens: int, d_text: int) -> np.ndarray:
    """Deterministic pseudo-embedding of a prompt string."""
    rng = SeededRng(derive_seed(string_seed("text-provider"), string_seed(text), n_tokens, d_text))
    return rng.normal((n_tokens, d_text)) * 0.5


def video_features(video_id: str, t_video: int, d_video: int) -> np.ndarray:
    """Deterministic pseudo-features for a video identifier."""
    rng = SeededRng(derive_seed(string_seed("video-provider"), string_seed(video_id), t_video, d_video))
    return rng.normal((t_video, d_video)) * 0.5


# ---------------------------------------------------------------------------
# toy paired dataset


@dataclass(frozen=True)
class ToyClip:
    """One synthetic training pair: audio latent plus its conditions."""

    clip_id: str
    x1: np.ndarray          # (t_audio, d_audio_latent)
    text_emb: np.ndarray    # (n_tokens, d_text)
    video_feat: np.ndarray  # (t_video, d_video_feat)
    event_frames: tuple = field(default=())


def make_toy_clips(
    n_clips: int,
    t_audio: int,
    d_audio: int,
    d_video: int,
    d_text: int,
    seed: int,
    t_video: int | None = None,
    n_tokens: int = 2,
    events_per_clip: int = 2,
    background: float = 0.05,
    amplitude: float = 2.0,
) -> list[ToyClip]:
    """Build clips whose audio energy spikes where the video spikes.

    Each clip gets events_per_clip event frames; at each event the video
    features and the audio latent both receive a large spike along a fixed
    global direction, over a small noise floor. The video -> audio mapping
    is therefore the same for every clip while event times vary, which is
    what a conditional generator has to pick up.
    """
    if t_video is None:
        t_video = t_audio
    if t_audio < 8:
        raise ContractError(f"toy clips need t_audio >= 8, got {t_audio}")
    dir_rng = SeededRng(derive_seed(seed, "toyset", "directions"))
    g_audio = dir_rng.normal((d_audio,))
    g_audio /= np.linalg.norm(g_audio)
    g_video = dir_rng.normal((d_video,))
    g_video /= np.linalg.norm(g_video)

    clips = []
    for i in range(n_clips):
        rng = SeededRng(derive_seed(seed, "toyset", i))
        lo, hi = 2, t_audio - 2
        frames: list[int] = []
        attempts = 0
        while len(frames) < events_per_clip and attempts < 200:
            cand = lo + rng.integers(hi - lo)
            attempts += 1
            if all(abs(cand - f) >= 6 for f in frames):
                frames.append(cand)
        frames.sort()

        x1 = rng.normal((t_audio, d_audio)) * background
        video = rng.normal((t_video, d_video)) * background
        for f in frames:
            amp = amplitude * (0.9 + 0.2 * rng.uniform())
            x1[f] += amp * g_audio
            fv = min(int(f * t_video / t_audio), t_video - 1)
            video[fv] += amplitude * g_video
        text = rng.normal((n_tokens, d_text)) * 0.5
        clips.append(
            ToyClip(
                clip_id=f"clip{i:03d}",
                x1=x1,
                text_emb=text,
                video_feat=video,
                event_frames=tuple(frames),
            )
        )
    return clips
