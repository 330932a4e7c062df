"""Evaluation metrics for generated audio latents.

Six numbers summarize a generated set against a reference set, reported
in the fixed column order FAD, FD, KL-sigmoid, IS, CLIP, AV:

  FAD / FD     Frechet distance between Gaussian fits of two embedding
               sets, under two different embedding providers.
  KL-sigmoid   mean Kullback-Leibler divergence KL(ref || gen) over paired
               per-clip class posteriors (raw classifier scores pass
               through a logistic map, then simplex normalization).
  IS           exp(mean KL(p_i || mean p)) over generated posteriors.
  CLIP         100 * cosine similarity, clamped at zero, averaged over
               pairs of embeddings in a shared space.
  AV           fraction-of-peaks alignment between paired onset trains.

Lower is better for the first three columns, higher for the rest.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import find_peaks

from . import container
from .errors import ContractError, ShapeError
from .providers import SyntheticClassifier, SyntheticEmbedder

_PSD_TOLERANCE = 1e-6
_PROB_FLOOR = 1e-12

REPORT_COLUMNS = ("FAD", "FD", "KL-sigmoid", "IS", "CLIP", "AV")


# ---------------------------------------------------------------------------
# typed carriers


@dataclass(frozen=True)
class EmbeddingSet:
    """n embedding vectors from one provider, as an (n, d) array."""

    vectors: np.ndarray
    provider_id: str = ""

    def __post_init__(self):
        arr = np.asarray(self.vectors, dtype=np.float64)
        if arr.ndim != 2:
            raise ShapeError(f"embedding set must be (n, d), got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ContractError("embedding set contains non-finite values")
        object.__setattr__(self, "vectors", arr)


@dataclass(frozen=True)
class ClassPosterior:
    """Rows of per-class probabilities on the simplex."""

    probs: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.probs, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[1] < 2:
            raise ShapeError(f"posteriors must be (n, classes >= 2), got shape {arr.shape}")
        if np.any(arr < 0):
            raise ContractError("posterior rows must be non-negative")
        sums = arr.sum(axis=1)
        if np.any(np.abs(sums - 1.0) > 1e-9):
            worst = float(np.max(np.abs(sums - 1.0)))
            raise ContractError(f"posterior rows must sum to 1 within 1e-9 (worst deviation {worst:.3e})")
        object.__setattr__(self, "probs", arr)


@dataclass(frozen=True)
class PeakTrain:
    """Strictly increasing event times (seconds) within a clip duration."""

    times: tuple
    duration: float

    def __post_init__(self):
        times = tuple(float(t) for t in self.times)
        if self.duration <= 0:
            raise ContractError(f"duration must be > 0, got {self.duration}")
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ContractError("peak times must be strictly increasing")
        if times and not (0.0 <= times[0] and times[-1] < self.duration):
            raise ContractError(f"peak times must lie in [0, duration={self.duration})")
        object.__setattr__(self, "times", times)


# ---------------------------------------------------------------------------
# distribution metrics


def _sqrtm_psd(mat: np.ndarray, label: str) -> np.ndarray:
    """Symmetric matrix square root via eigendecomposition.

    Eigenvalues below zero are clamped; a warning fires when one falls
    below -1e-6, which signals a genuinely non-PSD input rather than
    round-off.
    """
    eigvals, eigvecs = np.linalg.eigh(mat)
    if np.any(eigvals < -_PSD_TOLERANCE):
        warnings.warn(
            f"{label}: eigenvalue {eigvals.min():.3e} below -{_PSD_TOLERANCE:g}, clamping to 0",
            RuntimeWarning,
            stacklevel=2,
        )
    clamped = np.clip(eigvals, 0.0, None)
    return (eigvecs * np.sqrt(clamped)) @ eigvecs.T


def frechet_distance(a: EmbeddingSet, b: EmbeddingSet) -> float:
    """||mu_a - mu_b||^2 + tr(S_a + S_b - 2 (S_a S_b)^{1/2}).

    Covariances are the unbiased sample estimates, so both sets need at
    least two vectors. tr((S_a S_b)^{1/2}) is computed from the symmetric
    product S_a^{1/2} S_b S_a^{1/2}, which shares its eigenvalues.
    """
    va, vb = a.vectors, b.vectors
    if va.shape[1] != vb.shape[1]:
        raise ShapeError(f"embedding dims differ: {va.shape} vs {vb.shape}")
    if va.shape[0] < 2 or vb.shape[0] < 2:
        raise ContractError(f"Frechet statistics need n >= 2 on both sides, got {va.shape[0]} and {vb.shape[0]}")
    mu_a, mu_b = va.mean(axis=0), vb.mean(axis=0)
    cov_a = np.cov(va, rowvar=False).reshape(va.shape[1], va.shape[1])
    cov_b = np.cov(vb, rowvar=False).reshape(vb.shape[1], vb.shape[1])
    root_a = _sqrtm_psd(cov_a, "frechet_distance(cov_a)")
    inner = root_a @ cov_b @ root_a
    inner_vals = np.linalg.eigvalsh(inner)
    if np.any(inner_vals < -_PSD_TOLERANCE):
        warnings.warn(
            f"frechet_distance: cross-term eigenvalue {inner_vals.min():.3e} clamped to 0",
            RuntimeWarning,
            stacklevel=2,
        )
    tr_sqrt = float(np.sqrt(np.clip(inner_vals, 0.0, None)).sum())
    mean_term = float(np.sum((mu_a - mu_b) ** 2))
    value = mean_term + float(np.trace(cov_a) + np.trace(cov_b)) - 2.0 * tr_sqrt
    # >= 0 in exact arithmetic; identical sets leave a hair of round-off
    if value < 0.0:
        if value < -_PSD_TOLERANCE:
            warnings.warn(
                f"frechet_distance: negative value {value:.3e} clamped to 0",
                RuntimeWarning,
                stacklevel=2,
            )
        value = 0.0
    return value


def _floor_rows(probs: np.ndarray) -> np.ndarray:
    floored = np.clip(probs, _PROB_FLOOR, None)
    return floored / floored.sum(axis=1, keepdims=True)


def inception_score(posteriors: ClassPosterior) -> float:
    """exp of the mean per-row KL against the marginal class distribution."""
    p = _floor_rows(posteriors.probs)
    marginal = p.mean(axis=0)
    kls = np.sum(p * (np.log(p) - np.log(marginal)), axis=1)
    return float(np.exp(kls.mean()))


def sigmoid_calibrate(raw_scores: np.ndarray) -> ClassPosterior:
    """Map raw per-class scores onto the simplex: logistic, then normalize."""
    scores = np.asarray(raw_scores, dtype=np.float64)
    if scores.ndim != 2:
        raise ShapeError(f"raw scores must be (n, classes), got shape {scores.shape}")
    squashed = 1.0 / (1.0 + np.exp(-scores))
    return ClassPosterior(squashed / squashed.sum(axis=1, keepdims=True))


def kl_sigmoid(p_gen: ClassPosterior, p_ref: ClassPosterior) -> float:
    """Mean KL(ref_i || gen_i) over paired posterior rows."""
    ref, gen = p_ref.probs, p_gen.probs
    if ref.shape != gen.shape:
        raise ShapeError(f"posterior sets must pair up: {ref.shape} vs {gen.shape}")
    ref = _floor_rows(ref)
    gen = _floor_rows(gen)
    kls = np.sum(ref * (np.log(ref) - np.log(gen)), axis=1)
    return float(kls.mean())


def clip_style_score(emb_a: np.ndarray, emb_b: np.ndarray) -> float:
    """100 * cosine similarity, clamped below at zero."""
    a = np.asarray(emb_a, dtype=np.float64).reshape(-1)
    b = np.asarray(emb_b, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise ShapeError(f"embedding shapes differ: {a.shape} vs {b.shape}")
    norm_a, norm_b = float(np.linalg.norm(a)), float(np.linalg.norm(b))
    if norm_a == 0.0 or norm_b == 0.0:
        raise ContractError("cosine similarity undefined for a zero-norm embedding")
    cos = float(np.dot(a, b) / (norm_a * norm_b))
    cos = min(1.0, cos)  # |cos| <= 1; round-off can overshoot for identical inputs
    return 100.0 * max(0.0, cos)


# ---------------------------------------------------------------------------
# onset alignment


def energy_envelope(latent: np.ndarray) -> np.ndarray:
    """Per-frame root-mean-square energy of a (frames, dims) sequence."""
    arr = np.asarray(latent, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 1:
        raise ShapeError(f"latent must be (frames, dims), got shape {arr.shape}")
    return np.sqrt(np.mean(arr * arr, axis=1))


def detect_peaks(
    envelope: np.ndarray,
    frame_rate: float,
    threshold_rel: float = 0.3,
    min_separation: float = 0.1,
) -> PeakTrain:
    """Local maxima at or above threshold_rel * max(envelope).

    Peaks closer than min_separation seconds are thinned greedily,
    keeping the taller one. Endpoints cannot be peaks (a local maximum
    needs both neighbours), hence the T >= 3 requirement.
    """
    env = np.asarray(envelope, dtype=np.float64)
    if hasattr(envelope, "data") and not isinstance(envelope, np.ndarray):
        env = np.asarray(envelope.data, dtype=np.float64)
    env = env.reshape(-1)
    if env.size < 3:
        raise ContractError(f"peak detection needs at least 3 frames, got {env.size}")
    if frame_rate <= 0:
        raise ContractError(f"frame_rate must be > 0, got {frame_rate}")
    if not (0.0 < threshold_rel <= 1.0):
        raise ContractError(f"threshold_rel must lie in (0, 1], got {threshold_rel}")
    if min_separation < 0:
        raise ContractError(f"min_separation must be >= 0, got {min_separation}")
    duration = env.size / frame_rate
    peak = float(env.max())
    if peak <= 0.0:
        return PeakTrain(times=(), duration=duration)
    distance = max(1.0, min_separation * frame_rate)
    idx, _ = find_peaks(env, height=threshold_rel * peak, distance=distance)
    return PeakTrain(times=tuple(idx / frame_rate), duration=duration)


def av_align(audio_peaks: PeakTrain, video_peaks: PeakTrain, window: float) -> float:
    """Greedy one-to-one matching score between two peak trains.

    Candidate pairs within +-window seconds are matched in order of
    ascending time difference (ties by earlier times); the score is
    matched / (|A| + |V| - matched), the intersection-over-union of the
    two trains. Two empty trains score 1.0.
    """
    if window <= 0:
        raise ContractError(f"match window must be > 0, got {window}")
    a, v = audio_peaks.times, video_peaks.times
    if not a and not v:
        return 1.0
    candidates = sorted(
        (abs(ta - tv), i, j)
        for i, ta in enumerate(a)
        for j, tv in enumerate(v)
        if abs(ta - tv) <= window
    )
    used_a: set = set()
    used_v: set = set()
    matched = 0
    for _, i, j in candidates:
        if i in used_a or j in used_v:
            continue
        used_a.add(i)
        used_v.add(j)
        matched += 1
    return matched / (len(a) + len(v) - matched)


# ---------------------------------------------------------------------------
# set-level evaluation


@dataclass(frozen=True)
class EvalConfig:
    frame_rate: float = 16.0
    peak_threshold: float = 0.3
    min_separation: float = 0.1
    match_window: float = 0.1
    embed_dim: int = 8
    n_classes: int = 8

    def __post_init__(self):
        if self.frame_rate <= 0:
            raise ContractError(f"frame_rate must be > 0, got {self.frame_rate}")
        if self.match_window <= 0:
            raise ContractError(f"match_window must be > 0, got {self.match_window}")


@dataclass(frozen=True)
class EvalProviders:
    """The four embedding stand-ins one evaluation run needs."""

    fidelity: SyntheticEmbedder
    distribution: SyntheticEmbedder
    classifier: SyntheticClassifier
    shared: SyntheticEmbedder


def default_eval_providers(config: EvalConfig) -> EvalProviders:
    return EvalProviders(
        fidelity=SyntheticEmbedder("audio-fidelity", config.embed_dim),
        distribution=SyntheticEmbedder("audio-distribution", config.embed_dim),
        classifier=SyntheticClassifier("audio-tagger", config.n_classes),
        shared=SyntheticEmbedder("shared-space", config.embed_dim),
    )


@dataclass(frozen=True)
class PairDetail:
    clip_id: str
    gen_envelope: np.ndarray
    ref_envelope: np.ndarray


@dataclass(frozen=True)
class EvalReport:
    values: dict
    n_pairs: int
    missing: tuple = ()
    pairs: tuple = field(default=())


LATENT_EXTENSION = ".ysnd"
LATENT_RECORD = "latent"


def _load_latent_dir(path: str) -> dict:
    directory = Path(path)
    if not directory.is_dir():
        raise ContractError(f"not a directory: {path}")
    out = {}
    for entry in sorted(directory.glob(f"*{LATENT_EXTENSION}")):
        records = container.read_latents(str(entry))
        if LATENT_RECORD not in records:
            raise ContractError(f"{entry}: no {LATENT_RECORD!r} record")
        out[entry.stem] = records[LATENT_RECORD]
    return out


def evaluate_set(gen_dir: str, ref_dir: str, providers: EvalProviders, config: EvalConfig) -> EvalReport:
    """Compare latent files paired by stem name across two directories.

    The reference item of each pair stands in for the anchor modality in
    the CLIP and AV columns; ids present on only one side are listed as
    missing and excluded from every aggregate.
    """
    gen = _load_latent_dir(gen_dir)
    ref = _load_latent_dir(ref_dir)
    shared_ids = sorted(set(gen) & set(ref))
    missing = tuple(
        sorted(
            [f"{cid} (gen only)" for cid in set(gen) - set(ref)]
            + [f"{cid} (ref only)" for cid in set(ref) - set(gen)]
        )
    )
    if len(shared_ids) < 2:
        raise ContractError(f"evaluation needs at least 2 paired clips, found {len(shared_ids)}")

    gen_seqs = [gen[cid] for cid in shared_ids]
    ref_seqs = [ref[cid] for cid in shared_ids]

    fad = frechet_distance(
        EmbeddingSet(providers.fidelity.embed_set(gen_seqs), providers.fidelity.provider_id),
        EmbeddingSet(providers.fidelity.embed_set(ref_seqs), providers.fidelity.provider_id),
    )
    fd = frechet_distance(
        EmbeddingSet(providers.distribution.embed_set(gen_seqs), providers.distribution.provider_id),
        EmbeddingSet(providers.distribution.embed_set(ref_seqs), providers.distribution.provider_id),
    )
    gen_posts = sigmoid_calibrate(np.stack([providers.classifier.scores(s) for s in gen_seqs]))
    ref_posts = sigmoid_calibrate(np.stack([providers.classifier.scores(s) for s in ref_seqs]))
    kl = kl_sigmoid(gen_posts, ref_posts)
    is_score = inception_score(gen_posts)

    clip_scores = []
    av_scores = []
    details = []
    for cid, gseq, rseq in zip(shared_ids, gen_seqs, ref_seqs):
        clip_scores.append(clip_style_score(providers.shared.embed(gseq), providers.shared.embed(rseq)))
        g_env, r_env = energy_envelope(gseq), energy_envelope(rseq)
        g_peaks = detect_peaks(g_env, config.frame_rate, config.peak_threshold, config.min_separation)
        r_peaks = detect_peaks(r_env, config.frame_rate, config.peak_threshold, config.min_separation)
        av_scores.append(av_align(g_peaks, r_peaks, config.match_window))
        details.append(PairDetail(clip_id=cid, gen_envelope=g_env, ref_envelope=r_env))

    values = {
        "FAD": fad,
        "FD": fd,
        "KL-sigmoid": kl,
        "IS": is_score,
        "CLIP": float(np.mean(clip_scores)),
        "AV": float(np.mean(av_scores)),
    }
    return EvalReport(values=values, n_pairs=len(shared_ids), missing=missing, pairs=tuple(details))


def render_report(report: EvalReport, as_json: bool = False) -> str:
    """Header plus one comma-separated value line; missing ids follow as
    comment lines. The JSON form carries the same fields."""
    if as_json:
        payload = {
            "columns": list(REPORT_COLUMNS),
            "values": {k: report.values[k] for k in REPORT_COLUMNS},
            "n_pairs": report.n_pairs,
            "missing": list(report.missing),
        }
        return json.dumps(payload, sort_keys=True)
    lines = [",".join(REPORT_COLUMNS)]
    lines.append(",".join(f"{report.values[c]:.6f}" for c in REPORT_COLUMNS))
    for item in report.missing:
        lines.append(f"# missing: {item}")
    return "\n".join(lines)
