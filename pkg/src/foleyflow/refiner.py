"""Reward-gated refinement of a coarse generation.

A compact signal embedding pooled from the conditions and the coarse
output is injected into the sampler as one extra conditioning token;
k re-sampled candidates then compete with the coarse output under a
weighted reward, and the argmax wins. Because the coarse output always
competes, the selected output never scores below it.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import flow
from .errors import ContractError, DivergenceError
from .metrics import (
    EvalConfig,
    EvalProviders,
    av_align,
    clip_style_score,
    default_eval_providers,
    detect_peaks,
    energy_envelope,
)
from .model import ConditionBundle
from .rng import SeededRng, derive_seed, string_seed
from .tensor import Tensor


def _feature_array(value) -> np.ndarray | None:
    if value is None:
        return None
    data = value.data if isinstance(value, Tensor) else np.asarray(value, dtype=np.float64)
    return np.asarray(data, dtype=np.float64)


def _fixed_projection(tag: str, d_in: int, d_out: int) -> np.ndarray:
    rng = SeededRng(derive_seed(string_seed("refiner"), tag, d_in, d_out))
    return rng.normal((d_in, d_out)) / np.sqrt(d_in)


def extract_signal(cond: ConditionBundle, coarse: np.ndarray, d_signal: int = 16) -> np.ndarray:
    """Pool conditions and the coarse output into a d_signal vector.

    Mean and max over time of the video features and of the coarse
    latents, concatenated with the mean-pooled text embedding, then a
    fixed seeded linear projection (no bias, so all-zero inputs map to
    the zero signal). Absent modalities contribute zeros of their slot.
    """
    if d_signal < 1:
        raise ContractError(f"d_signal must be >= 1, got {d_signal}")
    coarse_arr = _feature_array(coarse)
    if coarse_arr is None or coarse_arr.ndim != 2:
        raise ContractError("extract_signal needs a 2-D coarse latent sequence")
    video = _feature_array(cond.video_feat) if cond.video_kept else None
    text = _feature_array(cond.text_emb) if cond.text_kept else None

    vid_dim = video.shape[1] if video is not None else 0
    txt_dim = text.shape[1] if text is not None else 0
    segments = [
        np.concatenate([video.mean(axis=0), video.max(axis=0)]) if video is not None else np.zeros(0),
        np.concatenate([coarse_arr.mean(axis=0), coarse_arr.max(axis=0)]),
        text.mean(axis=0) if text is not None else np.zeros(0),
    ]
    pooled = np.concatenate(segments)
    proj = _fixed_projection(f"signal-project/v{vid_dim}/t{txt_dim}", pooled.size, d_signal)
    return pooled @ proj


def signal_token(signal: np.ndarray, d_text: int) -> np.ndarray:
    """Project a signal embedding into text-token space, shape (1, d_text)."""
    vec = np.asarray(signal, dtype=np.float64).reshape(-1)
    proj = _fixed_projection("signal-token", vec.size, d_text)
    return (vec @ proj).reshape(1, d_text)


@dataclass(frozen=True)
class RewardWeights:
    temporal: float = 0.5
    semantic: float = 0.4
    smoothness: float = 0.1

    def __post_init__(self):
        total = self.temporal + self.semantic + self.smoothness
        if abs(total - 1.0) > 1e-9:
            raise ContractError(f"reward weights must sum to 1, got {total}")


@dataclass(frozen=True)
class RewardReport:
    components: dict
    weights: dict
    aggregate: float


def reward(
    candidate: np.ndarray,
    cond: ConditionBundle,
    providers: EvalProviders,
    config: EvalConfig,
    weights: RewardWeights = RewardWeights(),
) -> RewardReport:
    """Score one candidate against its conditions.

    temporal    peak alignment between the candidate envelope and the
                video envelope (only when video is present).
    semantic    shared-space cosine (0..1) between the candidate and the
                video features, falling back to the text embedding; a
                zero-norm side scores 0 rather than erroring, since the
                refiner must rank arbitrary candidates.
    smoothness  1 - mean squared frame difference, floored at 0.
    Weights renormalize over the components that apply.
    """
    cand = _feature_array(candidate)
    if cand is None or cand.ndim != 2:
        raise ContractError("reward needs a 2-D candidate latent sequence")
    video = _feature_array(cond.video_feat) if cond.video_kept else None
    text = _feature_array(cond.text_emb) if cond.text_kept else None

    components: dict = {}
    if video is not None:
        duration = cand.shape[0] / config.frame_rate
        video_rate = video.shape[0] / duration
        cand_peaks = detect_peaks(
            energy_envelope(cand), config.frame_rate, config.peak_threshold, config.min_separation
        )
        video_peaks = detect_peaks(
            energy_envelope(video), video_rate, config.peak_threshold, config.min_separation
        )
        components["temporal"] = av_align(cand_peaks, video_peaks, config.match_window)

    anchor = video if video is not None else text
    if anchor is not None:
        emb_c = providers.shared.embed(cand)
        emb_a = providers.shared.embed(anchor)
        if np.linalg.norm(emb_c) == 0.0 or np.linalg.norm(emb_a) == 0.0:
            components["semantic"] = 0.0
        else:
            components["semantic"] = clip_style_score(emb_c, emb_a) / 100.0

    frame_diff = np.diff(cand, axis=0)
    msd = float(np.mean(frame_diff * frame_diff)) if frame_diff.size else 0.0
    components["smoothness"] = max(0.0, 1.0 - msd)

    raw = {"temporal": weights.temporal, "semantic": weights.semantic, "smoothness": weights.smoothness}
    present = {name: raw[name] for name in components}
    total = sum(present.values())
    used = {name: w / total for name, w in present.items()}
    aggregate = sum(used[name] * components[name] for name in components)
    return RewardReport(components=components, weights=used, aggregate=aggregate)


@dataclass(frozen=True)
class TraceEntry:
    index: int
    seed: int
    report: RewardReport | None = None
    error: str | None = None


@dataclass(frozen=True)
class RefineResult:
    best: np.ndarray
    report: RewardReport
    coarse_report: RewardReport
    picked: str  # "coarse" or "candidate:<i>"
    trace: tuple


def refine(
    model,
    cond: ConditionBundle,
    coarse: np.ndarray,
    k: int,
    sampler_cfg: flow.SamplerConfig,
    providers: EvalProviders | None = None,
    config: EvalConfig | None = None,
    weights: RewardWeights = RewardWeights(),
    d_signal: int = 16,
    sample_fn=None,
) -> RefineResult:
    """Sample k signal-conditioned candidates and keep the best by reward.

    Candidate i runs with a seed derived from (sampler_cfg.seed, i), so
    the whole call is deterministic. A candidate whose sampling diverges
    is skipped but still recorded in the trace. The coarse input always
    competes, so the result's aggregate is never below the coarse one;
    ties keep the coarse output, then the lower candidate index.
    """
    if k < 1:
        raise ContractError(f"k must be >= 1, got {k}")
    config = config if config is not None else EvalConfig()
    providers = providers if providers is not None else default_eval_providers(config)
    sample_fn = sample_fn if sample_fn is not None else flow.sample

    coarse_arr = _feature_array(coarse)
    signal = extract_signal(cond, coarse_arr, d_signal=d_signal)
    token = signal_token(signal, model.config.d_text)
    cond_aug = cond.with_extra_tokens(Tensor(token))

    coarse_report = reward(coarse_arr, cond, providers, config, weights)
    best_arr, best_report, picked = coarse_arr, coarse_report, "coarse"

    trace: list = []
    for i in range(k):
        seed_i = derive_seed(sampler_cfg.seed, "candidate", i)
        cfg_i = replace(sampler_cfg, seed=seed_i)
        try:
            candidate = sample_fn(model, cond_aug, cfg_i)
        except DivergenceError as exc:
            trace.append(TraceEntry(index=i, seed=seed_i, error=str(exc)))
            continue
        cand_report = reward(candidate, cond, providers, config, weights)
        trace.append(TraceEntry(index=i, seed=seed_i, report=cand_report))
        if cand_report.aggregate > best_report.aggregate:
            best_arr, best_report, picked = candidate, cand_report, f"candidate:{i}"

    return RefineResult(
        best=best_arr,
        report=best_report,
        coarse_report=coarse_report,
        picked=picked,
        trace=tuple(trace),
    )


_TRACE_COLUMNS = ("index", "seed", "temporal", "semantic", "smoothness", "aggregate", "status")


def render_trace(result: RefineResult) -> str:
    """CSV trace: one line per attempted candidate, '-' for absent values."""

    def row(entry: TraceEntry) -> str:
        if entry.report is None:
            return f"{entry.index},{entry.seed},-,-,-,-,failed"
        comp = entry.report.components
        cells = [str(entry.index), str(entry.seed)]
        for name in ("temporal", "semantic", "smoothness"):
            cells.append(f"{comp[name]:.6f}" if name in comp else "-")
        cells.append(f"{entry.report.aggregate:.6f}")
        cells.append("ok")
        return ",".join(cells)

    lines = [",".join(_TRACE_COLUMNS)]
    lines.extend(row(e) for e in result.trace)
    lines.append(f"# coarse_aggregate,{result.coarse_report.aggregate:.6f}")
    lines.append(f"# picked,{result.picked}")
    return "\n".join(lines)
