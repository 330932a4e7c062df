"""Manifest-driven filtering and cutting of clip records.

Manifest format (one record per line, comma-separated, header required):

    #ysnd-manifest v1
    clip_id,duration,events,av_align_score,semantic_score,speech_flag,bgm_flag

  events        semicolon-separated label:start:end triples (may be empty)
  scores        floats, or "-" when not yet computed
  flags         0 or 1

Filtering drops records by the first failing rule in the documented order
unscored, alignment, semantic, speech, bgm. Cutting slices one segment per
event; a record that is already exactly one full-cover event passes
through unchanged, which makes the pipeline idempotent on its own output.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import ContractError, FormatError
from .metrics import av_align, detect_peaks

MANIFEST_HEADER = "#ysnd-manifest v1"

DROP_REASONS = ("unscored", "alignment", "semantic", "speech", "bgm")

_LABEL_FORBIDDEN = set(",;:")


@dataclass(frozen=True)
class ClipRecord:
    clip_id: str
    duration: float
    events: tuple  # of (label, t_start, t_end)
    av_align_score: float | None = None
    semantic_score: float | None = None
    speech_flag: bool = False
    bgm_flag: bool = False

    def __post_init__(self):
        if not self.clip_id or "," in self.clip_id:
            raise ContractError(f"invalid clip_id {self.clip_id!r}")
        if not (self.duration > 0):
            raise ContractError(f"{self.clip_id}: duration must be > 0, got {self.duration}")
        events = tuple((str(l), float(s), float(e)) for l, s, e in self.events)
        for label, start, end in events:
            if not label or _LABEL_FORBIDDEN & set(label):
                raise ContractError(f"{self.clip_id}: invalid event label {label!r}")
            if not (0.0 <= start < end <= self.duration):
                raise ContractError(
                    f"{self.clip_id}: event {label!r} span [{start}, {end}) outside [0, {self.duration}]"
                )
        object.__setattr__(self, "events", events)
        for name in ("av_align_score", "semantic_score"):
            value = getattr(self, name)
            if value is not None and not (0.0 <= value <= 1.0):
                raise ContractError(f"{self.clip_id}: {name} must lie in [0, 1], got {value}")

    @property
    def scored(self) -> bool:
        return self.av_align_score is not None and self.semantic_score is not None


@dataclass(frozen=True)
class FilterPolicy:
    min_av_align: float = 0.2
    min_semantic: float = 0.3
    drop_speech: bool = True
    drop_bgm: bool = True


# ---------------------------------------------------------------------------
# manifest serialization


def _format_score(value) -> str:
    return "-" if value is None else repr(float(value))


def format_record(record: ClipRecord) -> str:
    events = ";".join(f"{label}:{start!r}:{end!r}" for label, start, end in record.events)
    return ",".join(
        [
            record.clip_id,
            repr(record.duration),
            events,
            _format_score(record.av_align_score),
            _format_score(record.semantic_score),
            str(int(record.speech_flag)),
            str(int(record.bgm_flag)),
        ]
    )


def parse_record(line: str) -> ClipRecord:
    parts = line.split(",")
    if len(parts) != 7:
        raise FormatError(f"expected 7 comma-separated fields, got {len(parts)}")
    clip_id, duration_s, events_s, av_s, sem_s, speech_s, bgm_s = parts
    events = []
    if events_s:
        for chunk in events_s.split(";"):
            bits = chunk.split(":")
            if len(bits) != 3:
                raise FormatError(f"event {chunk!r} is not label:start:end")
            events.append((bits[0], float(bits[1]), float(bits[2])))
    if speech_s not in ("0", "1") or bgm_s not in ("0", "1"):
        raise FormatError(f"flags must be 0 or 1, got {speech_s!r}/{bgm_s!r}")
    return ClipRecord(
        clip_id=clip_id,
        duration=float(duration_s),
        events=tuple(events),
        av_align_score=None if av_s == "-" else float(av_s),
        semantic_score=None if sem_s == "-" else float(sem_s),
        speech_flag=speech_s == "1",
        bgm_flag=bgm_s == "1",
    )


def read_manifest(path: str) -> tuple[list, list]:
    """Parse a manifest file.

    Returns (records, problems) where problems is a list of
    (line_number, reason) for lines that failed to parse; parsing
    continues past them.
    """
    text = Path(path).read_text(encoding="utf-8")
    lines = text.splitlines()
    if not lines or lines[0].strip() != MANIFEST_HEADER:
        raise FormatError(f"{path}: first line must be {MANIFEST_HEADER!r}")
    records: list = []
    problems: list = []
    for lineno, raw in enumerate(lines[1:], start=2):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        try:
            records.append(parse_record(line))
        except (FormatError, ContractError, ValueError) as exc:
            problems.append((lineno, str(exc)))
    return records, problems


def write_manifest(path: str, records) -> None:
    lines = [MANIFEST_HEADER]
    lines.extend(format_record(r) for r in records)
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# scoring, filtering, cutting


def score_alignment(
    record: ClipRecord,
    audio_envelope,
    video_envelope,
    frame_rate: float,
    threshold_rel: float = 0.3,
    min_separation: float = 0.1,
    window: float = 0.1,
) -> ClipRecord:
    """Fill av_align_score from paired energy envelopes.

    Either envelope missing leaves the record unscored on the alignment
    axis (the filter will then drop it as "unscored"). Envelopes must
    cover the clip duration at the given frame rate.
    """
    if audio_envelope is None or video_envelope is None:
        return replace(record, av_align_score=None)
    audio_env = np.asarray(audio_envelope, dtype=np.float64)
    video_env = np.asarray(video_envelope, dtype=np.float64)
    for name, env in (("audio", audio_env), ("video", video_env)):
        covered = env.size / frame_rate
        if covered + 1e-9 < record.duration:
            raise ContractError(
                f"{record.clip_id}: {name} envelope covers {covered:.3f}s of a {record.duration:.3f}s clip"
            )
    a_peaks = detect_peaks(audio_env, frame_rate, threshold_rel, min_separation)
    v_peaks = detect_peaks(video_env, frame_rate, threshold_rel, min_separation)
    return replace(record, av_align_score=av_align(a_peaks, v_peaks, window))


def drop_reason(record: ClipRecord, policy: FilterPolicy) -> str | None:
    """First failing rule in the documented order, or None when kept."""
    if not record.scored:
        return "unscored"
    if record.av_align_score < policy.min_av_align:
        return "alignment"
    if record.semantic_score < policy.min_semantic:
        return "semantic"
    if policy.drop_speech and record.speech_flag:
        return "speech"
    if policy.drop_bgm and record.bgm_flag:
        return "bgm"
    return None


def filter_records(records, policy: FilterPolicy) -> tuple[list, list]:
    """Partition records into (kept, dropped); dropped pairs with a reason."""
    kept: list = []
    dropped: list = []
    for record in records:
        reason = drop_reason(record, policy)
        if reason is None:
            kept.append(record)
        else:
            dropped.append((record, reason))
    return kept, dropped


def _is_single_full_cover(record: ClipRecord) -> bool:
    if len(record.events) != 1:
        return False
    _, start, end = record.events[0]
    return start == 0.0 and end == record.duration


def cut(record: ClipRecord, audio_feature_seq=None, frame_rate: float | None = None) -> list:
    """Slice one segment per event, in time order.

    Returns a list of (segment_record, segment_features); features are
    None unless audio_feature_seq and frame_rate are given, in which case
    segment rows are [floor(start * fr), ceil(end * fr)). Segment ids are
    parent#index, except that a record which is already exactly one
    full-cover event is returned unchanged.
    """
    if _is_single_full_cover(record):
        features = None
        if audio_feature_seq is not None:
            features = np.asarray(audio_feature_seq, dtype=np.float64).copy()
        return [(record, features)]
    feats = None
    if audio_feature_seq is not None:
        if frame_rate is None or frame_rate <= 0:
            raise ContractError("cut with features needs a positive frame_rate")
        feats = np.asarray(audio_feature_seq, dtype=np.float64)
    segments: list = []
    events = sorted(record.events, key=lambda e: (e[1], e[2]))
    for index, (label, start, end) in enumerate(events):
        seg_features = None
        if feats is not None:
            row_start = int(np.floor(start * frame_rate))
            row_end = int(np.ceil(end * frame_rate))
            if row_end > feats.shape[0]:
                raise ContractError(
                    f"{record.clip_id}: event {label!r} [{start}, {end}) needs rows up to {row_end}, "
                    f"features have {feats.shape[0]}"
                )
            seg_features = feats[row_start:row_end].copy()
        seg_duration = end - start
        segment = ClipRecord(
            clip_id=f"{record.clip_id}#{index}",
            duration=seg_duration,
            events=((label, 0.0, seg_duration),),
            av_align_score=record.av_align_score,
            semantic_score=record.semantic_score,
            speech_flag=record.speech_flag,
            bgm_flag=record.bgm_flag,
        )
        segments.append((segment, seg_features))
    return segments


# ---------------------------------------------------------------------------
# end-to-end pipeline


@dataclass(frozen=True)
class PipelineResult:
    segments: tuple
    kept: tuple
    dropped: tuple  # of (record, reason)
    drop_counts: dict
    parse_problems: tuple = ()


def process_records(records, policy: FilterPolicy, envelope_provider=None) -> PipelineResult:
    """Score (when a provider is given), filter, and cut a record list.

    envelope_provider, when present, maps clip_id -> (audio_envelope,
    video_envelope, frame_rate) and is consulted only for records that
    still lack an alignment score.
    """
    scored: list = []
    for record in records:
        if record.av_align_score is None and envelope_provider is not None:
            provided = envelope_provider(record.clip_id)
            if provided is not None:
                audio_env, video_env, frame_rate = provided
                record = score_alignment(record, audio_env, video_env, frame_rate)
        scored.append(record)
    kept, dropped = filter_records(scored, policy)
    counts = {reason: 0 for reason in DROP_REASONS}
    for _, reason in dropped:
        counts[reason] += 1
    segments: list = []
    for record in kept:
        segments.extend(seg for seg, _ in cut(record))
    return PipelineResult(
        segments=tuple(segments),
        kept=tuple(kept),
        dropped=tuple(dropped),
        drop_counts=counts,
    )


def run_pipeline(
    manifest_in: str,
    manifest_out: str,
    policy: FilterPolicy,
    envelope_provider=None,
) -> PipelineResult:
    """File-level pipeline: read, score, filter, cut, write."""
    records, problems = read_manifest(manifest_in)
    result = process_records(records, policy, envelope_provider)
    write_manifest(manifest_out, result.segments)
    return replace(result, parse_problems=tuple(problems))


def render_drop_report(result: PipelineResult) -> str:
    """reason,count per line in the documented order, then a total line."""
    lines = [f"{reason},{result.drop_counts[reason]}" for reason in DROP_REASONS]
    lines.append(f"total_dropped,{len(result.dropped)}")
    lines.append(f"total_kept,{len(result.kept)}")
    return "\n".join(lines)
