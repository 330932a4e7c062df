"""Three-stage conditioning curriculum, Adam, and the step loop.

Stage 1 trains text-to-audio only; stage 2 introduces video on paired
data; stage 3 re-weights toward video-to-audio and starts dropping text.
Per-draw keep flags are Bernoulli with the stage's keep probabilities,
applied on top of two hard rules: draws from a text-only source never
carry video, and draws from the video-only source never carry text. The
flag draws double as classifier-free dropout, so the unconditional branch
gets trained without a separate mechanism.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError, DivergenceError
from .flow import cfm_loss
from .model import ConditionBundle, TwoTowerModel
from .rng import SeededRng, derive_seed
from .tensor import Tensor, backward

TAG_T2A = "T2A"
TAG_TV2A = "TV2A"
TAG_V2A = "V2A"
_TAGS = (TAG_T2A, TAG_TV2A, TAG_V2A)


@dataclass(frozen=True)
class StageConfig:
    stage_id: int
    steps: int
    mix: dict
    p_keep_text: float
    p_keep_video: float

    def __post_init__(self):
        if self.stage_id < 1:
            raise ConfigError(f"stage_id must be >= 1, got {self.stage_id}")
        if self.steps < 1:
            raise ConfigError(f"steps must be >= 1, got {self.steps}")
        if not self.mix:
            raise ConfigError("stage mix must name at least one dataset")
        for tag, weight in self.mix.items():
            if tag not in _TAGS:
                raise ConfigError(f"unknown dataset tag {tag!r} in mix")
            if weight <= 0:
                raise ConfigError(f"mix weight for {tag} must be > 0, got {weight}")
        for name in ("p_keep_text", "p_keep_video"):
            p = getattr(self, name)
            if not (0.0 <= p <= 1.0):
                raise ConfigError(f"{name} must lie in [0, 1], got {p}")


# toy step counts keep the full curriculum in desk time; the production
# counts are recorded alongside for reference
TOY_STAGE_STEPS = {1: 300, 2: 100, 3: 300}
PRODUCTION_STAGE_STEPS = {1: 250_000, 2: 50_000, 3: 230_000}


def stage_preset(stage_id: int, steps: int | None = None) -> StageConfig:
    """The canonical curriculum row for a stage, with toy default steps."""
    rows = {
        1: ({TAG_T2A: 1}, 1.0, 0.0),
        2: ({TAG_T2A: 1, TAG_TV2A: 1}, 1.0, 0.5),
        3: ({TAG_T2A: 1, TAG_TV2A: 1, TAG_V2A: 2}, 0.5, 0.75),
    }
    if stage_id not in rows:
        raise ConfigError(f"stage_id must be 1, 2, or 3, got {stage_id}")
    mix, p_text, p_video = rows[stage_id]
    return StageConfig(
        stage_id=stage_id,
        steps=TOY_STAGE_STEPS[stage_id] if steps is None else steps,
        mix=dict(mix),
        p_keep_text=p_text,
        p_keep_video=p_video,
    )


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 3e-5
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    grad_clip_norm: float = 0.2
    batch_size: int = 8

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        b1, b2 = self.betas
        if not (0.0 <= b1 < 1.0 and 0.0 <= b2 < 1.0):
            raise ConfigError(f"betas must lie in [0, 1), got {self.betas}")
        if self.eps <= 0:
            raise ConfigError(f"eps must be > 0, got {self.eps}")
        if self.grad_clip_norm <= 0:
            raise ConfigError(f"grad_clip_norm must be > 0, got {self.grad_clip_norm}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")


def toy_optimizer() -> OptimizerConfig:
    """Optimizer settings sized for the toy curriculum."""
    return OptimizerConfig(lr=3e-3, batch_size=8)


def production_optimizer() -> OptimizerConfig:
    """Production-scale optimizer settings."""
    return OptimizerConfig(lr=3e-5, batch_size=128)


@dataclass(frozen=True)
class TrainEvent:
    step: int
    stage_id: int
    loss: float
    grad_norm_preclip: float
    mix_draw: str
    text_kept: bool
    video_kept: bool


def format_event(event: TrainEvent) -> str:
    """One whitespace-separated line; floats use repr for exact round-trip."""
    return (
        f"{event.step} {event.stage_id} {event.loss!r} {event.grad_norm_preclip!r} "
        f"{event.mix_draw} {int(event.text_kept)} {int(event.video_kept)}"
    )


def parse_event(line: str) -> TrainEvent:
    parts = line.split()
    if len(parts) != 7:
        raise ContractError(f"event line has {len(parts)} fields, expected 7: {line!r}")
    return TrainEvent(
        step=int(parts[0]),
        stage_id=int(parts[1]),
        loss=float(parts[2]),
        grad_norm_preclip=float(parts[3]),
        mix_draw=parts[4],
        text_kept=bool(int(parts[5])),
        video_kept=bool(int(parts[6])),
    )


@dataclass(frozen=True)
class DrawnSample:
    x1: np.ndarray
    cond: ConditionBundle
    tag: str


def draw_batch(stage: StageConfig, datasets: dict, rng: SeededRng, batch_size: int = 1) -> list:
    """Draw batch_size training samples under the stage's mixing rules.

    Per sample the rng is consumed in a fixed order: dataset tag, clip
    index, then only the keep flags the tag leaves free (text is forced
    off for V2A draws, video is forced off for T2A draws).
    """
    if batch_size < 1:
        raise ContractError(f"batch_size must be >= 1, got {batch_size}")
    tags = sorted(stage.mix)
    for tag in tags:
        if tag not in datasets or not datasets[tag]:
            raise ConfigError(f"stage {stage.stage_id} mix needs dataset {tag!r}, which is missing or empty")
    weights = np.array([stage.mix[t] for t in tags], dtype=np.float64)
    cumulative = np.cumsum(weights / weights.sum())

    batch = []
    for _ in range(batch_size):
        u = rng.uniform()
        tag = tags[int(np.searchsorted(cumulative, u, side="right"))]
        clip = datasets[tag][rng.integers(len(datasets[tag]))]
        text_kept = False if tag == TAG_V2A else rng.bernoulli(stage.p_keep_text)
        video_kept = False if tag == TAG_T2A else rng.bernoulli(stage.p_keep_video)
        cond = ConditionBundle(
            text_emb=Tensor(clip.text_emb) if text_kept else None,
            video_feat=Tensor(clip.video_feat) if video_kept else None,
            text_kept=text_kept,
            video_kept=video_kept,
        )
        batch.append(DrawnSample(x1=clip.x1, cond=cond, tag=tag))
    return batch


def clip_grad_norm(grads: dict, max_norm: float) -> tuple[dict, float]:
    """Scale the gradient set so its global L2 norm is at most max_norm.

    Returns the (possibly rescaled) gradients and the pre-clip norm.
    """
    if max_norm <= 0:
        raise ContractError(f"max_norm must be > 0, got {max_norm}")
    total = 0.0
    for g in grads.values():
        total += float(np.sum(g * g))
    norm = float(np.sqrt(total))
    if norm <= max_norm:
        return grads, norm
    scale = max_norm / norm
    return {name: g * scale for name, g in grads.items()}, norm


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, opt_cfg: OptimizerConfig, state: AdamState) -> None:
    """One bias-corrected Adam update, in place on the parameter tensors."""
    state.step += 1
    t = state.step
    b1, b2 = opt_cfg.betas
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient for {name} at optimizer step {t}", step=t)
        m = state.m.get(name)
        if m is None:
            m = np.zeros(p.shape, dtype=np.float64)
            state.m[name] = m
            state.v[name] = np.zeros(p.shape, dtype=np.float64)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        p.data -= opt_cfg.lr * m_hat / (np.sqrt(v_hat) + opt_cfg.eps)


def run_stage(
    model: TwoTowerModel,
    stage: StageConfig,
    opt_cfg: OptimizerConfig,
    datasets: dict,
    rng: SeededRng,
    sink=None,
    start_step: int = 0,
    checkpoint_path: str | None = None,
    adam_state: AdamState | None = None,
) -> list:
    """Run one curriculum stage and return its TrainEvents.

    sink, when given, receives each event as it is produced. On loss or
    gradient divergence the parameters from the previous step are restored
    (and written to checkpoint_path, when given) before raising.
    """
    events: list = []
    state = adam_state if adam_state is not None else AdamState()
    params = model.parameters()
    last_good = model.state_arrays()

    for i in range(stage.steps):
        step = start_step + i + 1
        batch = draw_batch(stage, datasets, rng, opt_cfg.batch_size)
        model.zero_grad()
        loss = cfm_loss(model, [(s.x1, s.cond) for s in batch], rng)
        loss_value = loss.item()
        if not np.isfinite(loss_value):
            model.load_state(last_good)
            if checkpoint_path is not None:
                model.save(checkpoint_path)
            raise DivergenceError(f"training loss diverged at step {step}", step=step)
        backward(loss)
        grads = {name: p.grad for name, p in params.items() if p.grad is not None}
        grads, pre_norm = clip_grad_norm(grads, opt_cfg.grad_clip_norm)
        try:
            adam_step(params, grads, opt_cfg, state)
        except DivergenceError:
            model.load_state(last_good)
            if checkpoint_path is not None:
                model.save(checkpoint_path)
            raise
        last_good = model.state_arrays()

        first = batch[0]
        event = TrainEvent(
            step=step,
            stage_id=stage.stage_id,
            loss=loss_value,
            grad_norm_preclip=pre_norm,
            mix_draw=first.tag,
            text_kept=first.cond.text_kept,
            video_kept=first.cond.video_kept,
        )
        events.append(event)
        if sink is not None:
            sink(event)

    if checkpoint_path is not None:
        model.save(checkpoint_path)
    return events


def run_curriculum(
    model: TwoTowerModel,
    stages: list,
    opt_cfg: OptimizerConfig,
    datasets: dict,
    seed: int,
    out_dir: str | None = None,
    sink=None,
) -> list:
    """Run stages in order, checkpointing each and chaining step numbers.

    Stage ids must be strictly increasing. Each stage gets its own seed
    derived from (seed, stage_id), so a run resumed from a stage-N
    checkpoint reproduces the original stage-N+1 events exactly.
    """
    if not stages:
        raise ConfigError("run_curriculum needs at least one stage")
    ids = [s.stage_id for s in stages]
    if any(b <= a for a, b in zip(ids, ids[1:])):
        raise ConfigError(f"stage ids must be strictly increasing, got {ids}")
    events: list = []
    step = 0
    for stage in stages:
        stage_rng = SeededRng(derive_seed(seed, "stage", stage.stage_id))
        path = None
        if out_dir is not None:
            path = f"{out_dir}/stage{stage.stage_id}.ckpt"
        stage_events = run_stage(
            model,
            stage,
            opt_cfg,
            datasets,
            stage_rng,
            sink=sink,
            start_step=step,
            checkpoint_path=path,
        )
        events.extend(stage_events)
        step = events[-1].step
    return events
