"""Multi-block decoding state machine with KV-cache accounting.

The output region is split into fixed-size blocks. Each block moves through
Inactive -> Activated -> FullyActivated -> Stabilizing -> Completed, driven by
the completion fraction of its predecessor (the prompt counts as complete).
Activated blocks decode only tokens whose entropy is below the threshold; the
leading incomplete block is also guaranteed one decode per pass. Passes that
run while a block is stabilizing, and every ``refresh_interval``-th pass, are
full (uncached) passes and reset every cache age.

The KV cache here is bookkeeping only: cache ages are handed to the denoiser
so simulated backends can degrade with staleness.
"""
from __future__ import annotations

import enum
import hashlib
import json
import time
import warnings
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

from .denoisers import ContextView, DenoiserError, Prediction


class EngineError(RuntimeError):
    pass


class ConfigError(ValueError):
    pass


class BlockState(enum.Enum):
    INACTIVE = "inactive"
    ACTIVATED = "activated"
    FULLY_ACTIVATED = "fully_activated"
    STABILIZING = "stabilizing"
    COMPLETED = "completed"


ACTIVE_STATES = (BlockState.ACTIVATED, BlockState.FULLY_ACTIVATED)

LEGAL_TRANSITIONS = {
    (BlockState.INACTIVE, BlockState.ACTIVATED),
    (BlockState.ACTIVATED, BlockState.FULLY_ACTIVATED),
    (BlockState.ACTIVATED, BlockState.STABILIZING),
    (BlockState.FULLY_ACTIVATED, BlockState.STABILIZING),
    (BlockState.STABILIZING, BlockState.COMPLETED),
}

MODES = ("multi_block", "single_block", "vanilla")


@dataclass(frozen=True)
class EngineConfig:
    block_size: int = 32
    tau: float = 0.45
    block_add: float = 0.1
    fully_active: float = 0.95
    cache_delay: int = 1
    refresh_interval: int | None = 4  # None disables periodic refresh
    max_len: int = 256
    early_stop: bool = True
    mode: str = "multi_block"
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.block_size < 1:
            raise ConfigError("block_size must be >= 1")
        if not 0 < self.block_add <= self.fully_active <= 1:
            raise ConfigError("need 0 < block_add <= fully_active <= 1")
        if self.cache_delay < 1:
            raise ConfigError("cache_delay must be >= 1")
        if self.refresh_interval is not None and self.refresh_interval < 1:
            raise ConfigError("refresh_interval must be >= 1 (or null to disable)")
        if self.max_len < 1:
            raise ConfigError("max_len must be >= 1")
        if self.tau < 0:
            raise ConfigError("tau must be >= 0")

    def activation_thresholds(self) -> tuple[float, float]:
        # Baselines open the next block only once the current one is fully decoded.
        if self.mode == "multi_block":
            return self.block_add, self.fully_active
        return 1.0, 1.0

    @classmethod
    def from_json(cls, obj: dict) -> "EngineConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(obj) - known
        if unknown:
            raise ConfigError(f"unknown engine config fields: {sorted(unknown)}")
        return cls(**obj)

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class Block:
    index: int  # 1-based
    start: int  # first 1-based output position
    size: int
    state: BlockState = BlockState.INACTIVE
    unmasked: int = 0
    rounds: int = 0  # stabilization rounds served
    cache_age: int | None = None

    @property
    def end(self) -> int:
        return self.start + self.size - 1

    @property
    def completion(self) -> float:
        return self.unmasked / self.size

    def positions(self) -> range:
        return range(self.start, self.end + 1)


@dataclass(frozen=True)
class Transition:
    block: int
    before: BlockState
    after: BlockState


@dataclass
class DecodeMetrics:
    forwards: int = 0
    full_forwards: int = 0
    tokens_generated: int = 0
    refresh_events: int = 0
    truncated: bool = False
    wall_clock_s: float = 0.0
    transcript: list[tuple[int, int, int, float]] = field(default_factory=list)

    @property
    def tpf(self) -> float:
        return self.tokens_generated / self.forwards if self.forwards else 0.0

    def to_json(self, transcript: bool = False) -> dict:
        out = {
            "forwards": self.forwards,
            "full_forwards": self.full_forwards,
            "tokens_generated": self.tokens_generated,
            "tpf": self.tpf,
            "refresh_events": self.refresh_events,
            "truncated": self.truncated,
            "wall_clock_s": self.wall_clock_s,
        }
        if transcript:
            out["transcript"] = [list(ev) for ev in self.transcript]
        return out


@dataclass
class StepEvents:
    pass_index: int
    full_pass: bool
    refreshed: bool
    transitions: list[Transition]
    decodes: list[tuple[int, int, float]]  # (position, token, entropy)
    states: tuple[BlockState, ...]  # ledger after the pass
    cache_ages: dict[int, int]  # ages seen by the denoiser during the pass
    terminated: bool


@dataclass
class Session:
    prompt: tuple[int, ...]
    config: EngineConfig
    mask_id: int
    eos_id: int
    tokens: list[int]
    blocks: list[Block]
    target: tuple[int, ...] | None = None
    pass_index: int = 0
    metrics: DecodeMetrics = field(default_factory=DecodeMetrics)
    history: list[StepEvents] = field(default_factory=list)
    terminated: bool = False
    eos_position: int | None = None
    warnings: list[str] = field(default_factory=list)

    @property
    def max_len(self) -> int:
        return len(self.tokens)

    def block_of(self, position: int) -> Block:
        return self.blocks[(position - 1) // self.config.block_size]

    def masked_positions(self, block: Block) -> list[int]:
        return [p for p in block.positions() if self.tokens[p - 1] == self.mask_id]

    def output(self) -> tuple[int, ...]:
        """Tokens up to and including the first EOS (all tokens if there is none)."""
        if self.eos_position is not None:
            return tuple(self.tokens[: self.eos_position])
        return tuple(self.tokens)


def init_session(prompt: Sequence[int], config: EngineConfig, mask_id: int, eos_id: int,
                 target: Sequence[int] | None = None) -> Session:
    max_len = config.max_len
    notes = []
    if max_len % config.block_size:
        padded = -(-max_len // config.block_size) * config.block_size
        msg = f"max_len {max_len} padded to {padded} (multiple of block_size {config.block_size})"
        warnings.warn(msg, stacklevel=2)
        notes.append(msg)
        config = replace(config, max_len=padded)
        max_len = padded
    if target is not None:
        target = tuple(target)
        if len(target) < max_len:
            target = target + (eos_id,) * (max_len - len(target))
        elif len(target) > max_len:
            raise ConfigError(f"target length {len(target)} exceeds max_len {max_len}")
    bs = config.block_size
    blocks = [Block(index=i + 1, start=i * bs + 1, size=bs) for i in range(max_len // bs)]
    blocks[0].state = BlockState.FULLY_ACTIVATED
    return Session(
        prompt=tuple(prompt), config=config, mask_id=mask_id, eos_id=eos_id,
        tokens=[mask_id] * max_len, blocks=blocks, target=target, warnings=notes,
    )


def advance_blocks(blocks: Sequence[Block], config: EngineConfig) -> list[Transition]:
    """Apply lifecycle transitions in block order, using completion at pass start."""
    block_add, fully_active = config.activation_thresholds()
    out = []

    def move(b: Block, new: BlockState) -> None:
        out.append(Transition(b.index, b.state, new))
        b.state = new

    for b in blocks:
        pred = 1.0 if b.index == 1 else blocks[b.index - 2].completion
        if b.state is BlockState.STABILIZING and b.rounds >= config.cache_delay:
            move(b, BlockState.COMPLETED)
            b.cache_age = 0
        if b.state is BlockState.INACTIVE and pred >= block_add:
            move(b, BlockState.ACTIVATED)
        if b.state is BlockState.ACTIVATED and pred >= fully_active:
            move(b, BlockState.FULLY_ACTIVATED)
        if b.state in ACTIVE_STATES and b.unmasked == b.size:
            move(b, BlockState.STABILIZING)
            b.rounds = 0
    return out


def _pick_min(preds: Sequence[Prediction]) -> Prediction:
    return min(preds, key=lambda p: (p.entropy, p.position))


def select_decodes(predictions: Sequence[Prediction], blocks: Sequence[Block],
                   config: EngineConfig, policy=None) -> list[tuple[int, int]]:
    """Choose (position, token) pairs to write this pass.

    A position decodes iff its entropy is strictly below its threshold. If the
    leading incomplete block selected nothing, its lowest-entropy position is
    forced (ties to the lowest position). Vanilla mode decodes exactly that one
    forced position.
    """
    bs = config.block_size
    by_block: dict[int, list[Prediction]] = {}
    for p in predictions:
        by_block.setdefault((p.position - 1) // bs + 1, []).append(p)
    lead = next((b for b in blocks if b.unmasked < b.size), None)
    if lead is not None and lead.state in ACTIVE_STATES and not by_block.get(lead.index):
        raise EngineError(f"no predictions for the leading block {lead.index}")

    chosen: dict[int, int] = {}
    if config.mode != "vanilla":
        mult = getattr(policy, "threshold_multiplier", None)
        for p in predictions:
            tau = config.tau
            if mult is not None:
                tau *= mult((p.position - 1) % bs + 1)
            if p.entropy < tau:
                chosen[p.position] = p.mode
    if lead is not None and lead.state is BlockState.FULLY_ACTIVATED:
        lead_preds = by_block.get(lead.index, [])
        if lead_preds and not any(p.position in chosen for p in lead_preds):
            forced = _pick_min(lead_preds)
            chosen[forced.position] = forced.mode
    return sorted(chosen.items())


def _view(session: Session) -> ContextView:
    ages = {b.index: b.cache_age for b in session.blocks if b.state is BlockState.COMPLETED}
    return ContextView(
        prompt=session.prompt, tokens=tuple(session.tokens),
        block_size=session.config.block_size, mask_id=session.mask_id,
        cache_ages=ages, seed=session.config.seed, target=session.target,
    )


def _find_eos(session: Session) -> int | None:
    """First EOS position whose whole prefix is unmasked."""
    for i, tok in enumerate(session.tokens, start=1):
        if tok == session.mask_id:
            return None
        if tok == session.eos_id:
            return i
    return None


def step(session: Session, denoiser) -> StepEvents:
    if session.terminated:
        raise EngineError("session already terminated")
    cfg = session.config
    session.pass_index += 1
    idx = session.pass_index
    m = session.metrics

    transitions = advance_blocks(session.blocks, cfg)
    stabilizing = [b for b in session.blocks if b.state is BlockState.STABILIZING]
    periodic = cfg.refresh_interval is not None and idx % cfg.refresh_interval == 0
    full = bool(stabilizing) or periodic
    completed = [b for b in session.blocks if b.state is BlockState.COMPLETED]
    refreshed = False
    if full:
        m.full_forwards += 1
        if completed:
            refreshed = True
            m.refresh_events += 1
        for b in completed:
            b.cache_age = 0
    else:
        for b in completed:
            b.cache_age += 1

    positions = [p for b in session.blocks if b.state in ACTIVE_STATES
                 for p in session.masked_positions(b)]
    view = _view(session)
    if positions:
        try:
            preds = denoiser.predict(view, positions)
        except DenoiserError as exc:
            raise EngineError(f"pass {idx}: {exc}") from exc
        if len(preds) != len(positions):
            raise EngineError(f"pass {idx}: denoiser returned {len(preds)} predictions "
                              f"for {len(positions)} positions")
    else:
        preds = []
    entropy = {p.position: p.entropy for p in preds}
    decodes = select_decodes(preds, session.blocks, cfg, policy=denoiser)

    events = []
    for pos, tok in decodes:
        session.tokens[pos - 1] = tok
        session.block_of(pos).unmasked += 1
        events.append((pos, tok, entropy[pos]))
        m.transcript.append((idx, pos, tok, entropy[pos]))
    for b in stabilizing:
        b.rounds += 1  # every pass with a stabilizing block is a full pass
    m.forwards += 1

    eos = _find_eos(session)
    all_done = all(tok != session.mask_id for tok in session.tokens)
    if cfg.early_stop and eos is not None:
        session.terminated = True
        session.eos_position = eos
        m.tokens_generated = eos
    elif all_done:
        session.terminated = True
        session.eos_position = eos
        m.tokens_generated = session.max_len
        m.truncated = eos is None

    ev = StepEvents(
        pass_index=idx, full_pass=full, refreshed=refreshed, transitions=transitions,
        decodes=events, states=tuple(b.state for b in session.blocks),
        cache_ages=dict(view.cache_ages), terminated=session.terminated,
    )
    session.history.append(ev)
    return ev


def run(session: Session, denoiser) -> tuple[tuple[int, ...], DecodeMetrics]:
    # Each pass decodes >= 1 token, so max_len passes always suffice.
    limit = session.max_len + 1
    t0 = time.perf_counter()
    while not session.terminated:
        if session.pass_index >= limit:
            raise EngineError(f"no termination after {limit} passes")
        ev = step(session, denoiser)
        if not ev.decodes:
            raise EngineError(f"pass {ev.pass_index} decoded nothing")
    session.metrics.wall_clock_s = time.perf_counter() - t0
    return session.output(), session.metrics


def run_baseline(session: Session, denoiser, mode: str) -> tuple[tuple[int, ...], DecodeMetrics]:
    if mode not in ("vanilla", "single_block"):
        raise ConfigError(f"baseline mode must be vanilla or single_block, got {mode!r}")
    if session.pass_index:
        raise EngineError("baseline must start from a fresh session")
    session.config = replace(session.config, mode=mode)
    return run(session, denoiser)


def decode(prompt: Sequence[int], denoiser, config: EngineConfig, mask_id: int, eos_id: int,
           target: Sequence[int] | None = None) -> tuple[tuple[int, ...], DecodeMetrics, Session]:
    session = init_session(prompt, config, mask_id, eos_id, target=target)
    output, metrics = run(session, denoiser)
    return output, metrics, session


def transcript_digest(metrics: DecodeMetrics) -> str:
    blob = json.dumps(metrics.transcript, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()
