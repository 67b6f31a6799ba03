"""Token sequences, teacher trajectories and distillation records.

Positions are 1-based everywhere in this module. A trajectory stores the order
in which a teacher unmasked output positions, one per step; the state after
step ``i`` has exactly ``order[:i]`` revealed.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

import numpy as np


class SequenceError(ValueError):
    pass


@dataclass(frozen=True)
class Vocab:
    size: int
    mask_id: int
    eos_id: int

    def __post_init__(self):
        if self.size < 4:
            raise SequenceError(f"vocab size must be >= 4, got {self.size}")
        if self.mask_id == self.eos_id:
            raise SequenceError("mask_id and eos_id must differ")
        for name in ("mask_id", "eos_id"):
            v = getattr(self, name)
            if not 0 <= v < self.size:
                raise SequenceError(f"{name}={v} outside vocabulary of size {self.size}")

    @classmethod
    def standard(cls, size: int) -> "Vocab":
        """Content tokens ``0..size-3``, EOS ``size-2``, mask ``size-1``."""
        return cls(size=size, mask_id=size - 1, eos_id=size - 2)

    def content_tokens(self) -> list[int]:
        return [t for t in range(self.size) if t not in (self.mask_id, self.eos_id)]

    def to_json(self) -> dict:
        return {"size": self.size, "mask_id": self.mask_id, "eos_id": self.eos_id}

    @classmethod
    def from_json(cls, obj: dict) -> "Vocab":
        return cls(int(obj["size"]), int(obj["mask_id"]), int(obj["eos_id"]))


@dataclass(frozen=True)
class Trajectory:
    order: tuple[int, ...]
    truth: tuple[int, ...]

    @property
    def n(self) -> int:
        return len(self.truth)


@dataclass(frozen=True)
class NoiseSpec:
    s: int
    k: int
    t: float

    def window(self) -> range:
        return range(self.s + 1, self.s + self.k + 1)

    def reveal_step(self) -> int:
        # round() guards against k*t landing a hair above an integer (e.g. 24*0.4).
        return self.s + math.ceil(round(self.k * self.t, 9))

    def check(self, n: int) -> None:
        if self.s < 0 or self.k < 1 or self.s + self.k > n:
            raise SequenceError(f"invalid window s={self.s}, k={self.k} for length {n}")
        if not 0.0 <= self.t <= 1.0:
            raise SequenceError(f"t must lie in [0, 1], got {self.t}")


@dataclass(frozen=True)
class DistillationRecord:
    prompt: tuple[int, ...]
    noisy: tuple[int, ...]
    label_positions: tuple[int, ...]
    labels: tuple[int, ...]
    t: float
    s: int
    k: int
    step_index: int

    def revealed_offsets(self, mask_id: int) -> list[int]:
        """1-based window offsets whose token is visible in ``noisy``."""
        return [o for o in range(1, self.k + 1) if self.noisy[self.s + o - 1] != mask_id]

    def to_json(self, mask_id: int) -> dict:
        return {
            "prompt": list(self.prompt),
            "noisy": [-1 if tok == mask_id else tok for tok in self.noisy],
            "label_positions": list(self.label_positions),
            "labels": list(self.labels),
            "t": self.t,
            "s": self.s,
            "k": self.k,
            "step_index": self.step_index,
        }

    @classmethod
    def from_json(cls, obj: dict, mask_id: int) -> "DistillationRecord":
        return cls(
            prompt=tuple(obj["prompt"]),
            noisy=tuple(mask_id if tok == -1 else tok for tok in obj["noisy"]),
            label_positions=tuple(obj["label_positions"]),
            labels=tuple(obj["labels"]),
            t=float(obj["t"]),
            s=int(obj["s"]),
            k=int(obj["k"]),
            step_index=int(obj["step_index"]),
        )


def validate_trajectory(traj: Trajectory, n: int, mask_id: int | None = None) -> str | None:
    """Return ``None`` if ``traj`` is a valid length-``n`` trajectory, else the first problem."""
    if len(traj.order) != n:
        return f"order has length {len(traj.order)}, expected {n}"
    if len(traj.truth) != n:
        return f"truth has length {len(traj.truth)}, expected {n}"
    seen = set()
    for pos in traj.order:
        if not 1 <= pos <= n:
            return f"position {pos} out of range 1..{n}"
        if pos in seen:
            return f"duplicate position {pos}"
        seen.add(pos)
    if mask_id is not None:
        for i, tok in enumerate(traj.truth, start=1):
            if tok == mask_id:
                return f"truth is masked at position {i}"
    return None


def unmasked_set(traj: Trajectory, step: int) -> frozenset[int]:
    if not 0 <= step <= len(traj.order):
        raise SequenceError(f"step {step} outside 0..{len(traj.order)}")
    return frozenset(traj.order[:step])


def record_teacher_trajectory(denoiser, prompt: Sequence[int], n: int, vocab: Vocab,
                              seed: int = 0, block_size: int = 32,
                              target: Sequence[int] | None = None) -> Trajectory:
    """Decode ``n`` positions one per pass, always taking the lowest-entropy one.

    Generation continues past EOS so the trajectory covers every position.
    """
    from .denoisers import ContextView  # local import: denoisers depends on this module

    if n < 1:
        raise SequenceError("n must be >= 1")
    tokens = [vocab.mask_id] * n
    order = []
    masked = set(range(1, n + 1))
    for step in range(1, n + 1):
        view = ContextView(
            prompt=tuple(prompt), tokens=tuple(tokens), block_size=block_size,
            mask_id=vocab.mask_id, cache_ages={}, seed=seed,
            target=None if target is None else tuple(target),
        )
        try:
            preds = denoiser.predict(view, sorted(masked))
        except Exception as exc:
            raise SequenceError(f"teacher failed at pass {step}: {exc}") from exc
        best = min(preds, key=lambda p: (p.entropy, p.position))
        tokens[best.position - 1] = best.mode
        masked.discard(best.position)
        order.append(best.position)
    return Trajectory(order=tuple(order), truth=tuple(tokens))


def build_noisy_sequence(truth: Sequence[int], traj: Trajectory, spec: NoiseSpec,
                         vocab: Vocab) -> tuple[tuple[int, ...], tuple[int, ...]]:
    """Mask ``truth`` to look like the teacher's state ``s + ceil(k*t)`` steps in.

    Prefix positions (``<= s``) are always visible and tail positions
    (``> s + k``) always masked; inside the window a position is visible iff
    the teacher had already unmasked it.
    """
    n = len(truth)
    spec.check(n)
    revealed = unmasked_set(traj, spec.reveal_step())
    noisy = []
    labels = []
    for i in range(1, n + 1):
        if i <= spec.s:
            noisy.append(truth[i - 1])
        elif i > spec.s + spec.k:
            noisy.append(vocab.mask_id)
        elif i in revealed:
            noisy.append(truth[i - 1])
        else:
            noisy.append(vocab.mask_id)
            labels.append(i)
    return tuple(noisy), tuple(labels)


def _check_progress(progress: float) -> None:
    if not 0.0 <= progress <= 1.0:
        raise SequenceError(f"progress must lie in [0, 1], got {progress}")


def curriculum_noise(progress: float, t_start: float = 0.0, t_end: float = 0.8) -> float:
    _check_progress(progress)
    if not 0.0 <= t_start <= t_end <= 1.0:
        raise SequenceError(f"need 0 <= t_start <= t_end <= 1, got {t_start}, {t_end}")
    if progress == 1.0:
        return t_end
    return t_start + progress * (t_end - t_start)


def curriculum_window(progress: float, k_start: int = 16, k_end: int = 32) -> int:
    _check_progress(progress)
    if not 1 <= k_start <= k_end:
        raise SequenceError(f"need 1 <= k_start <= k_end, got {k_start}, {k_end}")
    # floor(x + 0.5) keeps the schedule monotone (round() would use banker's rounding)
    return int(math.floor(k_start + progress * (k_end - k_start) + 0.5))


@dataclass(frozen=True)
class Schedule:
    t_start: float = 0.0
    t_end: float = 0.8
    k_start: int = 16
    k_end: int = 32


def emit_records(pairs: Sequence[tuple[Sequence[int], Sequence[int]]],
                 trajs: Sequence[Trajectory], schedule: Schedule, count: int,
                 vocab: Vocab, seed: int = 0) -> Iterator[DistillationRecord]:
    """Yield ``count`` records per (prompt, truth) pair along the curriculum.

    Records are emitted round-major (every pair once per round) so each pair
    sees the whole schedule. Window lengths longer than a sequence are clipped.
    """
    if len(pairs) != len(trajs):
        raise SequenceError(f"{len(pairs)} pairs but {len(trajs)} trajectories")
    if count < 1:
        raise SequenceError("count must be >= 1")
    for idx, ((_, truth), traj) in enumerate(zip(pairs, trajs)):
        if len(truth) != traj.n or len(traj.order) != len(truth):
            raise SequenceError(
                f"pair {idx}: truth length {len(truth)} does not match trajectory length {traj.n}"
            )
    rng = np.random.default_rng(seed)
    total = count * len(pairs)
    j = 0
    for _ in range(count):
        for (prompt, truth), traj in zip(pairs, trajs):
            progress = j / (total - 1) if total > 1 else 0.0
            t = curriculum_noise(progress, schedule.t_start, schedule.t_end)
            k = min(curriculum_window(progress, schedule.k_start, schedule.k_end), len(truth))
            s = int(rng.integers(0, len(truth) - k + 1))
            spec = NoiseSpec(s=s, k=k, t=t)
            noisy, label_pos = build_noisy_sequence(truth, traj, spec, vocab)
            yield DistillationRecord(
                prompt=tuple(prompt),
                noisy=noisy,
                label_positions=label_pos,
                labels=tuple(truth[p - 1] for p in label_pos),
                t=t, s=s, k=k, step_index=j,
            )
            j += 1


# -- JSONL helpers -----------------------------------------------------------

def trajectory_to_json(prompt: Sequence[int], traj: Trajectory) -> dict:
    return {"prompt": list(prompt), "truth": list(traj.truth), "order": list(traj.order)}


def trajectory_from_json(obj: dict) -> tuple[tuple[int, ...], Trajectory]:
    return tuple(obj["prompt"]), Trajectory(order=tuple(obj["order"]), truth=tuple(obj["truth"]))


def dumps_jsonl(objs: Iterable[dict]) -> str:
    return "".join(json.dumps(o, separators=(",", ":")) + "\n" for o in objs)


def loads_jsonl(text: str) -> list[dict]:
    return [json.loads(line) for line in text.splitlines() if line.strip()]
