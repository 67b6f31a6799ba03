"""Prediction backends consumed by the decoding engine.

Every backend implements ``predict(view, positions) -> list[Prediction]``
over a :class:`ContextView` of the session. Entropies are in nats.
"""
from __future__ import annotations

import hashlib
import math
import random
import struct
import warnings
from collections import Counter, defaultdict
from dataclasses import replace, asdict, dataclass, field
from typing import Iterable, Mapping, Protocol, Sequence

from scipy.optimize import brentq
from scipy.special import xlogy

from .sequence import DistillationRecord, Vocab


class DenoiserError(ValueError):
    pass


class ContractViolation(DenoiserError):
    pass


@dataclass(frozen=True)
class Prediction:
    position: int
    mode: int
    mode_prob: float
    entropy: float
    support: tuple[tuple[int, float], ...]


def prediction_from_support(position: int, support: Iterable[tuple[int, float]],
                            mode: int | None = None) -> Prediction:
    items = tuple((int(t), float(p)) for t, p in support if p > 0.0)
    if mode is None:
        mode, mode_prob = max(items, key=lambda tp: (tp[1], -tp[0]))
    else:
        mode_prob = dict(items)[mode]
    entropy = -math.fsum(p * math.log(p) for _, p in items)
    return Prediction(position, mode, mode_prob, max(entropy, 0.0), items)


@dataclass(frozen=True)
class ContextView:
    """What a denoiser sees for one forward pass.

    ``tokens`` is the output region (``mask_id`` where still masked);
    ``cache_ages`` maps 1-based block index to the age of its KV cache and has
    entries only for Completed blocks. ``target`` is the reference output,
    present only for simulated backends that need it.
    """

    prompt: tuple[int, ...]
    tokens: tuple[int, ...]
    block_size: int
    mask_id: int
    cache_ages: Mapping[int, int] = field(default_factory=dict)
    seed: int = 0
    target: tuple[int, ...] | None = None

    @property
    def sequence(self) -> tuple[int, ...]:
        return self.prompt + self.tokens

    def block_of(self, position: int) -> int:
        return (position - 1) // self.block_size + 1

    @property
    def block_map(self) -> dict[int, int]:
        return {p: self.block_of(p) for p in range(1, len(self.tokens) + 1)}

    def is_masked(self, position: int) -> bool:
        return self.tokens[position - 1] == self.mask_id

    def check_request(self, positions: Iterable[int]) -> None:
        for p in positions:
            if not 1 <= p <= len(self.tokens):
                raise ContractViolation(f"position {p} outside output region 1..{len(self.tokens)}")
            if not self.is_masked(p):
                raise ContractViolation(f"position {p} is already unmasked")


class Denoiser(Protocol):
    def predict(self, view: ContextView, positions: Sequence[int]) -> list[Prediction]: ...


def _support_with_entropy(mode: int, entropy: float, others: Sequence[int]) -> list[tuple[int, float]]:
    """Distribution with ``mode`` on top and the rest spread evenly over ``others``."""
    if entropy <= 0.0:
        return [(mode, 1.0)]
    d = len(others)
    if entropy >= math.log(d + 1):
        raise DenoiserError(f"entropy {entropy} unreachable with {d + 1} outcomes")

    def h(q: float) -> float:
        return -(xlogy(q, q) + xlogy(1.0 - q, (1.0 - q) / d))

    q = brentq(lambda q: h(q) - entropy, 1.0 / (d + 1), 1.0, xtol=1e-15)
    rest = (1.0 - q) / d
    return [(mode, q)] + [(t, rest) for t in others]


class ScriptedDenoiser:
    """Lookup-table backend: position -> (token, entropy), fixed across passes."""

    def __init__(self, table: Mapping[int, tuple[int, float]], vocab: Vocab,
                 default: tuple[int, float] | None = None):
        self.table = {int(k): (int(v[0]), float(v[1])) for k, v in table.items()}
        self.vocab = vocab
        self.default = default

    def predict(self, view: ContextView, positions: Sequence[int]) -> list[Prediction]:
        view.check_request(positions)
        out = []
        for pos in positions:
            entry = self.table.get(pos, self.default)
            if entry is None:
                raise DenoiserError(f"no scripted prediction for position {pos}")
            token, entropy = entry
            others = [t for t in range(self.vocab.size)
                      if t not in (token, self.vocab.mask_id)]
            support = _support_with_entropy(token, entropy, others)
            pred = prediction_from_support(pos, support, mode=token)
            # report the scripted entropy verbatim so threshold traces are exact
            out.append(replace(pred, entropy=entropy))
        return out

    @classmethod
    def from_json(cls, obj: dict, vocab: Vocab | None = None) -> "ScriptedDenoiser":
        if "vocab" in obj:
            vocab = Vocab.from_json(obj["vocab"])
        if vocab is None:
            raise DenoiserError("scripted denoiser needs a vocabulary")
        default = obj.get("default")
        return cls(
            {int(k): tuple(v) for k, v in obj.get("positions", {}).items()},
            vocab,
            None if default is None else (int(default[0]), float(default[1])),
        )


# -- bidirectional n-gram ----------------------------------------------------

class NGramDenoiser:
    """Counts of a token given up to ``order`` revealed neighbours on each side.

    At prediction time the context is the run of revealed tokens immediately
    left and right of the position (capped at ``order``). Unseen contexts back
    off by shortening the longer side first until the unigram table.
    """

    FORMAT = "paradec-ngram-v1"

    def __init__(self, order: int, smoothing: float, vocab: Vocab,
                 tables: dict[tuple[int, int], dict[tuple[tuple[int, ...], tuple[int, ...]], Counter]]):
        self.order = order
        self.smoothing = smoothing
        self.vocab = vocab
        self.tables = tables
        self._outcomes = [t for t in range(vocab.size) if t != vocab.mask_id]
        self._cache: dict = {}

    @classmethod
    def train(cls, corpus: Sequence[Sequence[int]], order: int, smoothing: float,
              vocab: Vocab) -> "NGramDenoiser":
        if order < 1:
            raise DenoiserError("n-gram order must be >= 1")
        if not corpus or not any(len(s) for s in corpus):
            raise DenoiserError("cannot train on an empty corpus")
        if smoothing < 0:
            raise DenoiserError("smoothing must be >= 0")
        tables: dict = defaultdict(lambda: defaultdict(Counter))
        for seq in corpus:
            seq = list(seq)
            n = len(seq)
            for i, tok in enumerate(seq):
                for a in range(0, min(order, i) + 1):
                    left = tuple(seq[i - a:i])
                    for b in range(0, min(order, n - 1 - i) + 1):
                        right = tuple(seq[i + 1:i + 1 + b])
                        tables[(a, b)][(left, right)][tok] += 1
        return cls(order, smoothing, vocab, {k: dict(v) for k, v in tables.items()})

    def _distribution(self, left: tuple[int, ...], right: tuple[int, ...]):
        key = (left, right)
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        a, b = len(left), len(right)
        while True:
            counts = self.tables.get((a, b), {}).get((left[len(left) - a:], right[:b]))
            if counts or (a == 0 and b == 0):
                break
            if a >= b:
                a -= 1
            else:
                b -= 1
        counts = counts or Counter()
        total = sum(counts.values())
        denom = total + self.smoothing * len(self._outcomes)
        if denom == 0:
            support = [(t, 1.0 / len(self._outcomes)) for t in self._outcomes]
        else:
            support = [(t, (counts.get(t, 0) + self.smoothing) / denom) for t in self._outcomes]
        self._cache[key] = support
        return support

    def predict(self, view: ContextView, positions: Sequence[int]) -> list[Prediction]:
        view.check_request(positions)
        seq = view.sequence
        offset = len(view.prompt)
        mask = view.mask_id
        out = []
        for pos in positions:
            i = offset + pos - 1
            left = []
            j = i - 1
            while j >= 0 and len(left) < self.order and seq[j] != mask:
                left.append(seq[j])
                j -= 1
            right = []
            j = i + 1
            while j < len(seq) and len(right) < self.order and seq[j] != mask:
                right.append(seq[j])
                j += 1
            support = self._distribution(tuple(reversed(left)), tuple(right))
            out.append(prediction_from_support(pos, support))
        return out

    def to_json(self) -> dict:
        tables = []
        for (a, b) in sorted(self.tables):
            entries = []
            for (left, right), counts in sorted(self.tables[(a, b)].items()):
                entries.append([list(left), list(right),
                                [[t, c] for t, c in sorted(counts.items())]])
            tables.append({"left": a, "right": b, "entries": entries})
        return {
            "format": self.FORMAT,
            "order": self.order,
            "smoothing": self.smoothing,
            "vocab": self.vocab.to_json(),
            "tables": tables,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "NGramDenoiser":
        if obj.get("format") != cls.FORMAT:
            raise DenoiserError(f"unsupported n-gram model format {obj.get('format')!r}")
        tables = {}
        for tab in obj["tables"]:
            tables[(tab["left"], tab["right"])] = {
                (tuple(left), tuple(right)): Counter({t: c for t, c in counts})
                for left, right, counts in tab["entries"]
            }
        return cls(int(obj["order"]), float(obj["smoothing"]),
                   Vocab.from_json(obj["vocab"]), tables)


# -- seeded oracle simulator -------------------------------------------------

@dataclass(frozen=True)
class OracleParams:
    # Simulation knobs; these defaults are artifact choices, not measured values.
    a_max: float = 0.98
    a_min: float = 0.20
    c_dist: float = 0.15
    c_mask: float = 0.35
    c_stale: float = 0.25
    D: int = 8
    decoys: int = 4
    stale_scale: int = 8
    seed: int = 0

    def check(self, vocab: Vocab | None = None) -> None:
        if not 0 < self.a_min <= self.a_max <= 1:
            raise DenoiserError(f"need 0 < a_min <= a_max <= 1, got {self.a_min}, {self.a_max}")
        if min(self.c_dist, self.c_mask, self.c_stale) < 0:
            raise DenoiserError("oracle coefficients must be >= 0")
        if self.D < 1 or self.stale_scale < 1 or self.decoys < 1:
            raise DenoiserError("D, stale_scale and decoys must be >= 1")
        if vocab is not None and self.decoys + 1 > vocab.size - 1:
            raise DenoiserError(f"{self.decoys} decoys do not fit a vocabulary of {vocab.size}")

    @classmethod
    def from_json(cls, obj: dict) -> "OracleParams":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(obj) - known - {"vocab"}
        if unknown:
            raise DenoiserError(f"unknown oracle parameters: {sorted(unknown)}")
        return cls(**{k: v for k, v in obj.items() if k in known})

    def to_json(self) -> dict:
        return asdict(self)


def _hash_u64(*parts: int) -> int:
    data = struct.pack(f"<{len(parts)}q", *parts)
    return int.from_bytes(hashlib.blake2b(data, digest_size=8).digest(), "little")


class _ViewStats:
    """Per-view quantities shared by every position requested in one pass."""

    def __init__(self, view: ContextView):
        n = len(view.tokens)
        mask = view.mask_id
        revealed = [tok != mask for tok in view.tokens]
        big = n + 1
        # gap to the nearest revealed token on each side; the prompt sits at gap 0 left of position 1
        left = [big] * n
        last = 0 if view.prompt else None
        for i in range(n):
            left[i] = big if last is None else i - last
            if revealed[i]:
                last = i + 1
        right = [big] * n
        nxt = None
        for i in range(n - 1, -1, -1):
            right[i] = big if nxt is None else nxt - i - 1
            if revealed[i]:
                nxt = i
        self.gap = [min(l, r) for l, r in zip(left, right)]
        bs = view.block_size
        self.block_masked: dict[int, int] = Counter(
            i // bs + 1 for i in range(n) if not revealed[i])
        self.block_len = {b: min(bs, n - (b - 1) * bs) for b in range(1, (n - 1) // bs + 2)}
        self.revealed_fp = hashlib.blake2b(
            struct.pack(f"<{n}?", *revealed), digest_size=8).digest()
        self.view = view
        self._stale: dict[int, float] = {}

    def stale_frac(self, block: int, scale: int) -> float:
        hit = self._stale.get(block)
        if hit is None:
            ages = [min(age / scale, 1.0) for b, age in self.view.cache_ages.items() if b < block]
            hit = self._stale[block] = math.fsum(ages) / len(ages) if ages else 0.0
        return hit


class OracleDenoiser:
    """Seeded simulator that knows the target and is right with probability q.

    ``q`` falls with the distance to revealed context, with how much of the
    position's own block is still masked, and with the staleness of cached
    preceding blocks. Entropy is a function of ``q`` alone.
    """

    def __init__(self, params: OracleParams, vocab: Vocab):
        params.check(vocab)
        self.params = params
        self.vocab = vocab
        self._candidates = [t for t in range(vocab.size) if t != vocab.mask_id]
        self._decoy_cache: dict[tuple[int, int], tuple[int, ...]] = {}

    def quality(self, view: ContextView, position: int, stats: _ViewStats | None = None) -> float:
        p = self.params
        stats = stats or _ViewStats(view)
        d = stats.gap[position - 1]
        block = view.block_of(position)
        others = stats.block_len[block] - 1
        masked_others = stats.block_masked.get(block, 0) - (1 if view.is_masked(position) else 0)
        m_frac = masked_others / others if others > 0 else 0.0
        s_frac = stats.stale_frac(block, p.stale_scale)
        q = p.a_max - p.c_dist * min(d, p.D) / p.D - p.c_mask * m_frac - p.c_stale * s_frac
        return min(max(q, p.a_min), p.a_max)

    def decoys_for(self, position: int, truth: int) -> tuple[int, ...]:
        key = (position, truth)
        hit = self._decoy_cache.get(key)
        if hit is None:
            rng = random.Random(_hash_u64(self.params.seed, position, truth, 0x0DEC0))
            pool = [t for t in self._candidates if t != truth]
            hit = tuple(rng.sample(pool, self.params.decoys))
            self._decoy_cache[key] = hit
        return hit

    def predict(self, view: ContextView, positions: Sequence[int]) -> list[Prediction]:
        view.check_request(positions)
        target = view.target
        if target is None or len(target) != len(view.tokens):
            raise DenoiserError("oracle needs a target of the output length")
        stats = _ViewStats(view)
        d = self.params.decoys
        prefix = struct.pack("<2q", self.params.seed, view.seed) + stats.revealed_fp
        out = []
        for pos in positions:
            q = self.quality(view, pos, stats)
            truth = target[pos - 1]
            decoys = self.decoys_for(pos, truth)
            h = hashlib.blake2b(prefix + struct.pack("<q", pos), digest_size=16).digest()
            u = int.from_bytes(h[:8], "little") / 2.0**64
            if u < q:
                mode, rest = truth, decoys
            else:
                pick = int.from_bytes(h[8:], "little") % d
                mode = decoys[pick]
                rest = (truth,) + decoys[:pick] + decoys[pick + 1:]
            if q >= 1.0:
                out.append(Prediction(pos, mode, 1.0, 0.0, ((mode, 1.0),)))
                continue
            r = (1.0 - q) / d
            support = ((mode, q),) + tuple((t, r) for t in rest)
            out.append(Prediction(pos, mode, q, oracle_entropy(q, d), support))
        return out


def oracle_entropy(q: float, decoys: int) -> float:
    if q >= 1.0:
        return 0.0
    return -q * math.log(q) - (1.0 - q) * math.log((1.0 - q) / decoys)


# -- order policy distilled from pseudo-trajectory records -------------------

@dataclass(frozen=True)
class OrderPolicy:
    multipliers: tuple[float, ...]
    k_max: int
    g_min: float = 0.5
    g_max: float = 1.5

    def __post_init__(self):
        if len(self.multipliers) != self.k_max:
            raise DenoiserError("one multiplier per window offset is required")
        for m in self.multipliers:
            if not self.g_min - 1e-12 <= m <= self.g_max + 1e-12:
                raise DenoiserError(f"multiplier {m} outside [{self.g_min}, {self.g_max}]")

    @classmethod
    def identity(cls, k_max: int) -> "OrderPolicy":
        return cls(tuple([1.0] * k_max), k_max)

    def to_json(self) -> dict:
        return {"k_max": self.k_max, "multipliers": list(self.multipliers),
                "g_min": self.g_min, "g_max": self.g_max}

    @classmethod
    def from_json(cls, obj: dict) -> "OrderPolicy":
        return cls(tuple(float(m) for m in obj["multipliers"]), int(obj["k_max"]),
                   float(obj.get("g_min", 0.5)), float(obj.get("g_max", 1.5)))


def fit_order_policy(records: Iterable[DistillationRecord], mask_id: int,
                     g_min: float = 0.5, g_max: float = 1.5) -> OrderPolicy:
    """Estimate per-offset earliness: how often the teacher had already revealed it."""
    contained: Counter = Counter()
    revealed: Counter = Counter()
    for rec in records:
        for o in range(1, rec.k + 1):
            contained[o] += 1
        for o in rec.revealed_offsets(mask_id):
            revealed[o] += 1
    if not contained:
        raise DenoiserError("cannot fit a policy on an empty record stream")
    k_max = max(contained)
    mult = []
    for o in range(1, k_max + 1):
        early = revealed[o] / contained[o] if contained[o] else 0.5
        mult.append(min(max(2.0 * early, g_min), g_max))
    return OrderPolicy(tuple(mult), k_max, g_min, g_max)


class PolicyDenoiser:
    """Base denoiser plus a per-offset multiplier on the decode threshold."""

    def __init__(self, base: Denoiser, policy: OrderPolicy):
        self.base = base
        self.policy = policy
        self.warnings: list[str] = []

    def predict(self, view: ContextView, positions: Sequence[int]) -> list[Prediction]:
        return self.base.predict(view, positions)

    def threshold_multiplier(self, offset: int) -> float:
        if 1 <= offset <= self.policy.k_max:
            return self.policy.multipliers[offset - 1]
        msg = f"offset {offset} beyond policy k_max={self.policy.k_max}; using 1.0"
        if msg not in self.warnings:
            self.warnings.append(msg)
            warnings.warn(msg, stacklevel=2)
        return 1.0

    def effective_threshold(self, position: int, tau: float, block_size: int) -> float:
        return tau * self.threshold_multiplier((position - 1) % block_size + 1)


def policy_wrap(base: Denoiser, policy: OrderPolicy) -> PolicyDenoiser:
    return PolicyDenoiser(base, policy)
