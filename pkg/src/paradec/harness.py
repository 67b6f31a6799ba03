"""Experiment pipelines: synthetic tasks, evaluation, threshold sweeps, ablations."""
from __future__ import annotations

import hashlib
import json
import os
import platform
import tempfile
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .aup import AupConfig, AupResult, CurvePoint, compute_aup, format_curve
from .denoisers import (
    NGramDenoiser,
    OracleDenoiser,
    OracleParams,
    ScriptedDenoiser,
    fit_order_policy,
    policy_wrap,
    OrderPolicy,
)
from .engine import DecodeMetrics, EngineConfig, EngineError, decode
from .sequence import (
    Schedule,
    Trajectory,
    Vocab,
    dumps_jsonl,
    emit_records,
    record_teacher_trajectory,
    trajectory_to_json,
)


class HarnessError(ValueError):
    pass


class TaskError(HarnessError):
    """A task file violates the task invariants (a data error, not a config error)."""


class PipelineError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"stage {stage!r}: {message}")
        self.stage = stage


@dataclass(frozen=True)
class Task:
    prompt: tuple[int, ...]
    reference: tuple[int, ...]  # ends with the single EOS

    def check(self, vocab: Vocab, max_len: int | None = None) -> None:
        if not self.reference or self.reference[-1] != vocab.eos_id:
            raise TaskError("task reference must end with eos_id")
        if self.reference.count(vocab.eos_id) != 1:
            raise TaskError("task reference must contain exactly one eos_id")
        if max_len is not None and len(self.reference) > max_len:
            raise TaskError(f"reference of length {len(self.reference)} exceeds max_len {max_len}")

    def to_json(self) -> dict:
        return {"prompt": list(self.prompt), "reference": list(self.reference)}


def tasks_to_json(tasks: Sequence[Task], vocab: Vocab) -> dict:
    return {"vocab": vocab.to_json(), "tasks": [t.to_json() for t in tasks]}


def tasks_from_json(obj: dict) -> tuple[list[Task], Vocab]:
    """Read tasks from a tasks file or a corpus file (both carry ``vocab`` and ``tasks``)."""
    if "tasks" not in obj:
        raise TaskError("file has no 'tasks' list")
    vocab = Vocab.from_json(obj["vocab"])
    tasks = [Task(tuple(t["prompt"]), tuple(t["reference"])) for t in obj["tasks"]]
    for i, t in enumerate(tasks):
        try:
            t.check(vocab)
        except TaskError as exc:
            raise TaskError(f"task {i}: {exc}") from None
    return tasks, vocab


# -- synthetic corpus ----------------------------------------------------------

class MarkovSource:
    """Order-``structure`` Markov chain over content tokens with peaked rows.

    Transition rows are drawn lazily from a Dirichlet seeded by (seed, context),
    so the chain is fully determined by its seed.
    """

    def __init__(self, seed: int, vocab: Vocab, structure: int, concentration: float = 0.1):
        self.seed = seed
        self.vocab = vocab
        self.structure = structure
        self.concentration = concentration
        self.content = np.array(vocab.content_tokens())
        self._rows: dict[tuple[int, ...], np.ndarray] = {}

    def row(self, context: tuple[int, ...]) -> np.ndarray:
        hit = self._rows.get(context)
        if hit is None:
            rng = np.random.default_rng([self.seed, 0x5EED, *context])
            hit = rng.dirichlet(np.full(len(self.content), self.concentration))
            self._rows[context] = hit
        return hit

    def sample(self, length: int, rng: np.random.Generator) -> list[int]:
        out = [int(t) for t in rng.choice(self.content, size=min(self.structure, length))]
        while len(out) < length:
            ctx = tuple(out[-self.structure:])
            out.append(int(rng.choice(self.content, p=self.row(ctx))))
        return out


def gen_corpus(seed: int, vocab_size: int, sequences: int, length: int, structure: int = 1,
               prompt_len: int | None = None) -> tuple[list[tuple[int, ...]], list[Task], Vocab]:
    """Sample ``sequences`` Markov sequences and one prompt/continuation task per sequence.

    Content lengths vary in ``[length // 2, length]``; each corpus sequence is
    the content followed by EOS padding to ``length + 1`` tokens.
    """
    if vocab_size < 8:
        raise HarnessError("vocab_size must be >= 8")
    if structure < 1:
        raise HarnessError("structure must be >= 1")
    if sequences < 1 or length < 2:
        raise HarnessError("need sequences >= 1 and length >= 2")
    prompt_len = max(1, length // 4) if prompt_len is None else prompt_len
    if not 0 <= prompt_len < length // 2:
        raise HarnessError(f"prompt_len must lie in [0, {length // 2})")
    vocab = Vocab.standard(vocab_size)
    source = MarkovSource(seed, vocab, structure)
    rng = np.random.default_rng(seed)
    corpus, tasks = [], []
    for _ in range(sequences):
        n = int(rng.integers(length // 2, length + 1))
        content = source.sample(n, rng)
        corpus.append(tuple(content + [vocab.eos_id] * (length + 1 - n)))
        tasks.append(Task(tuple(content[:prompt_len]), tuple(content[prompt_len:]) + (vocab.eos_id,)))
    return corpus, tasks, vocab


def corpus_to_json(corpus: Sequence[Sequence[int]], vocab: Vocab,
                   tasks: Sequence[Task] = ()) -> dict:
    return {"vocab": vocab.to_json(), "sequences": [list(s) for s in corpus],
            "tasks": [t.to_json() for t in tasks]}


def corpus_from_json(obj: dict) -> tuple[list[tuple[int, ...]], Vocab]:
    return [tuple(s) for s in obj["sequences"]], Vocab.from_json(obj["vocab"])


# -- model specs ---------------------------------------------------------------

def load_model(spec: str, vocab: Vocab):
    """Build a denoiser from ``kind:argument``; see the CLI help for the kinds."""
    kind, _, arg = spec.partition(":")
    if not arg:
        raise HarnessError(f"model spec {spec!r} must look like kind:argument")
    if kind == "policy":
        base_spec, sep, policy_path = arg.rpartition("+")
        if not sep:
            raise HarnessError("policy spec must look like policy:<base spec>+<policy.json>")
        policy = OrderPolicy.from_json(_read_json(policy_path))
        return policy_wrap(load_model(base_spec, vocab), policy)
    if kind == "oracle":
        return OracleDenoiser(OracleParams.from_json(_read_json(arg)), vocab)
    if kind == "ngram":
        return NGramDenoiser.from_json(_read_json(arg))
    if kind == "scripted":
        return ScriptedDenoiser.from_json(_read_json(arg), vocab)
    raise HarnessError(f"unknown model kind {kind!r}")


def _read_json(path: str | os.PathLike):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


# -- evaluation ----------------------------------------------------------------

def task_seed(base_seed: int, task: Task) -> int:
    """Per-task session seed; depends on task content so task order is irrelevant."""
    blob = json.dumps([base_seed, list(task.prompt), list(task.reference)]).encode()
    return int.from_bytes(hashlib.blake2b(blob, digest_size=8).digest(), "little") >> 1


def pre_eos(tokens: Sequence[int], eos_id: int) -> tuple[int, ...]:
    tokens = tuple(tokens)
    return tokens[: tokens.index(eos_id)] if eos_id in tokens else tokens


@dataclass
class EvalResult:
    accuracy: float
    mean_tpf: float
    metrics: list[DecodeMetrics]
    outputs: list[tuple[int, ...]]
    correct: list[bool]

    @property
    def forwards(self) -> int:
        return sum(m.forwards for m in self.metrics)


def evaluate(denoiser, tasks: Sequence[Task], config: EngineConfig, vocab: Vocab) -> EvalResult:
    """Exact-match accuracy (percent) and micro-averaged tokens per forward."""
    if not tasks:
        raise HarnessError("no tasks to evaluate")
    metrics, outputs, correct = [], [], []
    for i, task in enumerate(tasks):
        task.check(vocab, config.max_len)
        cfg = replace(config, seed=task_seed(config.seed, task))
        try:
            out, m, _ = decode(task.prompt, denoiser, cfg, vocab.mask_id, vocab.eos_id,
                               target=task.reference)
        except EngineError as exc:
            raise EngineError(f"task {i}: {exc}") from exc
        metrics.append(m)
        outputs.append(out)
        correct.append(pre_eos(out, vocab.eos_id) == task.reference[:-1])
    tokens = sum(m.tokens_generated for m in metrics)
    forwards = sum(m.forwards for m in metrics)
    return EvalResult(
        accuracy=100.0 * sum(correct) / len(tasks),
        mean_tpf=tokens / forwards,
        metrics=metrics, outputs=outputs, correct=correct,
    )


@dataclass
class SweepReport:
    rows: list[dict]
    curve: list[CurvePoint]
    aup: AupResult

    def to_json(self) -> dict:
        return {
            "tpf_aggregation": "micro (total tokens / total forwards)",
            "rows": self.rows,
            "curve": [[p.rho, p.acc] for p in self.curve],
            "aup": self.aup.to_json(),
        }


def sweep(denoiser, tasks: Sequence[Task], taus: Sequence[float], config: EngineConfig,
          vocab: Vocab, aup_config: AupConfig | None = None) -> SweepReport:
    if not taus:
        raise HarnessError("taus must be non-empty")
    if list(taus) != sorted(taus):
        raise HarnessError("taus must be ascending")
    rows, curve = [], []
    for tau in taus:
        res = evaluate(denoiser, tasks, replace(config, tau=tau), vocab)
        rows.append({
            "tau": tau,
            "mean_tpf": res.mean_tpf,
            "accuracy": res.accuracy,
            "forwards": res.forwards,
            "tokens": sum(m.tokens_generated for m in res.metrics),
        })
        curve.append(CurvePoint(res.mean_tpf, res.accuracy))
    return SweepReport(rows, curve, compute_aup(curve, aup_config))


def tpf_at_accuracy(curve: Sequence[CurvePoint], floor: float) -> float | None:
    """Fastest TPF on the piecewise-linear curve whose accuracy stays at or above ``floor``.

    ``curve`` is in sweep order. Segments crossing the floor are interpolated,
    which favours the curve being measured. Returns None if no point qualifies.
    """
    best = None
    for p in curve:
        if p.acc >= floor:
            best = p.rho if best is None else max(best, p.rho)
    for a, b in zip(curve, curve[1:]):
        if (a.acc - floor) * (b.acc - floor) < 0:
            x = a.rho + (b.rho - a.rho) * (a.acc - floor) / (a.acc - b.acc)
            best = x if best is None else max(best, x)
    return best


def ablate(denoiser, tasks: Sequence[Task], config: EngineConfig, vocab: Vocab) -> dict:
    """Mode x early-stop x refresh grid at the configured threshold."""
    refresh_on = config.refresh_interval or EngineConfig().refresh_interval
    cells = []
    for mode in ("vanilla", "single_block", "multi_block"):
        for early in (True, False):
            for refresh in (True, False):
                cfg = replace(config, mode=mode, early_stop=early,
                              refresh_interval=refresh_on if refresh else None)
                res = evaluate(denoiser, tasks, cfg, vocab)
                cells.append({
                    "mode": mode, "early_stop": early, "refresh": refresh,
                    "tpf": res.mean_tpf, "accuracy": res.accuracy, "forwards": res.forwards,
                })
    base = {(c["early_stop"], c["refresh"]): c for c in cells if c["mode"] == "single_block"}
    for c in cells:
        ref = base[(c["early_stop"], c["refresh"])]
        c["tpf_delta_vs_single_block"] = c["tpf"] / ref["tpf"] - 1.0
        c["accuracy_delta_vs_single_block"] = c["accuracy"] - ref["accuracy"]
    return {"tau": config.tau, "block_size": config.block_size, "cells": cells}


# -- presentation --------------------------------------------------------------

def curve_svg(points: Sequence[CurvePoint], width: int = 480, height: int = 320,
              title: str = "accuracy vs parallelism") -> str:
    pad = 40
    xs = [p.rho for p in points]
    x_max = max(xs) * 1.05 if xs else 1.0
    sx = lambda x: pad + (width - 2 * pad) * x / x_max  # noqa: E731
    sy = lambda y: height - pad - (height - 2 * pad) * y / 100.0  # noqa: E731
    pts = " ".join(f"{sx(p.rho):.2f},{sy(p.acc):.2f}" for p in sorted(points))
    dots = "".join(
        f'<circle cx="{sx(p.rho):.2f}" cy="{sy(p.acc):.2f}" r="3"/>' for p in points)
    return (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">'
        f'<text x="{width / 2}" y="20" text-anchor="middle" font-size="12">{title}</text>'
        f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>'
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>'
        f'<text x="{width / 2}" y="{height - 8}" text-anchor="middle" font-size="11">TPF</text>'
        f'<text x="12" y="{height / 2}" font-size="11">acc</text>'
        f'<polyline fill="none" stroke="steelblue" points="{pts}"/>'
        f'<g fill="steelblue">{dots}</g></svg>\n'
    )


def write_atomic(path: str | os.PathLike, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


# -- end-to-end pipeline ---------------------------------------------------------

def shuffled_trajectories(trajs: Sequence[Trajectory], seed: int) -> list[Trajectory]:
    """Same outputs, uniformly random unmask orders (the random-masking control)."""
    rng = np.random.default_rng(seed)
    return [Trajectory(tuple(int(p) for p in rng.permutation(t.order)), t.truth) for t in trajs]


def run_pipeline(config_path: str | os.PathLike) -> dict:
    """Run corpus -> model -> trajectories -> records -> policy -> sweeps -> AUP.

    Returns the report; every artifact plus ``manifest.json`` lands in the
    configured output directory.
    """
    stage = "config"
    try:
        cfg = _read_json(config_path)
        base = Path(config_path).resolve().parent
        out_dir = (base / cfg.get("output_dir", "pipeline_out")).resolve()
        seed = int(cfg.get("seed", 0))
        engine = EngineConfig.from_json(cfg.get("engine", {}))
        aup_cfg = AupConfig(**cfg.get("aup", {}))
        taus = [float(t) for t in cfg["sweep"]["taus"]]
        written: dict[str, str] = {}

        def emit(name: str, text: str) -> None:
            write_atomic(out_dir / name, text)
            written[name] = hashlib.sha256(text.encode()).hexdigest()

        stage = "corpus"
        ccfg = cfg["corpus"]
        if "file" in ccfg:
            path = base / ccfg["file"]
            if not path.exists():
                raise FileNotFoundError(f"corpus file not found: {path}")
            corpus, vocab = corpus_from_json(_read_json(path))
            tasks, _ = tasks_from_json(_read_json(base / ccfg.get("tasks", ccfg["file"])))
        else:
            g = ccfg["generate"]
            corpus, tasks, vocab = gen_corpus(
                seed, int(g.get("vocab_size", 32)), int(g["sequences"]), int(g["length"]),
                int(g.get("structure", 1)), g.get("prompt_len"))
        emit("corpus.json", json.dumps(corpus_to_json(corpus, vocab, tasks)) + "\n")
        emit("tasks.json", json.dumps(tasks_to_json(tasks, vocab)) + "\n")
        n_train = int(cfg.get("train_tasks", len(tasks) // 2))
        train, heldout = tasks[:n_train], tasks[n_train:]
        if not train or not heldout:
            raise HarnessError("need both training and held-out tasks")

        stage = "model"
        mcfg = cfg["model"]
        if mcfg["kind"] == "ngram":
            model = NGramDenoiser.train(corpus, int(mcfg.get("order", 2)),
                                        float(mcfg.get("smoothing", 0.01)), vocab)
            emit("model.json", json.dumps(model.to_json()) + "\n")
        elif mcfg["kind"] == "oracle":
            params = OracleParams.from_json(mcfg.get("params", {}))
            model = OracleDenoiser(params, vocab)
            emit("oracle_params.json", dump_json(params.to_json()))
        else:
            raise HarnessError(f"unknown model kind {mcfg['kind']!r}")

        stage = "trajectory"
        n = engine.max_len
        pairs, trajs = [], []
        for i, task in enumerate(train):
            truth = task.reference + (vocab.eos_id,) * (n - len(task.reference))
            traj = record_teacher_trajectory(model, task.prompt, n, vocab, seed=task_seed(seed, task),
                                             block_size=engine.block_size, target=truth)
            pairs.append((task.prompt, truth))
            trajs.append(traj)
        emit("trajectories.jsonl", dumps_jsonl(trajectory_to_json(p, t) for (p, _), t in zip(pairs, trajs)))

        stage = "distill"
        dcfg = cfg.get("distill", {})
        schedule = Schedule(float(dcfg.get("t_start", 0.0)), float(dcfg.get("t_end", 0.8)),
                            int(dcfg.get("k_start", max(1, engine.block_size // 2))),
                            int(dcfg.get("k_end", engine.block_size)))
        count = int(dcfg.get("records_per_pair", 20))
        records = list(emit_records(pairs, trajs, schedule, count, vocab, seed=seed + 1))
        control = list(emit_records(pairs, shuffled_trajectories(trajs, seed + 2), schedule,
                                    count, vocab, seed=seed + 1))
        emit("records.jsonl", dumps_jsonl(r.to_json(vocab.mask_id) for r in records))

        stage = "policy"
        policy = fit_order_policy(records, vocab.mask_id)
        control_policy = fit_order_policy(control, vocab.mask_id)
        emit("policy.json", dump_json(policy.to_json()))
        emit("policy_shuffled.json", dump_json(control_policy.to_json()))

        stage = "sweep"
        reports = {
            "base": sweep(model, heldout, taus, engine, vocab, aup_cfg),
            "policy": sweep(policy_wrap(model, policy), heldout, taus, engine, vocab, aup_cfg),
            "policy_shuffled": sweep(policy_wrap(model, control_policy), heldout, taus,
                                     engine, vocab, aup_cfg),
        }
        for name, rep in reports.items():
            emit(f"curve_{name}.csv", format_curve(rep.curve))
            emit(f"sweep_{name}.json", dump_json(rep.to_json()))
            if cfg.get("svg", False):
                emit(f"curve_{name}.svg", curve_svg(rep.curve, title=name))

        stage = "report"
        report = {
            "aup": {name: rep.aup.score for name, rep in reports.items()},
            "train_tasks": len(train),
            "heldout_tasks": len(heldout),
        }
        emit("report.json", dump_json(report))
        manifest = {
            "package": "paradec",
            "version": __version__,
            "numpy": np.__version__,
            "python": platform.python_version(),
            "seeds": {"pipeline": seed, "records": seed + 1, "shuffle_control": seed + 2,
                      "engine": engine.seed, "task_sessions": "blake2b(engine.seed, task)"},
            "config": cfg,
            "artifacts": dict(sorted(written.items())),
        }
        write_atomic(out_dir / "manifest.json", dump_json(manifest))
        return report
    except PipelineError:
        raise
    except (OSError, ValueError, KeyError, EngineError) as exc:
        raise PipelineError(stage, str(exc)) from exc
