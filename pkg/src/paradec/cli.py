"""Command-line entry point (``paradec``).

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 internal invariant violation.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace

from .aup import AupConfig, AupError, InvalidParameterError, alpha_sweep, compute_aup, format_curve, parse_curve
from .denoisers import ContractViolation, DenoiserError, fit_order_policy, NGramDenoiser
from .engine import ConfigError, EngineConfig, EngineError
from .harness import (
    HarnessError,
    PipelineError,
    TaskError,
    ablate,
    corpus_from_json,
    corpus_to_json,
    curve_svg,
    dump_json,
    evaluate,
    gen_corpus,
    load_model,
    run_pipeline,
    sweep,
    task_seed,
    tasks_from_json,
    write_atomic,
)
from .sequence import (
    DistillationRecord,
    Schedule,
    SequenceError,
    Vocab,
    dumps_jsonl,
    emit_records,
    loads_jsonl,
    record_teacher_trajectory,
    trajectory_from_json,
    trajectory_to_json,
)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _read_text(path: str) -> str:
    with open(path, encoding="utf-8") as fh:
        return fh.read()


def _read_json(path: str):
    return json.loads(_read_text(path))


def _engine_config(path: str | None) -> EngineConfig:
    return EngineConfig.from_json(_read_json(path)) if path else EngineConfig()


def parse_taus(spec: str) -> list[float]:
    """``A:B:STEP`` inclusive of B, or a comma-separated list."""
    if ":" not in spec:
        return [float(x) for x in spec.split(",")]
    try:
        a, b, step = (float(x) for x in spec.split(":"))
    except ValueError:
        raise UsageError(f"bad --taus {spec!r}; expected A:B:STEP") from None
    if step <= 0 or b < a:
        raise UsageError("--taus needs STEP > 0 and B >= A")
    count = int(round((b - a) / step)) + 1
    return [round(a + i * step, 10) for i in range(count) if a + i * step <= b + 1e-9]


# -- subcommands ---------------------------------------------------------------

def cmd_aup(args) -> None:
    points = parse_curve(_read_text(args.curve))
    cfg = AupConfig(alpha=args.alpha, y_max_override=args.ymax, margin=args.margin)
    out = compute_aup(points, cfg).to_json()
    if args.alphas:
        out["alpha_sweep"] = alpha_sweep(points, [float(a) for a in args.alphas.split(",")], cfg)
    print(json.dumps(out, indent=2))


def cmd_corpus(args) -> None:
    corpus, tasks, vocab = gen_corpus(args.seed, args.vocab, args.sequences, args.len,
                                      args.structure, args.prompt_len)
    write_atomic(args.out, json.dumps(corpus_to_json(corpus, vocab, tasks)) + "\n")


def cmd_ngram(args) -> None:
    corpus, vocab = corpus_from_json(_read_json(args.corpus))
    model = NGramDenoiser.train(corpus, args.order, args.smoothing, vocab)
    write_atomic(args.out, json.dumps(model.to_json()) + "\n")


def cmd_traj(args) -> None:
    tasks, vocab = tasks_from_json(_read_json(args.tasks))
    model = load_model(args.model, vocab)
    lines = []
    for task in tasks:
        task.check(vocab, args.len)
        target = task.reference + (vocab.eos_id,) * (args.len - len(task.reference))
        traj = record_teacher_trajectory(model, task.prompt, args.len, vocab,
                                         seed=task_seed(args.seed, task),
                                         block_size=args.block_size, target=target)
        lines.append(trajectory_to_json(task.prompt, traj))
    write_atomic(args.out, dumps_jsonl(lines))


def cmd_distill(args) -> None:
    items = [trajectory_from_json(o) for o in loads_jsonl(_read_text(args.traj))]
    if not items:
        raise SequenceError("trajectory file is empty")
    # Records store masks as -1, so any id absent from the data works as the in-memory mask.
    top = max(max(p + t.truth, default=0) for p, t in items)
    vocab = Vocab.standard(max(top + 3, 4))
    schedule = Schedule(args.t_start, args.t_end, args.k_start, args.k_end)
    records = emit_records([(p, t.truth) for p, t in items], [t for _, t in items],
                           schedule, args.records, vocab, seed=args.seed)
    write_atomic(args.out, dumps_jsonl(r.to_json(vocab.mask_id) for r in records))


def cmd_policy(args) -> None:
    records = [DistillationRecord.from_json(o, -1) for o in loads_jsonl(_read_text(args.records))]
    policy = fit_order_policy(records, -1, args.g_min, args.g_max)
    write_atomic(args.out, dump_json(policy.to_json()))


def cmd_decode(args) -> None:
    tasks, vocab = tasks_from_json(_read_json(args.tasks))
    model = load_model(args.model, vocab)
    cfg = _engine_config(args.config)
    overrides = {"mode": args.mode.replace("-", "_")}
    if args.tau is not None:
        overrides["tau"] = args.tau
    if args.seed is not None:
        overrides["seed"] = args.seed
    cfg = replace(cfg, **overrides)
    res = evaluate(model, tasks, cfg, vocab)
    report = {
        "config": cfg.to_json(),
        "accuracy": res.accuracy,
        "mean_tpf": res.mean_tpf,
        "tpf_aggregation": "micro (total tokens / total forwards)",
        "tasks": [
            {"output": list(out), "correct": ok, "metrics": m.to_json()}
            for out, ok, m in zip(res.outputs, res.correct, res.metrics)
        ],
    }
    write_atomic(args.out, dump_json(report))


def cmd_sweep(args) -> None:
    tasks, vocab = tasks_from_json(_read_json(args.tasks))
    model = load_model(args.model, vocab)
    rep = sweep(model, tasks, parse_taus(args.taus), _engine_config(args.config), vocab,
                AupConfig(alpha=args.alpha))
    write_atomic(args.out_curve, format_curve(rep.curve))
    if args.out_svg:
        write_atomic(args.out_svg, curve_svg(rep.curve))
    if args.out_report:
        write_atomic(args.out_report, dump_json(rep.to_json()))
    print(json.dumps({"aup": rep.aup.score, "points": len(rep.curve)}))


def cmd_ablate(args) -> None:
    tasks, vocab = tasks_from_json(_read_json(args.tasks))
    model = load_model(args.model, vocab)
    write_atomic(args.out, dump_json(ablate(model, tasks, _engine_config(args.config), vocab)))


def cmd_pipeline(args) -> None:
    print(json.dumps(run_pipeline(args.config), indent=2))


# -- parser ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="paradec", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="group", required=True, parser_class=_Parser)

    def group(name, help_):
        g = sub.add_parser(name, help=help_)
        return g.add_subparsers(dest="action", required=True, parser_class=_Parser)

    a = group("aup", "accuracy-under-parallelism metric").add_parser("compute")
    a.add_argument("--curve", required=True, help="CSV with header rho,acc")
    a.add_argument("--alpha", type=float, default=3.0)
    a.add_argument("--ymax", type=float, default=None)
    a.add_argument("--margin", type=float, default=5.0)
    a.add_argument("--alphas", default=None, help="comma-separated alphas for a sensitivity sweep")
    a.set_defaults(func=cmd_aup)

    c = group("corpus", "synthetic corpus and tasks").add_parser("gen")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--vocab", type=int, required=True)
    c.add_argument("--sequences", type=int, required=True)
    c.add_argument("--len", type=int, required=True)
    c.add_argument("--structure", type=int, default=1, help="Markov order of the source")
    c.add_argument("--prompt-len", type=int, default=None)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_corpus)

    n = group("ngram", "bidirectional n-gram denoiser").add_parser("train")
    n.add_argument("--corpus", required=True)
    n.add_argument("--order", type=int, default=2)
    n.add_argument("--smoothing", type=float, default=0.01)
    n.add_argument("--out", required=True)
    n.set_defaults(func=cmd_ngram)

    t = group("traj", "teacher trajectories").add_parser("record")
    t.add_argument("--model", required=True)
    t.add_argument("--tasks", required=True)
    t.add_argument("--len", type=int, required=True)
    t.add_argument("--block-size", type=int, default=32)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_traj)

    d = group("distill", "distillation records").add_parser("build")
    d.add_argument("--traj", required=True)
    d.add_argument("--records", type=int, required=True, help="records per trajectory")
    d.add_argument("--t-start", type=float, default=0.0)
    d.add_argument("--t-end", type=float, default=0.8)
    d.add_argument("--k-start", type=int, default=16)
    d.add_argument("--k-end", type=int, default=32)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_distill)

    pf = group("policy", "order policy").add_parser("fit")
    pf.add_argument("--records", required=True)
    pf.add_argument("--g-min", type=float, default=0.5)
    pf.add_argument("--g-max", type=float, default=1.5)
    pf.add_argument("--out", required=True)
    pf.set_defaults(func=cmd_policy)

    r = group("decode", "decode tasks").add_parser("run")
    r.add_argument("--model", required=True)
    r.add_argument("--tasks", required=True)
    r.add_argument("--mode", choices=["vanilla", "single-block", "multi-block"], default="multi-block")
    r.add_argument("--tau", type=float, default=None)
    r.add_argument("--config", default=None, help="engine config JSON")
    r.add_argument("--seed", type=int, default=None)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_decode)

    s = sub.add_parser("sweep", help="threshold sweep and AUP")
    s.add_argument("--model", required=True)
    s.add_argument("--tasks", required=True)
    s.add_argument("--taus", required=True, help="A:B:STEP (inclusive) or a comma list")
    s.add_argument("--config", default=None)
    s.add_argument("--alpha", type=float, default=3.0)
    s.add_argument("--out-curve", required=True)
    s.add_argument("--out-svg", default=None)
    s.add_argument("--out-report", default=None)
    s.set_defaults(func=cmd_sweep)

    ab = sub.add_parser("ablate", help="mode x early-stop x refresh grid")
    ab.add_argument("--model", required=True)
    ab.add_argument("--tasks", required=True)
    ab.add_argument("--config", default=None)
    ab.add_argument("--out", required=True)
    ab.set_defaults(func=cmd_ablate)

    pl = group("pipeline", "end-to-end experiment").add_parser("run")
    pl.add_argument("--config", required=True)
    pl.set_defaults(func=cmd_pipeline)
    return p


def exit_code_for(exc: BaseException) -> int:
    # Walk to the root cause: a denoiser data problem wrapped by the engine is still data.
    root = exc
    while root.__cause__ is not None:
        root = root.__cause__
    if isinstance(root, (UsageError, ConfigError, InvalidParameterError)):
        return EXIT_USAGE
    if isinstance(root, ContractViolation):
        return EXIT_INTERNAL
    if isinstance(root, (OSError, json.JSONDecodeError, KeyError, TypeError, AupError,
                         SequenceError, DenoiserError, TaskError)):
        return EXIT_DATA
    if isinstance(root, HarnessError):
        return EXIT_USAGE
    if isinstance(root, EngineError):
        return EXIT_INTERNAL
    if isinstance(root, ValueError):
        return EXIT_DATA
    return EXIT_INTERNAL


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:  # argparse exits on --help and on usage errors
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    try:
        args.func(args)
    except (Exception,) as exc:  # noqa: BLE001 - every failure maps to an exit code
        code = exit_code_for(exc)
        print(f"paradec: error: {exc}", file=sys.stderr)
        return code
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
