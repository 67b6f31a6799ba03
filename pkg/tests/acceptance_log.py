"""Collects one verdict per acceptance criterion for the terminal summary."""

TITLES = {
    1: "AUP reproduces vanilla rows and the alpha-sensitivity row",
    2: "AUP three-point example matches the brute-force reference",
    3: "AUP property suite",
    4: "noisy sequence equals the per-position reference",
    5: "block state machine soundness",
    6: "vanilla degeneracy (TPF exactly 1.00)",
    7: "scripted hand trace",
    8: "trade-off emergence",
    9: "ablation directionality",
    10: "distillation directionality",
    11: "curriculum schedules",
}

RESULTS: dict[int, tuple[bool, str]] = {}


def record(criterion: int, ok: bool, detail: str = "") -> None:
    # A criterion may be checked in several tests; any failure sticks.
    prev_ok, prev_detail = RESULTS.get(criterion, (True, ""))
    joined = "; ".join(d for d in (prev_detail, detail) if d)
    RESULTS[criterion] = (prev_ok and ok, joined)
    assert ok, f"criterion {criterion} failed: {detail}"


def summary_lines() -> list[str]:
    lines = []
    for n, title in TITLES.items():
        if n not in RESULTS:
            lines.append(f"[NOT RUN] {n:>2}. {title}")
            continue
        ok, detail = RESULTS[n]
        lines.append(f"[{'PASS' if ok else 'FAIL'}] {n:>2}. {title}" + (f" | {detail}" if detail else ""))
    return lines
