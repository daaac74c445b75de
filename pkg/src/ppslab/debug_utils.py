# src/ppslab/debug_utils.py - Acceptance analysis over stage reports

from typing import Any, Optional

from ppslab.reports import StageReport
from ppslab.utils import rate

LADDER = ["random-node", "random-candidate", "nearest-candidate", "jacobian-adjusted"]
GRASP_LADDER = ["accidental", "cosine", "wrist", "fine-tuned"]


def analyze_acceptance(reports: dict[str, StageReport]) -> dict[str, Any]:
    """
    Evaluate the ordering and soundness invariants over a run's stage reports.

    Args:
        reports: Stage name to report, as loaded from the run's checkpoints

    Returns:
        Dictionary with per-check results, overall score and grade
    """
    checks: list[dict[str, Any]] = []

    def check(name: str, passed: Optional[bool], detail: str) -> None:
        checks.append({"name": name, "passed": passed, "detail": detail})

    # ===== REACHING =====
    if "reach_ladder" in reports:
        summary = {s["policy"]: s for s in reports["reach_ladder"].tables.get("summary", [])}
        present = [p for p in LADDER if p in summary]
        rates = [rate(summary[p]["bumps_final"], summary[p]["trials"]) for p in present]
        if len(present) == len(LADDER):
            check("reach_ladder_increasing", all(a < b for a, b in zip(rates, rates[1:])),
                  " -> ".join(f"{r:.3f}" for r in rates))
            check("jacobian_at_least_90", rates[-1] >= 0.9, f"{rates[-1]:.3f}")
        fp = reports["reach_ladder"].aggregates.get("false_positives", 0)
        check("no_false_positive_bumps", fp == 0, f"{fp} observed bumps without contact")

    if "explore" in reports:
        table = {
            (r["mask_hit"], r["depth_hit"]): r["probability"]
            for r in reports["explore"].tables.get("bump_table", [])
            if r["mask_kind"] == "p_f" and r["trials"] > 0
        }
        both, depth_only, neither = table.get((True, True)), table.get((False, True)), table.get((False, False))
        if None not in (both, depth_only, neither):
            check("candidate_criterion_dominance", both - depth_only > 0.1 and depth_only - neither > 0.1,
                  f"{both:.2f} / {depth_only:.2f} / {neither:.2f}")
        else:
            check("candidate_criterion_dominance", None, "a palm group has no samples")
        kind = reports["explore"].aggregates.get("comparator", {}).get("kind")
        check("feature_is_centre_distance", kind == "f_c", f"selected {kind}")

    # ===== APERTURE =====
    if "aperture_study" in reports:
        rows = sorted(reports["aperture_study"].rows, key=lambda r: r["aperture"])
        palmar = [r["palmar_rate"] for r in rows]
        bumps = [r["bump_rate"] for r in rows]
        if rows:
            check("palmar_nondecreasing", all(a <= b for a, b in zip(palmar, palmar[1:])),
                  " -> ".join(f"{p:.3f}" for p in palmar))
            check("palmar_zero_when_closed", rows[0]["aperture"] != 0.0 or palmar[0] == 0.0, f"{palmar[0]:.3f}")
            check("bump_rate_flat", max(bumps) - min(bumps) < 0.1, f"spread {max(bumps) - min(bumps):.3f}")

    # ===== GRASPING =====
    summaries = {}
    for name in ("cosine_learning", "wrist_learning", "fine_tune"):
        if name in reports:
            for s in reports[name].tables.get("grasp_summary", []):
                summaries[s["method"]] = s
    present = [m for m in GRASP_LADDER if m in summaries]
    if len(present) >= 2:
        rates = [rate(summaries[m]["grasp"], summaries[m]["n"]) for m in present]
        check("grasp_ladder_nondecreasing", all(a <= b for a, b in zip(rates, rates[1:])),
              " -> ".join(f"{m}={r:.3f}" for m, r in zip(present, rates)))
    if "accidental" in summaries and "fine-tuned" in summaries:
        acc = rate(summaries["accidental"]["grasp"], summaries["accidental"]["n"])
        fine = rate(summaries["fine-tuned"]["grasp"], summaries["fine-tuned"]["n"])
        check("fine_tuned_doubles_accidental", fine >= 2 * acc, f"{fine:.3f} vs {acc:.3f}")
    if "fine-tuned" in summaries and "fine-tuned-no-stop" in summaries:
        gain = summaries["fine-tuned"]["grasp"] - summaries["fine-tuned-no-stop"]["grasp"]
        check("stop_on_reflex_never_hurts", gain >= 0, f"gain {gain}")
    for m, s in summaries.items():
        check(f"event_nesting[{m}]", s["grasp"] <= s["palmar_any"] <= s["bump_ground_truth"],
              f"{s['grasp']} <= {s['palmar_any']} <= {s['bump_ground_truth']}")

    mismatches = sum(
        (r["outcome"] == "grasp") != bool(r["attached_throughout"])
        for name in ("cosine_learning", "wrist_learning", "fine_tune", "generalization")
        if name in reports
        for r in reports[name].rows
    )
    if summaries:
        check("grasp_matches_attachment", mismatches == 0, f"{mismatches} disagreements")

    decided = [c for c in checks if c["passed"] is not None]
    passed = sum(1 for c in decided if c["passed"])
    ratio = passed / len(decided) if decided else 0.0
    return {
        "checks": checks,
        "passed": passed,
        "evaluated": len(decided),
        "score": round(ratio * 100, 1),
        "grade": get_grade(ratio) if decided else "N/A",
    }


def get_grade(score_ratio: float) -> str:
    """Convert score ratio to letter grade."""
    if score_ratio >= 0.9:
        return "A"
    elif score_ratio >= 0.8:
        return "B"
    elif score_ratio >= 0.7:
        return "C"
    elif score_ratio >= 0.6:
        return "D"
    else:
        return "F"


def print_acceptance_report(report: dict[str, Any], run_dir: str = ""):
    """Print a formatted acceptance report."""
    print(f"\n📊 ACCEPTANCE REPORT {f'for {run_dir}' if run_dir else ''}")
    print("=" * 60)
    print(f"🎯 Score: {report['score']}% ({report['passed']}/{report['evaluated']}, Grade: {report['grade']})")
    for c in report["checks"]:
        mark = "➖" if c["passed"] is None else ("✅" if c["passed"] else "❌")
        print(f"   {mark} {c['name']}: {c['detail']}")
    print("=" * 60)
