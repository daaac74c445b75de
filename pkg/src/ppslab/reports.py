# src/ppslab/reports.py - Stage reports and figure tables

import logging
from pathlib import Path
from typing import Any, Iterable, Optional

import pandas as pd
from pydantic import BaseModel, Field

from ppslab.utils import digest, dump_json, load_json

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.6f"
REACH_CRITERIA = (("final", "bumps_final"), ("anywhere", "bumps_any"), ("ground_truth", "bumps_ground_truth"))
REACH_TABLE_COLUMNS = ["policy", "trials", "bumps_final", "bumps_any", "bumps_ground_truth"]
GRASP_METHOD_COLUMNS = [
    "set", "method", "n", "miss", "bump", "palmar", "weak", "grasp", "palmar_any", "bump_ground_truth", "grasp_rate",
]


class StageReport(BaseModel):
    """Outcome of one pipeline stage, as checkpointed next to its artifacts."""

    stage: str = Field(description="Pipeline stage name")
    rows: list[dict[str, Any]] = Field(default_factory=list, description="Per-trial rows")
    aggregates: dict[str, Any] = Field(default_factory=dict, description="Aggregate rates and counts")
    tables: dict[str, list[dict[str, Any]]] = Field(default_factory=dict, description="Additional named tables")
    artifacts: dict[str, str] = Field(default_factory=dict, description="Files written by the stage")
    wall_clock: float = Field(default=0.0, description="Seconds spent in the stage")
    input_digest: str = Field(description="Digest of the configuration values the stage depends on")

    def content_digest(self) -> str:
        """Digest of everything except timing."""
        return digest(self.model_dump(exclude={"wall_clock"}))

    def save(self, path: str | Path) -> Path:
        return dump_json(Path(path), self.model_dump())

    @classmethod
    def load(cls, path: str | Path) -> "StageReport":
        return cls.model_validate(load_json(Path(path)))


class GraspSummary(BaseModel):
    method: str
    n: int = Field(ge=0)
    miss: int = Field(ge=0)
    bump: int = Field(ge=0)
    palmar: int = Field(ge=0, description="Palmar bumps that did not end in a grasp")
    weak: int = Field(ge=0)
    grasp: int = Field(ge=0)
    palmar_any: int = Field(default=0, ge=0, description="Trials with a Palmar trigger, grasps included")
    bump_ground_truth: int = Field(default=0, ge=0)

    @property
    def grasp_rate(self) -> float:
        return self.grasp / self.n if self.n else 0.0


def frame(rows: Iterable[dict[str, Any]], columns: Optional[list[str]] = None) -> pd.DataFrame:
    return pd.DataFrame(list(rows), columns=columns)


def write_csv(df: pd.DataFrame, path: Path) -> Path:
    df.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n", encoding="utf-8")
    return path


def reach_ladder_frame(summary: list[dict[str, Any]]) -> pd.DataFrame:
    rows = []
    for s in summary:
        for criterion, key in REACH_CRITERIA:
            n = s["trials"]
            rows.append({"policy": s["policy"], "criterion": criterion, "count": s[key], "trials": n,
                         "rate": s[key] / n if n else 0.0})
    return frame(rows, ["policy", "criterion", "count", "trials", "rate"])


def grasp_methods_frame(reports: dict[str, StageReport]) -> pd.DataFrame:
    rows = []
    for name in ("cosine_learning", "wrist_learning", "fine_tune", "generalization"):
        report = reports.get(name)
        if report is None:
            continue
        for item in report.tables.get("grasp_summary", []):
            s = GraspSummary.model_validate(item)
            rows.append({"set": item.get("set", "train"), **s.model_dump(), "grasp_rate": s.grasp_rate})
    return frame(rows, GRASP_METHOD_COLUMNS)


def emit_figures(reports: dict[str, StageReport], out_dir: str | Path) -> dict[str, str]:
    """Write one CSV per figure analogue from the stage reports; returns name -> path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: dict[str, str] = {}

    def put(name: str, df: pd.DataFrame) -> None:
        written[name] = str(write_csv(df, out / f"{name}.csv"))

    if "explore" in reports:
        tables = reports["explore"].tables
        put("bump_table", frame(tables.get("bump_table", []), ["mask_kind", "mask_hit", "depth_hit", "trials", "bumps", "probability"]))
        put("feature_curves", frame(tables.get("feature_curves", []), ["kind", "k", "candidates", "bumps", "probability"]))
    if "reach_ladder" in reports:
        summary = reports["reach_ladder"].tables.get("summary", [])
        put("reach_ladder", reach_ladder_frame(summary))
        put("reach_table", frame(summary, REACH_TABLE_COLUMNS))
    if "aperture_study" in reports:
        put("aperture", frame(reports["aperture_study"].rows, ["aperture", "trials", "bump_rate", "ground_truth_rate", "palmar_rate"]))
    if "cosine_learning" in reports:
        put("cos_sim", frame(reports["cosine_learning"].tables.get("cos_sim", []), ["pair", "bucket", "trials", "palmar", "rate"]))
    methods = grasp_methods_frame(reports)
    if not methods.empty:
        put("grasp_methods", methods)
    for name, set_name in (("fine_tune", "train"), ("generalization", "test")):
        report = reports.get(name)
        if report is None:
            continue
        rows = [r for r in report.rows if r.get("method") == "fine-tuned"]
        put(f"scatter_{set_name}", frame(({"x": r["x"], "y": r["y"], "outcome": r["outcome"]} for r in rows), ["x", "y", "outcome"]))
    if "generalization" in reports and reports["generalization"].aggregates:
        put("generalization", frame([reports["generalization"].aggregates]))

    logger.info("Wrote %d figure tables to %s", len(written), out)
    return written
