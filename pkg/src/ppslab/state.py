# src/ppslab/state.py - Record schemas and pipeline state

import operator
from dataclasses import dataclass, field
from typing import Annotated, Any, Optional

_NUMBER_LIST = {"type": "array", "items": {"type": "number"}}
_TRIPLE = {"type": "array", "items": {"type": "number"}, "minItems": 3, "maxItems": 3}

CONFIG_SCHEMA = {
    "title": "ppslab_configuration",
    "description": "Versioned experiment configuration document",
    "type": "object",
    "required": ["schema_version"],
    "properties": {
        "schema_version": {"const": 1},
        "experiment": {
            "type": "object",
            "properties": {
                "n_nodes": {"type": "integer", "minimum": 0},
                "paper_scale": {"type": "boolean"},
                "seed": {"type": "integer"},
                "babble_seed": {"type": ["integer", "null"]},
                "placement_seed": {"type": ["integer", "null"]},
                "policy_seed": {"type": ["integer", "null"]},
                "train_placements": {"type": "integer", "minimum": 0},
                "test_placements": {"type": "integer", "minimum": 0},
                "exploration_blocks": {"type": "integer", "minimum": 1},
                "rare_cluster_target": {"type": "integer", "minimum": 1},
                "max_exploration_trajectories": {"type": "integer", "minimum": 1},
                "mask_change_threshold": {"type": "number"},
                "policies": {"type": "array", "items": {"type": "string"}},
                "feature_thresholds": _NUMBER_LIST,
                "reach_aperture": {"type": "number", "minimum": 0, "maximum": 1},
                "apertures": _NUMBER_LIST,
                "grasp_aperture": {"type": "number", "minimum": 0, "maximum": 1},
                "methods": {"type": "array", "items": {"type": "string"}},
                "preshape_magnitude": {"type": "number"},
                "candidate_cutoff": {"type": "number"},
                "offset_u": {"type": "number"},
                "offset_v": {"type": "number"},
                "offset_d": {"type": "number"},
                "derive_motion_scale": {"type": "boolean"},
                "wrist_grid_steps": {"type": "integer", "minimum": 1},
                "workers": {"type": "integer", "minimum": 1},
                "out_dir": {"type": "string"},
            },
            "additionalProperties": False,
        },
        "world": {
            "type": "object",
            "properties": {
                "image_rows": {"type": "integer"},
                "image_cols": {"type": "integer"},
                "focal_length": {"type": "number"},
                "camera_position": _TRIPLE,
                "camera_target": _TRIPLE,
                "disparity_constant": {"type": "number"},
                "table_bounds": _NUMBER_LIST,
                "placement_bounds": _NUMBER_LIST,
                "block_dims": _NUMBER_LIST,
                "substeps": {"type": "integer"},
                "palmar_min_aperture": {"type": "number"},
                "disparity_noise": {"type": "integer"},
                "noise_seed": {"type": "integer"},
            },
            "additionalProperties": False,
        },
    },
}

_OBSERVATION_SCHEMA = {
    "type": "object",
    "required": ["block_id", "iou", "bump", "ground_truth"],
    "properties": {
        "block_id": {"type": "integer"},
        "placement": _NUMBER_LIST,
        "iou": {"type": "number", "minimum": 0, "maximum": 1},
        "bump": {"type": "boolean"},
        "ground_truth": {"type": "boolean"},
        "target_center": _TRIPLE,
        "target_depth": _NUMBER_LIST,
        "target_axis_length": {"type": "number"},
        "final_palm_center": {"type": ["array", "null"]},
        "candidate": {"type": "boolean"},
        "groups": {
            "type": "object",
            "description": "Mask/depth intersections of the final node with the target, per mask kind",
            "additionalProperties": {"type": "array", "items": {"type": "boolean"}},
        },
    },
}

EVENT_RECORD_SCHEMA = {
    "title": "ppslab_event_record",
    "description": "One executed trajectory with its observations and classification",
    "type": "object",
    "required": ["schema_version", "trial", "kind", "path", "observations"],
    "properties": {
        "schema_version": {"const": 1},
        "trial": {"type": "integer", "minimum": 0},
        "kind": {"enum": ["exploration", "reach", "grasp"]},
        "policy": {"type": ["string", "null"]},
        "path": {"type": "array", "items": {"type": "integer"}},
        "final_node": {"type": ["integer", "null"]},
        "penultimate_node": {"type": ["integer", "null"]},
        "q_star": {"type": ["array", "null"]},
        "aperture": {"type": "number"},
        "q7": {"type": ["number", "null"]},
        "aborted_at": {"type": ["integer", "null"]},
        "resumed": {"type": "integer", "minimum": 0},
        "observations": {"type": "array", "items": _OBSERVATION_SCHEMA},
        "bump_final": {"type": "boolean"},
        "bump_anywhere": {"type": "boolean"},
        "bump_ground_truth": {"type": "boolean"},
        "early_contact": {"type": "boolean"},
        "palmar": {"type": "boolean"},
        "palmar_step": {"type": ["integer", "null"]},
        "return_hits": {"type": ["array", "null"], "items": {"type": "boolean"}},
        "attached_at_return": {"type": ["array", "null"], "items": {"type": "boolean"}},
        "target_moved": {"type": ["array", "null"], "items": {"type": "boolean"}},
        "vectors": {"type": "object", "additionalProperties": {"type": ["array", "null"]}},
        "candidate_count": {"type": "integer", "minimum": 0},
        "tier": {"type": ["string", "null"]},
        "relaxed": {"type": "boolean"},
        "fallback": {"type": ["string", "null"]},
        "outcome": {"type": ["string", "null"]},
    },
}

WORLD_SNAPSHOT_SCHEMA = {
    "title": "ppslab_world_snapshot",
    "description": "Replayable world state",
    "type": "object",
    "required": ["schema_version", "q", "aperture", "blocks"],
    "properties": {
        "schema_version": {"const": 1},
        "q": {"type": "array", "items": {"type": "number"}, "minItems": 7, "maxItems": 7},
        "aperture": {"type": "number", "minimum": 0, "maximum": 1},
        "attached": {"type": ["integer", "null"]},
        "palmar_latched": {"type": "boolean"},
        "blocks": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["block_id", "center", "rotation", "half"],
                "properties": {
                    "block_id": {"type": "integer"},
                    "center": _TRIPLE,
                    "rotation": {"type": "array"},
                    "half": _TRIPLE,
                },
            },
        },
    },
}


@dataclass(kw_only=True)
class InputState:
    """Input to the developmental pipeline graph."""

    out_dir: Optional[str] = None  # overrides Configuration.out_dir
    stages: Optional[list[str]] = None  # subset to run, default all


@dataclass(kw_only=True)
class PipelineState(InputState):
    """Accumulated artifacts of the pipeline."""

    artifacts: dict[str, str] = field(default_factory=dict)
    stage_reports: Annotated[list[dict[str, Any]], operator.add] = field(default_factory=list)


@dataclass(kw_only=True)
class OutputState:
    """The response object for a pipeline run."""

    artifacts: dict[str, str] = field(default_factory=dict)
    stage_reports: list[dict[str, Any]] = field(default_factory=list)
