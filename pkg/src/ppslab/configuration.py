# src/ppslab/configuration.py - Experiment and world configuration

import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Optional

import jsonschema
from langchain_core.runnables import RunnableConfig

from ppslab.errors import ConfigError
from ppslab.state import CONFIG_SCHEMA
from ppslab.utils import digest

logger = logging.getLogger(__name__)

ENV_PREFIX = "PPSLAB_"
CONFIG_SCHEMA_VERSION = 1

REACH_POLICIES = ["random-node", "random-candidate", "nearest-candidate", "jacobian-adjusted"]
GRASP_METHODS = ["accidental", "cosine", "wrist", "fine-tuned"]


@dataclass(kw_only=True)
class WorldConfig:
    """Geometry of the simulated table, blocks and camera."""

    image_rows: int = 120
    image_cols: int = 160
    focal_length: float = 170.0  # pixels, both axes
    camera_position: list[float] = field(default_factory=lambda: [-0.10, 0.05, 0.85])
    camera_target: list[float] = field(default_factory=lambda: [0.62, 0.05, 0.0])
    disparity_constant: float = 140.0  # disparity = round(K / depth)
    table_bounds: list[float] = field(default_factory=lambda: [0.30, 1.00, -0.40, 0.55])  # x0, x1, y0, y1
    placement_bounds: list[float] = field(default_factory=lambda: [0.42, 0.86, -0.20, 0.40])
    block_dims: list[float] = field(default_factory=lambda: [0.04, 0.04, 0.11])
    substeps: int = 50  # interpolation substeps per commanded motion
    palmar_min_aperture: float = 0.1
    disparity_noise: int = 0  # max integer jitter per pixel, 0 disables
    noise_seed: int = 0

    def __post_init__(self):
        if self.image_rows < 8 or self.image_cols < 8:
            raise ConfigError("image must be at least 8x8 pixels")
        if self.substeps < 1:
            raise ConfigError("substeps must be positive")
        if len(self.table_bounds) != 4 or len(self.placement_bounds) != 4:
            raise ConfigError("bounds are [x0, x1, y0, y1]")
        if len(self.block_dims) != 3 or min(self.block_dims) <= 0:
            raise ConfigError("block_dims must be three positive lengths")
        if self.disparity_noise < 0:
            raise ConfigError("disparity_noise must be non-negative")


@dataclass(kw_only=True)
class Configuration:
    """The configurable fields for a full developmental run."""

    # Graph
    n_nodes: int = 600  # 3000 at paper scale
    paper_scale: bool = False

    # Named random streams; unset ones default to ``seed``
    seed: int = 7
    babble_seed: Optional[int] = None
    placement_seed: Optional[int] = None
    policy_seed: Optional[int] = None

    # Placements
    train_placements: int = 40
    test_placements: int = 40

    # Exploration
    exploration_blocks: int = 3
    rare_cluster_target: int = 20
    max_exploration_trajectories: int = 400
    mask_change_threshold: float = 0.2  # fraction of initial mask pixels

    # Reaching
    policies: list[str] = field(default_factory=lambda: list(REACH_POLICIES))
    feature_thresholds: list[float] = field(default_factory=lambda: [float(k) for k in range(2, 41, 2)])
    reach_aperture: float = 0.0

    # Grasping
    apertures: list[float] = field(default_factory=lambda: [0.0, 0.25, 0.5, 0.75, 1.0])
    grasp_aperture: float = 1.0
    methods: list[str] = field(default_factory=lambda: list(GRASP_METHODS))
    preshape_magnitude: float = 21.0  # pixels
    candidate_cutoff: float = 21.0  # pixels, strict
    offset_u: float = 0.125  # fractions of the target major-axis length
    offset_v: float = -0.25
    offset_d: float = -0.125
    derive_motion_scale: bool = False
    wrist_grid_steps: int = 16

    # Execution
    workers: int = 1
    out_dir: str = "runs/desk"

    world: WorldConfig = field(default_factory=WorldConfig)

    def __post_init__(self):
        """Normalize derived values and validate settings."""
        if isinstance(self.world, dict):
            self.world = WorldConfig(**self.world)
        if self.paper_scale:
            self.n_nodes = 3000
        for name in ("babble_seed", "placement_seed", "policy_seed"):
            if getattr(self, name) is None:
                setattr(self, name, self.seed)

        if self.n_nodes < 0:
            raise ConfigError("n_nodes must be non-negative")
        if not 0.0 < self.mask_change_threshold < 1.0:
            raise ConfigError("mask_change_threshold must lie in (0, 1)")
        if any(not 0.0 <= a <= 1.0 for a in self.apertures):
            raise ConfigError("apertures must lie in [0, 1]")
        if self.candidate_cutoff <= 0 or self.preshape_magnitude <= 0:
            raise ConfigError("candidate_cutoff and preshape_magnitude must be positive")
        if self.wrist_grid_steps < 1:
            raise ConfigError("wrist_grid_steps must be positive")

        unknown = [p for p in self.policies if p not in REACH_POLICIES]
        if unknown:
            logger.warning("Dropping unknown reach policies: %s", unknown)
            self.policies = [p for p in self.policies if p in REACH_POLICIES]
        unknown = [m for m in self.methods if m not in GRASP_METHODS]
        if unknown:
            logger.warning("Dropping unknown grasp methods: %s", unknown)
            self.methods = [m for m in self.methods if m in GRASP_METHODS]

    @classmethod
    def from_runnable_config(
        cls, config: Optional[RunnableConfig] = None
    ) -> "Configuration":
        """Create a Configuration from a RunnableConfig, falling back to PPSLAB_* env vars."""
        configurable = (
            config["configurable"] if config and "configurable" in config else {}
        )
        defaults = cls()

        values: dict[str, Any] = {}
        for f in fields(cls):
            if not f.init:
                continue
            config_value = configurable.get(f.name)
            if config_value is not None:
                values[f.name] = config_value
                continue
            env_value = os.environ.get(ENV_PREFIX + f.name.upper())
            if env_value is None or f.name == "world":
                continue
            values[f.name] = _parse_env(f.name, env_value, getattr(defaults, f.name))

        return cls(**values)

    @classmethod
    def from_file(cls, path: str | Path, **overrides: Any) -> "Configuration":
        """Load a versioned JSON configuration, then apply env and keyword overrides."""
        try:
            document = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read configuration {path}: {e}") from e
        try:
            jsonschema.validate(document, CONFIG_SCHEMA)
        except jsonschema.ValidationError as e:
            raise ConfigError(f"invalid configuration {path}: {e.message}") from e

        configurable = dict(document.get("experiment", {}))
        if "world" in document:
            configurable["world"] = document["world"]
        configurable.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_runnable_config({"configurable": configurable})

    def to_document(self) -> dict[str, Any]:
        """Versioned JSON document accepted by ``from_file``."""
        experiment = asdict(self)
        world = experiment.pop("world")
        return {"schema_version": CONFIG_SCHEMA_VERSION, "experiment": experiment, "world": world}

    def digest(self, *keep: str) -> str:
        """Digest of the values that influence run artifacts.

        Execution settings never count. The policy and method selections only
        count when named in ``keep``, so narrowing them reuses upstream stages.
        """
        document = self.to_document()
        for key in ("workers", "out_dir", "policies", "methods"):
            if key not in keep:
                document["experiment"].pop(key, None)
        return digest(document)

    def offsets(self) -> tuple[float, float, float]:
        return (self.offset_u, self.offset_v, self.offset_d)


def _parse_env(name: str, raw: str, default: Any) -> Any:
    """Parse an environment string using the type of the field's default."""
    try:
        if isinstance(default, bool):
            return raw.lower() in ("true", "1", "yes", "on")
        if isinstance(default, int) or name.endswith("_seed"):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, list):
            items = [item.strip() for item in raw.split(",") if item.strip()]
            if default and isinstance(default[0], (int, float)):
                return [float(item) for item in items]
            return items
    except ValueError as e:
        raise ConfigError(f"cannot parse {ENV_PREFIX}{name.upper()}={raw!r}: {e}") from e
    return raw


# Environment Configuration Helper
class EnvironmentConfig:
    """Helper for the two standard experiment scales."""

    @staticmethod
    def desk_scale() -> dict[str, str]:
        """Set the desk-scale environment and return what was set."""
        env = {
            "PPSLAB_N_NODES": "600",
            "PPSLAB_PAPER_SCALE": "false",
            "PPSLAB_TRAIN_PLACEMENTS": "40",
            "PPSLAB_TEST_PLACEMENTS": "40",
        }
        os.environ.update(env)
        return env

    @staticmethod
    def paper_scale() -> dict[str, str]:
        env = {
            "PPSLAB_N_NODES": "3000",
            "PPSLAB_PAPER_SCALE": "true",
            "PPSLAB_TRAIN_PLACEMENTS": "40",
            "PPSLAB_TEST_PLACEMENTS": "40",
        }
        os.environ.update(env)
        return env

    @staticmethod
    def validate_setup() -> tuple[bool, str]:
        """Validate the environment-derived configuration and return status."""
        try:
            config = Configuration.from_runnable_config()
        except ConfigError as e:
            return False, e.message
        if config.n_nodes < 1:
            return False, "n_nodes must be at least 1 for a run"
        if not config.policies or not config.methods:
            return False, "no reach policies or grasp methods selected"
        return True, f"{config.n_nodes}-node run, seed {config.seed}, output {config.out_dir}"
