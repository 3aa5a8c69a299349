import os
import logging
from pathlib import Path
from typing import Any, Dict, List, Tuple

import yaml
from dotenv import load_dotenv

load_dotenv()
logger = logging.getLogger(__name__)

CORE_DIR = Path(__file__).resolve().parent


class LabSettings:
    """
    Deployment knobs from the environment plus domain defaults from lab_profile.yaml.
    One instance per process, shared read-only.
    """
    def __init__(self, profile_path: str = None):
        # 1. Environment (.env or real env vars)
        self.log_level = os.getenv("MODELFREE_LOG_LEVEL", "INFO").upper()
        self.out_dir = Path(os.getenv("MODELFREE_OUT_DIR", "out"))
        self.scenario_dir = Path(os.getenv("MODELFREE_SCENARIO_DIR", str(CORE_DIR / "scenarios")))
        self.sweep_workers = int(os.getenv("MODELFREE_SWEEP_WORKERS", "4"))

        # 2. Domain profile
        self.profile_path = Path(profile_path or os.getenv("MODELFREE_PROFILE", str(CORE_DIR / "lab_profile.yaml")))
        self.profile = self._load_profile()

    def _load_profile(self) -> Dict[str, Any]:
        try:
            with open(self.profile_path, 'r', encoding='utf-8') as f:
                return yaml.safe_load(f) or {}
        except (OSError, yaml.YAMLError) as e:
            logger.warning(f"Could not load lab profile {self.profile_path}: {e}. Using built-in defaults.")
            return {}

    def _get(self, section: str, key: str, fallback: Any) -> Any:
        return self.profile.get(section, {}).get(key, fallback)

    @property
    def reference_tau(self) -> float:
        return float(self._get("reference", "tau", 0.5))

    @property
    def default_setpoints(self) -> List[Tuple[float, float]]:
        raw = self._get("setpoints", "default", [[0.0, 0.0], [5.0, 1.0], [10.0, 0.0],
                                                  [15.0, 1.0], [20.0, 0.0], [25.0, 1.0]])
        return [(float(t), float(v)) for t, v in raw]

    @property
    def threshold_factor(self) -> float:
        return float(self._get("stability", "threshold_factor", 1000.0))

    @property
    def final_fraction(self) -> float:
        return float(self._get("stability", "final_fraction", 0.1))

    @property
    def divergence_limit(self) -> float:
        return float(self._get("stability", "divergence_limit", 1.0e12))

    @property
    def tracking_fraction(self) -> float:
        return float(self._get("metrics", "tracking_fraction", 0.5))

    @property
    def relative_tracking_threshold(self) -> float:
        return float(self._get("metrics", "relative_tracking_threshold", 0.1))

    @property
    def oracle_grid(self) -> Tuple[float, float, int]:
        return (float(self._get("oracle", "omega_min", 1.0e-3)),
                float(self._get("oracle", "omega_max", 1.0e3)),
                int(self._get("oracle", "points", 4000)))

    @property
    def oracle_tolerance(self) -> float:
        return float(self._get("oracle", "tolerance", 1.0e-12))


settings = LabSettings()
