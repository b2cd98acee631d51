from __future__ import annotations

import os
from pathlib import Path


PROJECT_ROOT = Path(__file__).resolve().parents[1]

OUTPUT_DIR = Path(os.getenv("RM_OUTPUT_DIR", PROJECT_ROOT / "runs"))
LOG_LEVEL = os.getenv("RM_LOG_LEVEL", "INFO").upper()

# joblib fan-out over seeds
THREADS = int(os.getenv("ROUGH_MANIFOLD_THREADS", "1"))

CHEN_TOL = float(os.getenv("RM_CHEN_TOL", "1e-10"))
CENTER_TOL = float(os.getenv("RM_CENTER_TOL", "1e-8"))
BETA_MARGIN = float(os.getenv("RM_BETA_MARGIN", "0.1"))
GAP_MARGIN = float(os.getenv("RM_GAP_MARGIN", "1e-3"))
PAIR_POLICY = os.getenv("RM_PAIR_POLICY", "dyadic-pairs")

TWO_SIDED_HORIZON = int(os.getenv("RM_TWO_SIDED_HORIZON", "8"))
LP_WINDOW = int(os.getenv("RM_LP_WINDOW", "24"))
MAX_CHOLESKY_POINTS = int(os.getenv("RM_MAX_CHOLESKY", "4096"))

TEMPEREDNESS_THRESHOLD = 0.05
SPLIT_RATIO = 0.9
MIN_SUBINTERVAL_CELLS = 4

# sampling used when fitting Mc, Ms
DICHOTOMY_HORIZON = float(os.getenv("RM_DICHOTOMY_HORIZON", "20"))
DICHOTOMY_SAMPLES = int(os.getenv("RM_DICHOTOMY_SAMPLES", "20001"))

STRICT_FLAGS = os.getenv("RM_STRICT_FLAGS", "true").lower() in {
    "1",
    "true",
    "yes",
    "on",
}
