"""
report_utils.py - JSON and CSV report emission
"""

import json
import logging
import math
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from pydantic import BaseModel

logger = logging.getLogger(__name__)


class NumpyJSONEncoder(json.JSONEncoder):
    def default(self, obj):
        if isinstance(obj, np.integer):
            return int(obj)
        elif isinstance(obj, np.floating):
            return float(obj)
        elif isinstance(obj, np.bool_):
            return bool(obj)
        elif isinstance(obj, np.ndarray):
            return obj.tolist()
        elif isinstance(obj, pd.Series):
            return obj.tolist()
        elif isinstance(obj, BaseModel):
            return obj.model_dump(mode="json")
        elif isinstance(obj, Enum):
            return obj.value
        elif isinstance(obj, Path):
            return str(obj)
        return super().default(obj)


def _finite(value):
    # Strict JSON has no inf/nan.
    if isinstance(value, float) and not math.isfinite(value):
        return None if math.isnan(value) else ("inf" if value > 0 else "-inf")
    if isinstance(value, dict):
        return {str(k): _finite(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_finite(v) for v in value]
    return value


def build_report(command: str, config: BaseModel, seed: int, results: Dict[str, Any]) -> Dict[str, Any]:
    return {
        "command": command,
        "created_utc": datetime.now(timezone.utc).isoformat(),
        "seed": seed,
        "config": config.model_dump(mode="json"),
        "results": results,
    }


def to_json(report: Dict[str, Any]) -> str:
    return json.dumps(_finite(json.loads(json.dumps(report, cls=NumpyJSONEncoder))), indent=2)


def write_json_report(report: Dict[str, Any], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(to_json(report))
    logger.info(f"Report written to {path}")
    return path


def write_csv(records: Sequence[Dict[str, Any]], columns: List[str], path) -> Path:
    """Table with a fixed column order"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame(list(records)).reindex(columns=columns)
    frame.to_csv(path, index=False)
    logger.info(f"Wrote {len(frame)} rows to {path}")
    return path


def read_csv(path) -> pd.DataFrame:
    return pd.read_csv(path)


def summarize_frame(records: Sequence[Dict[str, Any]], by: str, value: str) -> Optional[Dict[str, Dict[str, float]]]:
    """Mean/std of `value` grouped by `by`"""
    if not records:
        return None
    grouped = pd.DataFrame.from_records(list(records)).groupby(by)[value].agg(["mean", "std"])
    return {str(k): {"mean": float(row["mean"]), "std": float(row["std"]) if pd.notna(row["std"]) else 0.0}
            for k, row in grouped.iterrows()}
