import csv
import json
import logging
import math
from pathlib import Path
from typing import Optional, Union

import numpy as np
from pydantic import ValidationError

from ucwave.services.config import ExperimentConfig
from ucwave.services.errors import ConfigurationError


logger = logging.getLogger(__name__)

# File names written into every output directory
REPORT_FILE = "report.json"
TABLE_FILE = "table.csv"


def _jsonable(value):
    # numpy scalars, arrays and non-finite floats as plain JSON
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return [_jsonable(v) for v in value.tolist()]
    if isinstance(value, (np.floating, float)):
        value = float(value)
        return value if math.isfinite(value) else None
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.bool_):
        return bool(value)
    return value


class RunStore:
    """
    Filesystem boundary of the experiment runner.

    Purpose:
    - Read and validate JSON experiment configs
    - Write report.json and table.csv for a finished run

    This class contains no numerical logic.
    """

    def __init__(self, out_dir: Union[str, Path]):
        self.out_dir = Path(out_dir)


    def load_config(self, path: Optional[Union[str, Path]]) -> ExperimentConfig:
        """
        Parse a config file; no path means the default parameter set.
        """
        if path is None:
            return ExperimentConfig()

        path = Path(path)
        try:
            raw = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc}") from exc

        try:
            return ExperimentConfig.model_validate(raw)
        except ValidationError as exc:
            raise ConfigurationError(f"invalid config {path}:\n{exc}") from exc


    def write_report(self, report) -> Path:
        """
        Write the structured report and its flat table; returns the directory.
        """
        self.out_dir.mkdir(parents=True, exist_ok=True)

        report_path = self.out_dir / REPORT_FILE
        report_path.write_text(json.dumps(_jsonable(report.to_dict()), indent=2, sort_keys=True))

        rows = report.table_rows()
        table_path = self.out_dir / TABLE_FILE
        # union of keys, first-seen order
        columns = list(dict.fromkeys(key for row in rows for key in row))
        with table_path.open("w", newline="") as handle:
            writer = csv.DictWriter(handle, fieldnames=columns)
            writer.writeheader()
            for row in rows:
                writer.writerow({key: _csv_cell(row.get(key)) for key in columns})

        logger.info("wrote %s and %s", report_path, table_path)
        return self.out_dir


def _csv_cell(value):
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value) if math.isfinite(value) else ""
    return value
