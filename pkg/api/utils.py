import csv
import hashlib
import json
import logging
import os
import subprocess
from pathlib import Path
from typing import Any, List, Optional, Sequence

import numpy as np
from jinja2 import Environment, FileSystemLoader, select_autoescape

from .models import ExperimentConfig, ExperimentReport

logger = logging.getLogger(__name__)

FALLBACK_VERSION = "0.1.0"
TEMPLATE_DIR = Path(__file__).resolve().parent.parent / "templates"

_version_cache: Optional[str] = None


def config_hash(cfg: ExperimentConfig) -> str:
    """
    sha256 of the canonical config JSON.

    Output directory and worker count do not change results, so they are
    left out of the hash.
    """
    payload = cfg.model_dump(mode="json", exclude={"out_dir", "workers"})
    canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def version_string() -> str:
    """git-describe style version of the working tree, or the package fallback."""
    global _version_cache
    if _version_cache is not None:
        return _version_cache
    try:
        result = subprocess.run(
            ["git", "describe", "--tags", "--always", "--dirty"],
            cwd=Path(__file__).resolve().parent.parent,
            capture_output=True, text=True, timeout=5,
        )
        described = result.stdout.strip()
        _version_cache = described if result.returncode == 0 and described else FALLBACK_VERSION
    except (OSError, subprocess.SubprocessError):
        _version_cache = FALLBACK_VERSION
    return _version_cache


def _plain(value: Any) -> Any:
    """numpy scalars/arrays to JSON-native values (floats keep shortest round-trip repr)."""
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, np.ndarray):
        return _plain(value.tolist())
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    if isinstance(value, np.bool_):
        return bool(value)
    return value


def dumps_json(data: Any) -> str:
    return json.dumps(_plain(data), indent=2, sort_keys=True)


def write_json(path: Path, data: Any) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps_json(data) + "\n", encoding="utf-8")
    return path


def format_cell(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return "%.17g" % float(value)
    return str(value)


def write_csv(path: Path, header: Sequence[str], rows: List[Sequence[Any]]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(list(header))
        for row in rows:
            writer.writerow([format_cell(v) for v in row])
    return path


def render_report_markdown(report: ExperimentReport) -> str:
    env = Environment(loader=FileSystemLoader(str(TEMPLATE_DIR)), autoescape=select_autoescape(enabled_extensions=()))
    env.filters["num"] = lambda v: format_cell(v) if isinstance(v, (int, float, np.number)) else ("" if v is None else str(v))
    template = env.get_template("report.md.j2")
    columns: List[str] = []
    for row in report.rows:
        for key in row:
            if key not in columns:
                columns.append(key)
    return template.render(report=report, columns=columns)


def write_outputs(outcome, out_dir: str) -> List[str]:
    """Write measures, tables, report.json and report.md of an ExperimentOutcome."""
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    written: List[str] = []
    for name, measure in outcome.measures.items():
        written.append(str(write_json(root / f"{name}.json", measure.to_dict())))
    for name, (header, rows) in outcome.tables.items():
        written.append(str(write_csv(root / f"{name}.csv", header, rows)))
    report_json = root / "report.json"
    report_md = root / "report.md"
    outcome.report.files = sorted(os.path.basename(p) for p in written + [str(report_json), str(report_md)])
    write_json(report_json, outcome.report.model_dump())
    report_md.write_text(render_report_markdown(outcome.report), encoding="utf-8")
    logger.info(f"Wrote {len(outcome.report.files)} files to {root}")
    return outcome.report.files
