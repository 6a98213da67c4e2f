"""
Centralized logging utilities for merge-rec runs.
"""
import json
import logging
import sys
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence


def render_table(rows: Sequence[Dict[str, Any]], columns: Sequence[str]) -> str:
    """Aligned text table; floats with 4 decimals, missing cells blank."""
    def cell(value: Any) -> str:
        if value is None:
            return ""
        if isinstance(value, float):
            return f"{value:.4f}"
        return str(value)

    body = [[cell(row.get(c)) for c in columns] for row in rows]
    widths = [max([len(c)] + [len(r[i]) for r in body]) for i, c in enumerate(columns)]
    lines = ["  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(columns, widths)))]
    lines.append("-" * len(lines[0]))
    for r in body:
        lines.append("  ".join(v.ljust(w) if i == 0 else v.rjust(w) for i, (v, w) in enumerate(zip(r, widths))))
    return "\n".join(lines)


class RunLogger:
    """Console + file logging with JSON-lines stage records."""

    def __init__(self, log_file: str = "merge_rec.log", verbose: bool = False):
        self.log_file = Path(log_file)
        self.verbose = verbose
        self.stage_logs: List[Dict[str, Any]] = []

        log_level = logging.DEBUG if verbose else logging.INFO

        console_handler = logging.StreamHandler(sys.stdout)
        console_handler.setLevel(log_level)
        console_handler.setFormatter(logging.Formatter('%(levelname)s: %(message)s'))

        self.log_file.parent.mkdir(parents=True, exist_ok=True)
        file_handler = logging.FileHandler(self.log_file, mode='a', encoding='utf-8')
        file_handler.setLevel(logging.DEBUG)
        file_handler.setFormatter(logging.Formatter('%(asctime)s - %(levelname)s - %(message)s'))

        self.logger = logging.getLogger('merge_rec')
        self.logger.setLevel(logging.DEBUG)
        for handler in self.logger.handlers:
            handler.close()
        self.logger.handlers.clear()
        self.logger.addHandler(console_handler)
        self.logger.addHandler(file_handler)

    def info(self, message: str):
        self.logger.info(message)

    def debug(self, message: str):
        self.logger.debug(message)

    def warning(self, message: str):
        self.logger.warning(message)

    def error(self, message: str):
        self.logger.error(message)

    def close(self):
        for handler in self.logger.handlers:
            handler.close()
        self.logger.handlers.clear()

    def _append_json(self, payload: Dict[str, Any]):
        with open(self.log_file, 'a', encoding='utf-8') as f:
            f.write(json.dumps(payload, default=str) + '\n')

    def log_stage(
        self,
        stage: str,
        inputs: Optional[Dict[str, str]] = None,
        outputs: Optional[Dict[str, str]] = None,
        seed: Optional[int] = None,
        backward_passes: Optional[int] = None,
        status: str = "ok",
        warnings: Optional[list] = None,
    ) -> Dict[str, Any]:
        """
        Log one pipeline stage: a human summary line plus a JSON line.

        Args:
            stage: Stage name (e.g. "train:cl4srec", "fisher:duorec_sup")
            inputs: Mapping of input name to sha256
            outputs: Mapping of output name to sha256
            seed: Seed the stage ran with
            backward_passes: Backward passes spent (Fisher stages)
            status: ok or failed
            warnings: List of warning messages
        """
        warnings = warnings or []
        outputs = outputs or {}

        extra = f", backward={backward_passes}" if backward_passes is not None else ""
        warning_str = f" [WARNINGS: {len(warnings)}]" if warnings else ""
        self.info(f"Stage '{stage}' {status}: seed={seed}{extra}, outputs={len(outputs)}{warning_str}")

        record = {
            "timestamp": datetime.now().isoformat(),
            "type": "stage",
            "stage": stage,
            "inputs": inputs or {},
            "outputs": outputs,
            "seed": seed,
            "backward_passes": backward_passes,
            "status": status,
            "warnings": warnings,
        }
        self._append_json(record)
        self.stage_logs.append(record)

        for warning in warnings:
            self.warning(f"  └─ {warning}")
        return record

    def log_summary(self, title: str, rows: Sequence[Dict[str, Any]], columns: Sequence[str]) -> str:
        """Print an aligned results table and append it to the log file as JSON."""
        table = render_table(rows, columns)
        print("\n" + "=" * 70)
        print(f"  {title}")
        print("=" * 70)
        print(table)
        print()

        self._append_json({
            "timestamp": datetime.now().isoformat(),
            "type": "run_summary",
            "title": title,
            "columns": list(columns),
            "rows": list(rows),
            "stages": len(self.stage_logs),
        })
        return table
