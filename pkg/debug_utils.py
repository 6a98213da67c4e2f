"""
Debug helpers for capturing training state when diagnosing numeric failures.

Usage:
    from debug_utils import set_debug_dump_tensors, maybe_dump_tensors

    # In main.py, after parsing args:
    set_debug_dump_tensors(args.dump_tensors)

    # Anywhere a numeric failure is detected:
    maybe_dump_tensors({"inputs": batch.inputs, "ce_loss": ce}, logger, name="non_finite_loss")
"""

from __future__ import annotations

import json
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, Optional

import numpy as np

_DEBUG_DUMP_TENSORS: bool = False
_DEBUG_DUMP_DIR: Path = Path(".")


def set_debug_dump_tensors(enabled: bool, directory: Optional[Path] = None) -> None:
    """Globally enable/disable the tensor dump helper."""
    global _DEBUG_DUMP_TENSORS, _DEBUG_DUMP_DIR
    _DEBUG_DUMP_TENSORS = bool(enabled)
    if directory is not None:
        _DEBUG_DUMP_DIR = Path(directory)


def maybe_dump_tensors(payload: Dict[str, Any], logger=None, name: str = "state") -> Optional[Path]:
    """
    If debug dumping is enabled, write array entries of payload to an .npz
    file and the remaining scalars to a JSON file next to it.

    The filename is of the form: debug_{name}_YYYYMMDD-HHMMSS.npz
    """
    if not _DEBUG_DUMP_TENSORS:
        return None

    try:
        ts = datetime.now().strftime("%Y%m%d-%H%M%S")
        _DEBUG_DUMP_DIR.mkdir(parents=True, exist_ok=True)
        dump_path = (_DEBUG_DUMP_DIR / f"debug_{name}_{ts}.npz").resolve()
        arrays = {k: np.asarray(v) for k, v in payload.items() if isinstance(v, np.ndarray)}
        scalars = {k: v for k, v in payload.items() if k not in arrays}
        np.savez(dump_path, **arrays)
        dump_path.with_suffix(".json").write_text(json.dumps(scalars, indent=2, default=str), encoding="utf-8")

        if logger:
            logger.info(f"🔍 Saved debug tensors to {dump_path}")

        return dump_path
    except Exception as e:
        if logger:
            logger.warning(f"Failed to dump debug tensors for '{name}': {e}")
        return None
