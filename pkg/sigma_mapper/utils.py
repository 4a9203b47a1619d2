"""
Utility functions for Sigma Mapper
Contains common functionality like JSON output, provenance records and run summaries.
"""

import json
import math
import os
from typing import Any, Dict, List, Optional


def ensure_dir(path: str) -> str:
    """Create an output directory (and parents) if needed"""
    if path:
        os.makedirs(path, exist_ok=True)
    return path


def save_json(payload: Dict[str, Any], file_path: str):
    """Save payload to JSON file with pretty formatting and sorted keys"""
    with open(file_path, "w", encoding="utf-8", newline="\n") as f:
        json.dump(payload, f, indent=2, ensure_ascii=False, sort_keys=True)
        f.write("\n")


def provenance_path(out_dir: str, command: str) -> str:
    """provenance_<command>.json; each verb keeps its own record in a shared output directory"""
    return os.path.join(out_dir, f"provenance_{command}.json")


def write_provenance(out_dir: str, command: str, config, extra: Optional[Dict[str, Any]] = None) -> str:
    """Write the command's provenance record beside its outputs

    Holds the seed, the config digest and echo, the tool version and the command;
    there is no timestamp so reruns stay byte-identical.
    """
    from . import __version__

    ensure_dir(out_dir)
    record = {
        "command": command,
        "seed": config.seed,
        "config_digest": config.digest(),
        "config": config.as_dict(),
        "version": __version__,
    }
    if extra:
        record.update(extra)
    path = provenance_path(out_dir, command)
    save_json(record, path)
    return path


def _fmt(value: Any) -> str:
    if isinstance(value, float):
        if math.isinf(value):
            return "inf"
        if math.isnan(value):
            return "n/a"
        return f"{value:.4g}"
    if isinstance(value, int) and not isinstance(value, bool):
        return f"{value:,}"
    return str(value)


def print_summary(title: str, stats: Dict[str, Any], outputs: Optional[List[str]] = None):
    """Print a banner summary of a finished command"""
    print("\n" + "=" * 60)
    print(f"SIGMA MAPPER {title.upper()} SUMMARY")
    print("=" * 60)
    for key, value in stats.items():
        print(f"{key}: {_fmt(value)}")
    if outputs:
        print("\nResults saved to:")
        for path in outputs:
            print(f"  {path}")
    print("=" * 60)
