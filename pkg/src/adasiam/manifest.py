"""Run manifests: every CLI run records what produced its outputs."""

import json
from datetime import datetime, timezone
from pathlib import Path

from importlib.metadata import version, PackageNotFoundError


def _package_version():
    try:
        return version("adasiam")
    except PackageNotFoundError:
        return "unknown"


def write_manifest(out_dir, subcommand, seed, inputs, outputs,
                   config_path=None, config_snapshot=None, extra=None):
    """Write manifest.json next to the outputs; returns its path.

    Rerunning the subcommand with the recorded arguments reproduces the
    outputs bit-for-bit (the timestamp is metadata, not an input).
    """
    manifest = {
        "subcommand": subcommand,
        "seed": seed,
        "config_path": str(config_path) if config_path else None,
        "config": config_snapshot,
        "inputs": inputs,
        "outputs": outputs,
        "timestamp": datetime.now(timezone.utc).isoformat(),
        "version": _package_version(),
    }
    if extra:
        manifest.update(extra)
    path = Path(out_dir) / "manifest.json"
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, default=str)
        fh.write("\n")
    return path


def read_manifest(path):
    with open(path) as fh:
        return json.load(fh)
