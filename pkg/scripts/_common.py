"""Shared helpers for the experiment scripts."""

import json
import tempfile
from pathlib import Path

from edgedet.fixtures import write_image_fixtures, write_lidar_fixtures


def fixture_dir(kind: str, given: str | None, frames: int, seed: int) -> Path:
    """Use ``given`` if set, otherwise write fresh synthetic fixtures to a temp dir."""
    if given:
        return Path(given)
    root = Path(tempfile.mkdtemp(prefix=f"edgedet_{kind}_"))
    writer = write_image_fixtures if kind == "retinanet" else write_lidar_fixtures
    return writer(root, frames=frames, seed=seed)


def save_rows(out: Path, name: str, rows: list[dict], markdown: str) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{name}.json").write_text(json.dumps(rows, indent=2, sort_keys=True) + "\n")
    (out / f"{name}.md").write_text(markdown)
    print(markdown, end="")
    print(f"\nwrote {out / name}.json and .md")
