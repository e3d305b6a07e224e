from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Union


@dataclass(frozen=True)
class ArtifactPath:
    absolute: Path
    relative: str


def resolve_in_run(run_dir: Union[str, Path], path: str) -> ArtifactPath:
    """Resolve a user path against the run directory; symlinks are followed before the containment check."""
    if not isinstance(path, str) or not path.strip():
        raise ValueError("path must be a non-empty string")

    cleaned = path.strip()
    if Path(cleaned).is_absolute():
        raise ValueError("artifact paths are relative to the run directory")

    root = Path(run_dir).resolve()
    target = (root / cleaned).resolve()
    try:
        relative = target.relative_to(root)
    except ValueError:
        raise ValueError("path must resolve inside the run directory")
    return ArtifactPath(absolute=target, relative=relative.as_posix())
