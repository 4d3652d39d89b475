"""Single-file array containers with a JSON metadata sidecar.

A container is an uncompressed ``.npz``-compatible zip of named float32/bool
arrays, written with fixed zip entry timestamps so that rerunning a command
with the same inputs produces byte-identical files (``np.savez`` embeds the
wall clock and does not). ``np.load`` reads these containers directly.

The metadata sidecar lives next to the container at ``<path>.json``.
"""

from __future__ import annotations

import io
import json
import zipfile
from pathlib import Path

import numpy as np

from .errors import FormatError

# Fixed DOS timestamp for zip entries (zip epoch).
_ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)


def sidecar_path(path: str | Path) -> Path:
    return Path(str(path) + ".json")


def save_container(path: str | Path, arrays: dict[str, np.ndarray], meta: dict) -> None:
    """Write named arrays to ``path`` and metadata to ``<path>.json``.

    Keys must be non-empty and unique; arrays are stored as given (callers
    are responsible for dtype, float fields are conventionally float32).
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(path, mode="w", compression=zipfile.ZIP_STORED) as zf:
        for name in arrays:
            if not name:
                raise ValueError("array names must be non-empty")
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.asanyarray(arrays[name]))
            info = zipfile.ZipInfo(name + ".npy", date_time=_ZIP_EPOCH)
            zf.writestr(info, buf.getvalue())
    sidecar_path(path).write_text(
        json.dumps(meta, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )


def load_container(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    """Read a container and its sidecar back into (arrays, meta)."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    arrays: dict[str, np.ndarray] = {}
    try:
        with zipfile.ZipFile(path) as zf:
            for entry in zf.namelist():
                if not entry.endswith(".npy"):
                    raise FormatError(f"{path}: unexpected entry {entry!r}")
                with zf.open(entry) as f:
                    arrays[entry[: -len(".npy")]] = np.lib.format.read_array(f)
    except zipfile.BadZipFile as exc:
        raise FormatError(f"{path}: not an array container ({exc})") from exc
    side = sidecar_path(path)
    if not side.exists():
        raise FormatError(f"{path}: missing metadata sidecar {side.name}")
    try:
        meta = json.loads(side.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{side}: invalid JSON ({exc})") from exc
    return arrays, meta
