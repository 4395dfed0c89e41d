"""CSV tables and the per-run JSON manifest."""
import hashlib
import json
import logging
from datetime import datetime, timezone
from importlib import metadata
from pathlib import Path

import numpy as np
import pandas as pd

from moyal.phasespace import PhaseGrid

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.12g"
PACKAGES = ("numpy", "scipy", "sympy", "pandas", "joblib", "reportlab", "Pillow", "python-dotenv")


def git_blob_sha1(text: str) -> str:
    """Content hash as git computes it for a blob."""
    data = text.encode()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def package_versions() -> dict[str, str]:
    versions = {}
    for name in PACKAGES:
        try:
            versions[name] = metadata.version(name)
        except metadata.PackageNotFoundError:
            versions[name] = "not installed"
    return versions


def write_csv(frame: pd.DataFrame, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT)
    logger.debug("wrote %s (%d rows)", path, len(frame))
    return path


def density_frame(grid: PhaseGrid, density: np.ndarray, potential: np.ndarray | None = None) -> pd.DataFrame:
    frame = pd.DataFrame({"x_nm": grid.x * 1e9, "n_per_m2": density})
    if potential is not None:
        frame["U_eV"] = potential
    return frame


def field_frame(grid: PhaseGrid, values: np.ndarray) -> pd.DataFrame:
    x, k = np.meshgrid(grid.x * 1e9, grid.k * 1e-9, indexing="ij")
    return pd.DataFrame({"x_nm": x.ravel(), "k_per_nm": k.ravel(), "f": np.asarray(values).ravel()})


def slice_frame(grid: PhaseGrid, profiles: dict[str, np.ndarray]) -> pd.DataFrame:
    frame = pd.DataFrame({"k_per_nm": grid.k * 1e-9})
    for name, values in profiles.items():
        frame[name] = values
    return frame


def iv_frame(records) -> pd.DataFrame:
    return pd.DataFrame(
        {
            "bias_V": [r.bias for r in records],
            "J": [r.current for r in records],
            "Jdev": [r.deviation for r in records],
            "status": [r.status for r in records],
            "peak_flag": [int(r.peak_flag) for r in records],
        }
    )


class Manifest:
    """Everything needed to re-run an experiment, written as manifest.json."""

    def __init__(self, kind: str, out_dir: Path, config=None):
        self.kind = kind
        self.out_dir = Path(out_dir)
        self.config = config
        self.files: list[str] = []
        self.runs: list[dict] = []
        self.summary: dict = {}
        self.started = datetime.now(timezone.utc).isoformat()

    def add_file(self, path: Path) -> Path:
        self.files.append(str(Path(path).relative_to(self.out_dir)))
        return path

    def csv(self, frame: pd.DataFrame, name: str) -> Path:
        return self.add_file(write_csv(frame, self.out_dir / name))

    def record(self, **status) -> None:
        self.runs.append(status)

    def as_dict(self) -> dict:
        document = {
            "kind": self.kind,
            "started": self.started,
            "finished": datetime.now(timezone.utc).isoformat(),
            "packages": package_versions(),
            "runs": self.runs,
            "summary": self.summary,
            "files": sorted(self.files),
        }
        if self.config is not None:
            document["config"] = {
                "source": self.config.source,
                "sha1": git_blob_sha1(self.config.text),
                "text": self.config.text,
                "resolved": self.config.resolved(),
                "environment": self.config.environment,
            }
        return document

    def write(self) -> Path:
        self.out_dir.mkdir(parents=True, exist_ok=True)
        path = self.out_dir / "manifest.json"
        path.write_text(json.dumps(self.as_dict(), indent=2, default=_jsonable) + "\n")
        logger.info("manifest written to %s", path)
        return path


def _jsonable(value):
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, Path):
        return str(value)
    raise TypeError(f"cannot serialize {type(value).__name__}")
