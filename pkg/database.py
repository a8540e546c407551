"""
Database module for fracgp
Handles every file read and write: site/value CSVs, time series, densities,
result tables, reports and manifests.
"""

import json
import logging
import platform
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import scipy

from services.errors import DataError

logger = logging.getLogger(__name__)

# Output configuration
OUTPUT_ROOT = 'runs'

SITE_COLUMNS = {1: ['x', 'y'], 2: ['x1', 'x2', 'y']}
SERIES_COLUMNS = ['t', 'value']
FLOAT_FORMAT = '%.17g'


def get_output_dir(output_dir: str) -> Path:
    """Resolve a run directory (relative paths live under OUTPUT_ROOT) and create it."""
    path = Path(output_dir)
    if not path.is_absolute():
        path = Path(OUTPUT_ROOT) / path
    path.mkdir(parents=True, exist_ok=True)
    return path


def _read_csv(path) -> pd.DataFrame:
    try:
        frame = pd.read_csv(path, encoding='utf-8', float_precision='round_trip')
    except FileNotFoundError:
        raise DataError(f"Data file not found: {path}") from None
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as exc:
        raise DataError(f"Could not parse {path}: {exc}") from None
    if frame.empty:
        raise DataError(f"{path} has a header but no rows.")
    return frame


def _numeric_columns(frame: pd.DataFrame, columns: Sequence[str], path) -> np.ndarray:
    missing = [c for c in columns if c not in frame.columns]
    if missing:
        raise DataError(f"{path} is missing column(s) {', '.join(missing)}; found {', '.join(frame.columns)}.")
    values = frame[list(columns)].apply(pd.to_numeric, errors='coerce')
    bad = values.isna().any(axis=1)
    if bad.any():
        row = int(np.argmax(bad.to_numpy()))
        raise DataError(f"{path} row {row + 2} has a missing or non-numeric value.")
    data = values.to_numpy(dtype=float)
    if not np.all(np.isfinite(data)):
        raise DataError(f"{path} contains non-finite values.")
    return data


def get_site_values(path, dim: int) -> Tuple[np.ndarray, np.ndarray]:
    """Read an `x,y` (1D) or `x1,x2,y` (2D) CSV."""
    data = _numeric_columns(_read_csv(path), SITE_COLUMNS[dim], path)
    sites = data[:, 0] if dim == 1 else data[:, :2]
    return sites, data[:, -1]


def get_series(path) -> Tuple[np.ndarray, np.ndarray]:
    """Read a `t,value` CSV. A lone `value` column is indexed 1..n."""
    frame = _read_csv(path)
    if 't' in frame.columns:
        data = _numeric_columns(frame, SERIES_COLUMNS, path)
        return data[:, 0], data[:, 1]
    values = _numeric_columns(frame, ['value'], path)[:, 0]
    return np.arange(1, len(values) + 1, dtype=float), values


def insert_site_values(path, sites, values) -> Path:
    sites = np.asarray(sites, dtype=float)
    columns = SITE_COLUMNS[1 if sites.ndim == 1 else 2]
    data = np.column_stack([sites, values])
    return _write_frame(path, pd.DataFrame(data, columns=columns))


def insert_series(path, t, values) -> Path:
    return _write_frame(path, pd.DataFrame({'t': t, 'value': values}))


def insert_density(path, centers, density) -> Path:
    return _write_frame(path, pd.DataFrame({'center': centers, 'density': density}))


def insert_posterior(path, sites, mean, std, noise_band) -> Path:
    """Tidy posterior grid: sites, mean, std and the noise band half-width."""
    sites = np.asarray(sites, dtype=float)
    if sites.ndim == 1:
        frame = pd.DataFrame({'x': sites})
    else:
        frame = pd.DataFrame({'x1': sites[:, 0], 'x2': sites[:, 1]})
    frame['mean'] = mean
    frame['std'] = std
    frame['noise_band'] = noise_band
    return _write_frame(path, frame)


def insert_table(path, rows: List[Dict]) -> Path:
    return _write_frame(path, pd.DataFrame(rows))


def insert_paths(path, paths: np.ndarray) -> Path:
    """One column per sample path, indexed by step."""
    frame = pd.DataFrame(paths.T, columns=[f"path_{i + 1}" for i in range(paths.shape[0])])
    frame.insert(0, 'step', np.arange(paths.shape[1]))
    return _write_frame(path, frame)


def _write_frame(path, frame: pd.DataFrame) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, encoding='utf-8')
    logger.info("Wrote %s (%d rows)", path, len(frame))
    return path


def insert_json(path, payload: Dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding='utf-8')
    logger.info("Wrote %s", path)
    return path


def get_json(path) -> Dict:
    return json.loads(Path(path).read_text(encoding='utf-8'))


def insert_manifest(output_dir: Path, digest: str, seed: int, mode: str,
                    config: Dict, extra: Optional[Dict] = None) -> Path:
    """Everything needed to re-run: config, digest, seed and library versions."""
    manifest = {
        'mode': mode,
        'config_digest': digest,
        'seed': seed,
        'config': config,
        'versions': {
            'python': platform.python_version(),
            'numpy': np.__version__,
            'scipy': scipy.__version__,
            'pandas': pd.__version__,
        },
        'created': datetime.now(timezone.utc).isoformat(timespec='seconds'),
    }
    manifest.update(extra or {})
    return insert_json(Path(output_dir) / 'manifest.json', manifest)
