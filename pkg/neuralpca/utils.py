"""
Helper functions for run folders and result files
"""

import os
import re
import csv
import json
from datetime import datetime
from typing import Dict, Any, Iterable, List, Sequence

import numpy as np

from .error_handling import NeuralPCAError, UsageError


def create_unique_run_folder(variant: str, root: str = 'runs') -> tuple:
    """Create runs/<variant>_<timestamp> for a run without an explicit --out"""
    timestamp = datetime.now().strftime('%Y%m%d_%H%M%S')
    slug = re.sub(r'[^\w-]', '', variant.lower().replace(' ', '_'))
    run_folder = os.path.join(root, f"{slug}_{timestamp}")
    os.makedirs(run_folder, exist_ok=True)
    return run_folder, timestamp


def ensure_folder(path: str) -> str:
    os.makedirs(path, exist_ok=True)
    return path


def write_csv_atomic(path: str, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> str:
    """Write header + rows to a temp file, then rename over path"""
    folder = os.path.dirname(os.path.abspath(path))
    os.makedirs(folder, exist_ok=True)
    tmp_path = f"{path}.tmp"
    with open(tmp_path, 'w', newline='') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(header)
        for row in rows:
            writer.writerow(row)
    os.replace(tmp_path, path)
    return path


def read_csv(path: str, header: Sequence[str] = None) -> List[Dict[str, str]]:
    with open(path, newline='') as f:
        reader = csv.DictReader(f)
        if header is not None and reader.fieldnames != list(header):
            raise NeuralPCAError('report', f"{path} has header {reader.fieldnames}, expected {list(header)}")
        return list(reader)


def save_run_metadata(run_folder: str, metadata: Dict[str, Any]) -> str:
    metadata_path = os.path.join(run_folder, 'run_metadata.json')
    tmp_path = f"{metadata_path}.tmp"
    with open(tmp_path, 'w') as f:
        json.dump(metadata, f, indent=2, sort_keys=True, default=str)
    os.replace(tmp_path, metadata_path)
    return metadata_path


def image_grid(images: np.ndarray, shape: Sequence[int], columns: int = 8, pad: int = 1) -> np.ndarray:
    """Tile flattened [0, 1] images into one uint8 canvas"""
    rows_px, cols_px = shape
    count = images.shape[0]
    columns = max(1, min(columns, count))
    grid_rows = -(-count // columns)
    canvas = np.zeros((grid_rows * (rows_px + pad) + pad, columns * (cols_px + pad) + pad), dtype=np.uint8)
    pixels = np.clip(np.round(np.asarray(images) * 255.0), 0, 255).astype(np.uint8)
    for i in range(count):
        r, c = divmod(i, columns)
        top = pad + r * (rows_px + pad)
        left = pad + c * (cols_px + pad)
        canvas[top:top + rows_px, left:left + cols_px] = pixels[i].reshape(rows_px, cols_px)
    return canvas


def write_pgm(path: str, canvas: np.ndarray) -> str:
    """Binary (P5) greyscale PGM"""
    canvas = np.asarray(canvas, dtype=np.uint8)
    height, width = canvas.shape
    tmp_path = f"{path}.tmp"
    with open(tmp_path, 'wb') as f:
        f.write(f"P5\n{width} {height}\n255\n".encode('ascii'))
        f.write(canvas.tobytes())
    os.replace(tmp_path, path)
    return path


def parse_int_list(text: str) -> List[int]:
    try:
        return [int(part) for part in text.split(',') if part.strip() != '']
    except ValueError:
        raise UsageError(f"expected a comma-separated integer list, got {text!r}")
