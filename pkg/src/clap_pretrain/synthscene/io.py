"""Plain-file exports: ASCII PLY, binary PPM, CSV."""
from __future__ import annotations

import csv
import re
from pathlib import Path

import numpy as np


def write_ply(path, xyz: np.ndarray, scalars: dict | None = None, rgb: np.ndarray | None = None) -> None:
    """ASCII PLY with float scalar properties and optional uchar colours in [0, 1]."""
    scalars = scalars or {}
    n = xyz.shape[0]
    lines = ["ply", "format ascii 1.0", f"element vertex {n}",
             "property float x", "property float y", "property float z"]
    lines += [f"property float {name}" for name in scalars]
    if rgb is not None:
        lines += ["property uchar red", "property uchar green", "property uchar blue"]
    lines.append("end_header")
    cols = [xyz] + [np.asarray(v, dtype=np.float64).reshape(n, 1) for v in scalars.values()]
    body = np.concatenate(cols, axis=1) if cols else np.zeros((n, 0))
    color = None if rgb is None else np.clip(np.round(np.asarray(rgb) * 255), 0, 255).astype(int)
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
        for i in range(n):
            row = " ".join(repr(float(v)) for v in body[i])
            if color is not None:
                row += " " + " ".join(str(c) for c in color[i])
            fh.write(row + "\n")


def read_ply(path) -> dict:
    """Parse an ASCII PLY written by :func:`write_ply` into column arrays."""
    with open(path) as fh:
        names = []
        n = 0
        for line in fh:
            line = line.strip()
            if line.startswith("element vertex"):
                n = int(line.split()[-1])
            elif line.startswith("property"):
                names.append(line.split()[-1])
            elif line == "end_header":
                break
        data = np.loadtxt(fh, ndmin=2) if n else np.zeros((0, len(names)))
    return {name: data[:, k] for k, name in enumerate(names)}


def write_ppm(path, image: np.ndarray) -> None:
    """Binary P6 from a float image in [0, 1]."""
    img = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    h, w = img.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    m = re.match(rb"P6\s+(\d+)\s+(\d+)\s+(\d+)\s", raw)
    if m is None:
        raise ValueError("not a binary PPM")
    w, h = int(m.group(1)), int(m.group(2))
    pix = np.frombuffer(raw, dtype=np.uint8, count=w * h * 3, offset=m.end())
    return pix.reshape(h, w, 3).astype(np.float64) / 255.0


def write_csv(path, header: list, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


def heat_colors(values: np.ndarray) -> np.ndarray:
    """Blue (low) to red (high) colour ramp over the value range."""
    v = np.asarray(values, dtype=np.float64)
    span = v.max() - v.min() if v.size else 0.0
    t = (v - v.min()) / span if span > 0 else np.zeros_like(v)
    return np.stack([t, 0.2 * (1 - np.abs(2 * t - 1)), 1 - t], axis=-1)
