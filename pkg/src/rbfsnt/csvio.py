"""CSV and PGM writers with byte-stable number formatting."""
import csv
import math
import re

import numpy as np


def fmt(value):
    """Shortest decimal that round-trips (at most 17 significant digits)."""
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        v = float(value)
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return repr(v)
    return str(value)


def write_csv(path, header, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])


def read_csv(path):
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    return rows[0], rows[1:]


def write_vectors_csv(path, vectors, prefix="v", extra=None):
    """One row per vector; ``extra`` maps column name -> per-row values, placed first."""
    vectors = np.asarray(vectors)
    extra = extra or {}
    dim = vectors.shape[1] if vectors.ndim == 2 else 0
    header = list(extra) + [f"{prefix}{i}" for i in range(dim)]
    rows = ([extra[k][i] for k in extra] + list(vectors[i]) for i in range(len(vectors)))
    write_csv(path, header, rows)


def read_vectors_csv(path, prefix="v"):
    header, rows = read_csv(path)
    cols = [i for i, h in enumerate(header) if h.startswith(prefix) and h[len(prefix):].isdigit()]
    return np.array([[float(r[i]) for i in cols] for r in rows]).reshape(len(rows), len(cols))


def write_pgm(path, image):
    """Binary PGM (P5, maxval 255) from a [0, 1] image."""
    img = np.clip(np.asarray(image, dtype=np.float64), 0, 1)
    data = np.round(img * 255).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def read_pgm(path):
    with open(path, "rb") as f:
        raw = f.read()
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", raw)
    if m is None:
        raise ValueError("not a binary PGM")
    w, h, maxval = (int(g) for g in m.groups())
    data = np.frombuffer(raw, dtype=np.uint8, count=w * h, offset=m.end()).reshape(h, w)
    return data.astype(np.float64) / maxval
