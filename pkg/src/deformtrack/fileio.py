"""File formats: PLY surfaces, PFM/CSV depth maps, JSON matches and reports.

All writers are deterministic (fixed field order, repr floats, trailing
newline) so identical runs produce identical bytes. PLY vertices are written
as doubles; readers accept float or double, ascii or binary little-endian.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .exceptions import FileFormatError
from .matching import MatchSet

_PLY_PROPS = ("x", "y", "z", "nx", "ny", "nz")
_PLY_TYPES = {"float": "<f4", "float32": "<f4", "double": "<f8", "float64": "<f8"}


def write_ply(
    path: str | Path,
    points: np.ndarray,
    normals: np.ndarray | None = None,
    binary: bool = False,
) -> None:
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    props = list(_PLY_PROPS if normals is not None else _PLY_PROPS[:3])
    data = points
    if normals is not None:
        normals = np.asarray(normals, dtype=np.float64).reshape(-1, 3)
        if normals.shape != points.shape:
            raise ValueError("normals must match points shape")
        data = np.hstack([points, normals])
    fmt = "binary_little_endian" if binary else "ascii"
    header = ["ply", f"format {fmt} 1.0", f"element vertex {points.shape[0]}"]
    header += [f"property double {p}" for p in props]
    header.append("end_header")
    path = Path(path)
    with path.open("wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            fh.write(data.astype("<f8").tobytes())
        else:
            lines = "\n".join(
                " ".join(repr(v) for v in row) for row in data.tolist()
            )
            fh.write((lines + "\n").encode("ascii") if lines else b"")


def read_ply(path: str | Path) -> tuple[np.ndarray, np.ndarray | None]:
    """Returns (points, normals-or-None). Raises FileFormatError on bad input."""
    path = Path(path)
    raw = path.read_bytes()
    try:
        end = raw.index(b"end_header\n")
    except ValueError:
        raise FileFormatError(f"{path}: missing end_header") from None
    header = raw[:end].decode("ascii", errors="replace").splitlines()
    body = raw[end + len(b"end_header\n"):]
    if not header or header[0].strip() != "ply":
        raise FileFormatError(f"{path}: not a PLY file (missing magic)")
    fmt = None
    n_vertex = None
    props: list[tuple[str, str]] = []
    in_vertex = False
    for line in header[1:]:
        tok = line.strip().split()
        if not tok or tok[0] == "comment":
            continue
        if tok[0] == "format":
            fmt = tok[1]
        elif tok[0] == "element":
            in_vertex = tok[1] == "vertex"
            if in_vertex:
                n_vertex = int(tok[2])
        elif tok[0] == "property" and in_vertex:
            if tok[1] == "list":
                raise FileFormatError(f"{path}: list property in vertex element")
            if tok[1] not in _PLY_TYPES:
                raise FileFormatError(
                    f"{path}: unsupported vertex property type {tok[1]!r}"
                )
            props.append((tok[2], _PLY_TYPES[tok[1]]))
    if fmt not in ("ascii", "binary_little_endian"):
        raise FileFormatError(f"{path}: unsupported format {fmt!r}")
    if n_vertex is None:
        raise FileFormatError(f"{path}: no vertex element")
    names = [name for name, _ in props]
    for axis in ("x", "y", "z"):
        if axis not in names:
            raise FileFormatError(f"{path}: vertex property {axis!r} missing")
    if fmt == "ascii":
        text = body.decode("ascii", errors="replace").split()
        need = n_vertex * len(props)
        if len(text) < need:
            raise FileFormatError(
                f"{path}: expected {need} vertex values, found {len(text)}"
            )
        try:
            table = np.array(text[:need], dtype=np.float64).reshape(n_vertex, len(props))
        except ValueError as exc:
            raise FileFormatError(f"{path}: non-numeric vertex data ({exc})") from None
        cols = {name: table[:, i] for i, (name, _) in enumerate(props)}
    else:
        dtype = np.dtype([(name, kind) for name, kind in props])
        need = n_vertex * dtype.itemsize
        if len(body) < need:
            raise FileFormatError(
                f"{path}: expected {need} bytes of vertex data, found {len(body)}"
            )
        rec = np.frombuffer(body[:need], dtype=dtype)
        cols = {name: rec[name].astype(np.float64) for name, _ in props}
    points = np.stack([cols["x"], cols["y"], cols["z"]], axis=1)
    normals = None
    if all(k in cols for k in ("nx", "ny", "nz")):
        normals = np.stack([cols["nx"], cols["ny"], cols["nz"]], axis=1)
    return points, normals


def write_pfm(path: str | Path, array: np.ndarray) -> None:
    """Grayscale PFM, little-endian (negative scale), rows bottom-up."""
    array = np.asarray(array, dtype=np.float32)
    if array.ndim != 2:
        raise ValueError("PFM writer expects a 2-D array")
    h, w = array.shape
    with Path(path).open("wb") as fh:
        fh.write(f"Pf\n{w} {h}\n-1.0\n".encode("ascii"))
        fh.write(array[::-1].astype("<f4").tobytes())


def read_pfm(path: str | Path) -> np.ndarray:
    path = Path(path)
    raw = path.read_bytes()
    parts = raw.split(b"\n", 3)
    if len(parts) < 4 or parts[0].strip() not in (b"Pf", b"PF"):
        raise FileFormatError(f"{path}: not a PFM file")
    if parts[0].strip() == b"PF":
        raise FileFormatError(f"{path}: color PFM not supported (field: magic)")
    try:
        w, h = (int(t) for t in parts[1].split())
        scale = float(parts[2])
    except ValueError:
        raise FileFormatError(f"{path}: malformed PFM dimensions/scale") from None
    endian = "<f4" if scale < 0 else ">f4"
    body = parts[3]
    need = w * h * 4
    if len(body) < need:
        raise FileFormatError(f"{path}: expected {need} pixel bytes, found {len(body)}")
    img = np.frombuffer(body[:need], dtype=endian).reshape(h, w)
    return img[::-1].astype(np.float64)


def write_depth_csv(path: str | Path, array: np.ndarray) -> None:
    np.savetxt(path, np.asarray(array, dtype=np.float64), fmt="%.17g", delimiter=",")


def read_depth_csv(path: str | Path) -> np.ndarray:
    try:
        out = np.loadtxt(path, delimiter=",", dtype=np.float64, ndmin=2)
    except ValueError as exc:
        raise FileFormatError(f"{path}: malformed depth CSV ({exc})") from None
    return out


def read_depth(path: str | Path) -> np.ndarray:
    """Dispatch on extension: .pfm or .csv."""
    path = Path(path)
    if path.suffix.lower() == ".pfm":
        return read_pfm(path)
    if path.suffix.lower() == ".csv":
        return read_depth_csv(path)
    raise FileFormatError(f"{path}: unknown depth format {path.suffix!r}")


def write_json(path: str | Path, payload: dict) -> None:
    with Path(path).open("w", encoding="ascii") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_json(path: str | Path) -> dict:
    path = Path(path)
    try:
        with path.open("r", encoding="utf-8") as fh:
            out = json.load(fh)
    except json.JSONDecodeError as exc:
        raise FileFormatError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(out, dict):
        raise FileFormatError(f"{path}: top-level JSON value must be an object")
    return out


def write_matches(path: str | Path, matches: MatchSet) -> None:
    """Matches as a JSON array of records, one per match."""
    records = [
        {
            "template_point": matches.template_points[i].tolist(),
            "observed_point": matches.observed_points[i].tolist(),
            "weight": float(matches.weights[i]),
            "preselected": bool(matches.preselected[i]),
        }
        for i in range(len(matches))
    ]
    with Path(path).open("w", encoding="ascii") as fh:
        json.dump(records, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_matches(path: str | Path) -> MatchSet:
    path = Path(path)
    try:
        with path.open("r", encoding="utf-8") as fh:
            records = json.load(fh)
    except json.JSONDecodeError as exc:
        raise FileFormatError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(records, list):
        raise FileFormatError(f"{path}: matches JSON must be an array of records")
    tpl, obs, weights, flags = [], [], [], []
    for i, rec in enumerate(records):
        if not isinstance(rec, dict):
            raise FileFormatError(f"{path}: match {i} is not an object")
        for key in ("template_point", "observed_point"):
            if key not in rec:
                raise FileFormatError(f"{path}: match {i} missing field {key!r}")
            if not isinstance(rec[key], list) or len(rec[key]) != 3:
                raise FileFormatError(f"{path}: match {i} field {key!r} must be [x, y, z]")
        tpl.append(rec["template_point"])
        obs.append(rec["observed_point"])
        weights.append(float(rec.get("weight", 1.0)))
        flags.append(bool(rec.get("preselected", False)))
    n = len(records)
    return MatchSet(
        np.asarray(tpl, dtype=np.float64).reshape(n, 3),
        np.asarray(obs, dtype=np.float64).reshape(n, 3),
        np.asarray(weights, dtype=np.float64),
        np.asarray(flags, dtype=bool),
    )


def write_metrics_csv(path: str | Path, rows: list[dict]) -> None:
    """Frame metric rows plus an 'aggregate' row (RMS of rmse, means of rest)."""
    fields = ["frame", "rmse_mm", "mean_mm", "max_mm", "std_mm"]
    with Path(path).open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(row[k]) if k != "frame" else row[k] for k in fields})
        if rows:
            agg = {
                "frame": "aggregate",
                "rmse_mm": repr(float(np.sqrt(np.mean([r["rmse_mm"] ** 2 for r in rows])))),
                "mean_mm": repr(float(np.mean([r["mean_mm"] for r in rows]))),
                "max_mm": repr(float(np.max([r["max_mm"] for r in rows]))),
                "std_mm": repr(float(np.mean([r["std_mm"] for r in rows]))),
            }
            writer.writerow(agg)


__all__ = [
    "write_ply",
    "read_ply",
    "write_pfm",
    "read_pfm",
    "write_depth_csv",
    "read_depth_csv",
    "read_depth",
    "write_json",
    "read_json",
    "write_matches",
    "read_matches",
    "write_metrics_csv",
]
