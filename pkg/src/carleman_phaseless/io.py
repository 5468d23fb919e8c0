"""Field containers, deterministic bundles, VTK and CSV export.

Binary field layout (all little-endian)::

    magic   8 bytes  b"CPFIELD1"
    R       float64
    N_x     int32
    ncomp   int32    components per node
    cplx    uint8    1 if complex (payload interleaves re, im)
    ndim    uint8    number of spatial axes
    dims    ndim * int32
    payload float64, node-major lexicographic order, components innermost

Arrays are passed component-first, ``(C,) + spatial`` or just ``spatial``
with ``ncomp=1``.
"""
from __future__ import annotations

import hashlib
import io
import json
import struct
import zipfile
from pathlib import Path

import numpy as np

from .grid import Grid3D

MAGIC = b"CPFIELD1"
ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)


def field_to_bytes(arr: np.ndarray, R: float, n: int, spatial_ndim: int | None = None) -> bytes:
    arr = np.asarray(arr)
    if spatial_ndim is None:
        spatial_ndim = min(arr.ndim, 3)
    spatial = arr.shape[arr.ndim - spatial_ndim:]
    comp = arr.shape[: arr.ndim - spatial_ndim]
    ncomp = int(np.prod(comp)) if comp else 1
    cplx = np.iscomplexobj(arr)
    a = arr.reshape((ncomp,) + spatial)
    a = np.moveaxis(a, 0, -1)  # node-major, components innermost
    if cplx:
        a = np.stack([a.real, a.imag], axis=-1)
    head = MAGIC + struct.pack("<diiBB", float(R), int(n), ncomp, int(cplx), len(spatial))
    head += struct.pack("<" + "i" * len(spatial), *spatial)
    return head + np.ascontiguousarray(a, dtype="<f8").tobytes()


def field_from_bytes(buf: bytes) -> tuple[np.ndarray, dict]:
    """Inverse of :func:`field_to_bytes`; returns ``(array, header)``.

    The array is ``(ncomp,) + dims`` when ``ncomp > 1``, else ``dims``.
    """
    if buf[:8] != MAGIC:
        raise ValueError("not a field container")
    R, n, ncomp, cplx, ndim = struct.unpack_from("<diiBB", buf, 8)
    off = 8 + struct.calcsize("<diiBB")
    dims = struct.unpack_from("<" + "i" * ndim, buf, off)
    off += 4 * ndim
    a = np.frombuffer(buf, dtype="<f8", offset=off).astype(float)
    shape = tuple(dims) + (ncomp,) + ((2,) if cplx else ())
    if a.size != int(np.prod(shape)):
        raise ValueError("payload size does not match header")
    a = a.reshape(shape)
    if cplx:
        a = a[..., 0] + 1j * a[..., 1]
    a = np.moveaxis(a, -1, 0)
    if ncomp == 1:
        a = a[0]
    return a, {"R": R, "N_x": n, "components": ncomp, "complex": bool(cplx), "dims": list(dims)}


def write_field(path, arr: np.ndarray, R: float, n: int, spatial_ndim: int | None = None) -> None:
    Path(path).write_bytes(field_to_bytes(arr, R, n, spatial_ndim))


def read_field(path) -> tuple[np.ndarray, dict]:
    return field_from_bytes(Path(path).read_bytes())


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, allow_nan=True) + "\n"


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:16]


def _zinfo(name: str) -> zipfile.ZipInfo:
    zi = zipfile.ZipInfo(name, date_time=ZIP_EPOCH)
    zi.compress_type = zipfile.ZIP_DEFLATED
    zi.external_attr = 0o644 << 16
    zi.create_system = 3
    return zi


def write_bundle(path, manifest: dict, fields: dict | None = None, docs: dict | None = None) -> None:
    """Zip archive with ``manifest.json``, ``<name>.cpf`` fields and ``<name>.json`` documents.

    ``fields`` maps names to ``(array, R, N_x)`` or ``(array, R, N_x, spatial_ndim)``.
    Entry order and timestamps are fixed, so equal inputs give identical bytes.
    """
    fields = fields or {}
    docs = docs or {}
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w") as zf:
        zf.writestr(_zinfo("manifest.json"), canonical_json(manifest))
        for name in sorted(fields):
            zf.writestr(_zinfo(f"{name}.cpf"), field_to_bytes(*fields[name]))
        for name in sorted(docs):
            zf.writestr(_zinfo(f"{name}.json"), canonical_json(docs[name]))
    Path(path).write_bytes(buf.getvalue())


def read_bundle(path) -> tuple[dict, dict, dict]:
    """Returns ``(manifest, fields, docs)``; fields map names to arrays."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"expected bundle {path} is missing; run the upstream stage first")
    fields, docs = {}, {}
    with zipfile.ZipFile(path) as zf:
        manifest = json.loads(zf.read("manifest.json"))
        for name in zf.namelist():
            if name.endswith(".cpf"):
                fields[name[:-4]] = field_from_bytes(zf.read(name))[0]
            elif name.endswith(".json") and name != "manifest.json":
                docs[name[:-5]] = json.loads(zf.read(name))
    return manifest, fields, docs


def write_vtk(path, values: np.ndarray, grid: Grid3D, name: str = "c") -> None:
    """Legacy ASCII VTK structured points, x varying fastest."""
    n = grid.n
    lines = [
        "# vtk DataFile Version 3.0",
        name,
        "ASCII",
        "DATASET STRUCTURED_POINTS",
        f"DIMENSIONS {n} {n} {n}",
        f"ORIGIN {-float(grid.R)!r} {-float(grid.R)!r} {-float(grid.R)!r}",
        f"SPACING {float(grid.h)!r} {float(grid.h)!r} {float(grid.h)!r}",
        f"POINT_DATA {n ** 3}",
        f"SCALARS {name} double 1",
        "LOOKUP_TABLE default",
    ]
    flat = np.asarray(values, dtype=float).ravel(order="F")
    lines += [" ".join(f"{v:.17g}" for v in flat[s:s + 9]) for s in range(0, flat.size, 9)]
    Path(path).write_text("\n".join(lines) + "\n")


def read_vtk(path) -> tuple[np.ndarray, dict]:
    text = Path(path).read_text().split("\n")
    meta = {}
    for ln in text[:10]:
        parts = ln.split()
        if parts and parts[0] in ("DIMENSIONS", "ORIGIN", "SPACING"):
            meta[parts[0].lower()] = [float(p) for p in parts[1:]]
    dims = [int(d) for d in meta["dimensions"]]
    vals = np.array(" ".join(text[10:]).split(), dtype=float)
    return vals.reshape(dims, order="F"), meta


def write_csv_slice(path, values: np.ndarray, grid: Grid3D, z: float = -0.65) -> float:
    """Nodes of the layer closest to ``z`` as ``x,y,z,value`` rows; returns the layer height."""
    t = int(np.argmin(np.abs(grid.coords - z)))
    zt = float(grid.coords[t])
    rows = ["x,y,z,value"]
    for i, x in enumerate(grid.coords):
        for j, y in enumerate(grid.coords):
            rows.append(f"{float(x)!r},{float(y)!r},{zt!r},{float(values[i, j, t])!r}")
    Path(path).write_text("\n".join(rows) + "\n")
    return zt
