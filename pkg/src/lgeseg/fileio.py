"""Readers and writers for images, transforms, grids and contours.

Images are PGM (P2 ASCII or P5 binary, 8- or 16-bit big-endian) with an
optional ``<name>.meta`` sidecar holding ``spacing_x=`` / ``spacing_y=``
lines. All writers go through a temp file and an atomic rename.
"""

from __future__ import annotations

import os
import re
import tempfile
from pathlib import Path

import numpy as np

from .affinereg import AffineTransform2D
from .contour import Contour, ContourPair
from .ffdreg import FFDGrid
from .imagecore import Image2D


class FormatError(ValueError):
    pass


def atomic_write(path, data: bytes | str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode("utf-8")
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def meta_path(path) -> Path:
    path = Path(path)
    return path.with_suffix(".meta")


_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def _header_tokens(buf: bytes, count: int) -> tuple[list[bytes], int]:
    tokens, pos = [], 2
    for _ in range(count):
        m = _TOKEN.match(buf, pos)
        if not m:
            raise FormatError("truncated PGM header")
        tokens.append(m.group(1))
        pos = m.end()
    return tokens, pos


def read_pgm(path) -> Image2D:
    """Load a PGM image and its spacing sidecar (defaults 1.0 mm/pixel)."""
    path = Path(path)
    buf = path.read_bytes()
    magic = buf[:2]
    if magic not in (b"P2", b"P5"):
        raise FormatError(f"{path}: not a PGM file (magic {magic!r})")
    tokens, pos = _header_tokens(buf, 3)
    try:
        w, h, maxval = (int(t) for t in tokens)
    except ValueError as exc:
        raise FormatError(f"{path}: malformed PGM dimension line {tokens!r}") from exc
    if w <= 0 or h <= 0 or not 0 < maxval < 65536:
        raise FormatError(f"{path}: invalid PGM dimensions {w}x{h} or maxval {maxval}")
    if magic == b"P5":
        # exactly one whitespace byte separates header and raster
        pos += 1
        dtype = np.dtype(">u1") if maxval < 256 else np.dtype(">u2")
        need = w * h * dtype.itemsize
        raster = buf[pos : pos + need]
        if len(raster) < need:
            raise FormatError(f"{path}: truncated PGM payload ({len(raster)} of {need} bytes)")
        data = np.frombuffer(raster, dtype=dtype).reshape(h, w).astype(np.float64)
    else:
        body = re.sub(rb"#[^\n]*", b"", buf[pos:]).split()
        if len(body) < w * h:
            raise FormatError(f"{path}: truncated PGM payload ({len(body)} of {w * h} values)")
        try:
            data = np.array([int(v) for v in body[: w * h]], dtype=np.float64).reshape(h, w)
        except ValueError as exc:
            raise FormatError(f"{path}: non-integer PGM sample") from exc
    if np.any(data > maxval):
        raise FormatError(f"{path}: sample exceeds maxval {maxval}")
    sx, sy = read_spacing(meta_path(path))
    return Image2D(data, sx, sy)


def read_spacing(path) -> tuple[float, float]:
    path = Path(path)
    if not path.exists():
        return 1.0, 1.0
    vals = {}
    for ln in path.read_text().splitlines():
        ln = ln.strip()
        if not ln or ln.startswith("#"):
            continue
        key, sep, value = ln.partition("=")
        if not sep:
            raise FormatError(f"{path}: expected key=value, got {ln!r}")
        try:
            vals[key.strip()] = float(value)
        except ValueError as exc:
            raise FormatError(f"{path}: bad number in {ln!r}") from exc
    sx, sy = vals.get("spacing_x", 1.0), vals.get("spacing_y", 1.0)
    if not (sx > 0 and sy > 0):
        raise FormatError(f"{path}: spacings must be positive")
    return sx, sy


def write_pgm(path, img: Image2D, binary: bool = True) -> None:
    """Write ``img`` rounded and clipped to [0, 65535]; 8-bit when it fits."""
    path = Path(path)
    q = np.clip(np.rint(img.data), 0, 65535).astype(np.int64)
    maxval = 255 if q.max() <= 255 else 65535
    h, w = q.shape
    if binary:
        dtype = ">u1" if maxval == 255 else ">u2"
        payload = f"P5\n{w} {h}\n{maxval}\n".encode() + q.astype(dtype).tobytes()
    else:
        rows = "\n".join(" ".join(str(v) for v in row) for row in q)
        payload = f"P2\n{w} {h}\n{maxval}\n{rows}\n"
    atomic_write(path, payload)
    atomic_write(meta_path(path), f"spacing_x={img.spacing_x!r}\nspacing_y={img.spacing_y!r}\n")


def read_affine(path) -> AffineTransform2D:
    try:
        return AffineTransform2D.from_text(Path(path).read_text())
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc


def write_affine(path, A: AffineTransform2D) -> None:
    atomic_write(path, A.to_text())


def read_grid(path) -> FFDGrid:
    try:
        return FFDGrid.from_text(Path(path).read_text())
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc


def write_grid(path, grid: FFDGrid) -> None:
    atomic_write(path, grid.to_text())


def read_contour(path) -> Contour:
    try:
        return Contour.from_text(Path(path).read_text())
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc


def write_contour(path, contour: Contour) -> None:
    atomic_write(path, contour.to_text())


def write_pair(directory, endo: Contour, epi: Contour, stem: str = "") -> Path:
    """Write ``<stem>endo.ctr``, ``<stem>epi.ctr`` and a ``<stem>pair.meta`` naming them."""
    directory = Path(directory)
    endo_name, epi_name = f"{stem}endo.ctr", f"{stem}epi.ctr"
    write_contour(directory / endo_name, endo)
    write_contour(directory / epi_name, epi)
    meta = directory / f"{stem}pair.meta"
    atomic_write(meta, f"endo={endo_name}\nepi={epi_name}\n")
    return meta


def read_pair(path) -> ContourPair:
    """Load a contour pair from a ``pair.meta`` file or a directory holding one."""
    path = Path(path)
    if path.is_dir():
        path = path / "pair.meta"
    if not path.exists():
        raise FormatError(f"{path}: pair metadata not found")
    names = {}
    for ln in path.read_text().splitlines():
        if ln.strip():
            key, _, value = ln.partition("=")
            names[key.strip()] = value.strip()
    if "endo" not in names or "epi" not in names:
        raise FormatError(f"{path}: pair.meta must name 'endo' and 'epi' files")
    endo = read_contour(path.parent / names["endo"])
    epi = read_contour(path.parent / names["epi"])
    return ContourPair.from_contours(endo, epi)
