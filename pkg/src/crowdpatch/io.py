"""On-disk formats.

PCT1 tensor: b"PCT1", u32 LE rank, rank x u32 LE dims, float64 LE payload
(row-major). Annotation files hold one ``row<TAB>col`` line per point and a
final ``count<TAB>N`` line. A dataset directory has an ``index.txt`` with one
record basename per line (``#`` lines are metadata).

PCM1 model checkpoint and PCP1 patch file: the 4-byte magic, a ``key=value``
text header terminated by a blank line, then a sequence of PCT1 tensors.
"""
from __future__ import annotations

import os
import struct
from pathlib import Path
from typing import BinaryIO, Iterable

import numpy as np

from .scenes import Scene

TENSOR_MAGIC = b"PCT1"
MODEL_MAGIC = b"PCM1"
PATCH_MAGIC = b"PCP1"
INDEX_NAME = "index.txt"


class FormatError(ValueError):
    def __init__(self, path, offset: int, msg: str):
        super().__init__(f"{path}: byte {offset}: {msg}")
        self.path = path
        self.offset = offset


# ---------------------------------------------------------------- tensors

def _tensor_bytes(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr, dtype="<f8", order="C")  # ascontiguousarray would promote 0-d to 1-d
    head = TENSOR_MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.tobytes()


def _read_exact(fh: BinaryIO, n: int, path, what: str) -> bytes:
    off = fh.tell()
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError(path, off, f"truncated {what}: wanted {n} bytes, got {len(buf)}")
    return buf


def _read_tensor(fh: BinaryIO, path) -> np.ndarray:
    off = fh.tell()
    magic = _read_exact(fh, 4, path, "magic")
    if magic != TENSOR_MAGIC:
        raise FormatError(path, off, f"bad tensor magic {magic!r}, expected {TENSOR_MAGIC!r}")
    (rank,) = struct.unpack("<I", _read_exact(fh, 4, path, "rank"))
    if rank > 8:
        raise FormatError(path, off + 4, f"implausible rank {rank}")
    dims = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank, path, "dims"))
    size = int(np.prod(dims, dtype=np.int64)) if rank else 1
    payload = _read_exact(fh, 8 * size, path, "payload")
    return np.frombuffer(payload, dtype="<f8").reshape(dims).astype(np.float64)


def write_tensor(path, arr: np.ndarray) -> None:
    Path(path).write_bytes(_tensor_bytes(arr))


def read_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        arr = _read_tensor(fh, path)
        if fh.read(1):
            raise FormatError(path, fh.tell() - 1, "trailing bytes after tensor payload")
    return arr


# ---------------------------------------------------------------- annotations

def write_points(path, points: np.ndarray) -> None:
    points = np.asarray(points, float).reshape(-1, 2)
    lines = [f"{r!r}\t{c!r}" for r, c in points.tolist()]
    lines.append(f"count\t{len(points)}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_points(path) -> np.ndarray:
    rows = []
    offset = 0
    count = None
    for line in Path(path).read_text().splitlines(keepends=True):
        fields = line.rstrip("\n").split("\t")
        if count is not None:
            raise FormatError(path, offset, "data after the count line")
        if fields[0] == "count":
            if len(fields) != 2 or not fields[1].isdigit():
                raise FormatError(path, offset, f"malformed count line {line!r}")
            count = int(fields[1])
        else:
            try:
                r, c = (float(v) for v in fields)
            except ValueError:
                raise FormatError(path, offset, f"malformed point line {line!r}") from None
            rows.append((r, c))
        offset += len(line.encode())
    if count is None:
        raise FormatError(path, offset, "missing count line")
    if count != len(rows):
        raise FormatError(path, offset, f"count line says {count} but {len(rows)} points listed")
    return np.array(rows, dtype=float).reshape(-1, 2)


# ---------------------------------------------------------------- datasets

def write_dataset(path, scenes: Iterable[Scene], meta: dict | None = None) -> None:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    names = []
    for i, sc in enumerate(scenes):
        name = f"scene_{i:05d}"
        write_tensor(root / f"{name}.img.pct", sc.image)
        write_tensor(root / f"{name}.den.pct", sc.density)
        write_points(root / f"{name}.pts.txt", sc.points)
        (root / f"{name}.seed.txt").write_text(f"{sc.seed}\n")
        names.append(name)
    header = [f"# {k}={v}" for k, v in (meta or {}).items()]
    (root / INDEX_NAME).write_text("".join(line + "\n" for line in header + names))


def read_index(path) -> tuple[list[str], dict[str, str]]:
    names, meta = [], {}
    for line in (Path(path) / INDEX_NAME).read_text().splitlines():
        if line.startswith("#"):
            key, _, val = line[1:].strip().partition("=")
            meta[key] = val
        elif line.strip():
            names.append(line.strip())
    return names, meta


def read_dataset(path) -> list[Scene]:
    root = Path(path)
    names, _ = read_index(root)
    out = []
    for name in names:
        seed_file = root / f"{name}.seed.txt"
        seed = int(seed_file.read_text()) if seed_file.exists() else 0
        out.append(Scene(
            read_tensor(root / f"{name}.img.pct"),
            read_points(root / f"{name}.pts.txt"),
            read_tensor(root / f"{name}.den.pct"),
            seed,
        ))
    return out


# ---------------------------------------------------------------- header + tensors containers

def write_container(path, magic: bytes, header: dict, tensors: list[np.ndarray]) -> None:
    text = "".join(f"{k}={v}\n" for k, v in header.items()) + "\n"
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(text.encode())
        for t in tensors:
            fh.write(_tensor_bytes(t))


def read_container(path, magic: bytes) -> tuple[dict[str, str], list[np.ndarray]]:
    size = os.path.getsize(path)
    with open(path, "rb") as fh:
        got = _read_exact(fh, 4, path, "magic")
        if got != magic:
            raise FormatError(path, 0, f"bad magic {got!r}, expected {magic!r}")
        header = {}
        while True:
            off = fh.tell()
            line = fh.readline()
            if not line.endswith(b"\n"):
                raise FormatError(path, off, "header not terminated by a blank line")
            if line == b"\n":
                break
            key, sep, val = line.decode().rstrip("\n").partition("=")
            if not sep:
                raise FormatError(path, off, f"header line without '=': {line!r}")
            header[key] = val
        tensors = []
        while fh.tell() < size:
            tensors.append(_read_tensor(fh, path))
    return header, tensors
