"""File formats used by the command line.

* vector: CSV, one real per line (blank lines and ``#`` comments ignored);
* image: PGM, ASCII ``P2`` or binary ``P5``, 8 or 16 bit, read by direct cast;
* bank: JSON ``{"kernels": [[[...], ...], ...]}`` (1-D or 2-D nested arrays);
* results: CSV with a header row, reals written with 17 significant digits.
"""

from __future__ import annotations

import csv
import io as _io
import json
import os
import re

import numpy as np

from .filterbank import FilterBank


class ParseError(ValueError):
    """Malformed file content."""


def fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return "%.17g" % v
    return str(v)


# ---------------------------------------------------------------- vectors


def read_vector(path) -> np.ndarray:
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    vals = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            vals.append(float(line.rstrip(",")))
        except ValueError:
            raise ParseError(f"{path}:{lineno}: not a real number: {line!r}") from None
    if not vals:
        raise ParseError(f"{path}: no values")
    arr = np.array(vals)
    if not np.all(np.isfinite(arr)):
        raise ParseError(f"{path}: non-finite value")
    return arr


def write_vector(path, x) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for v in np.ravel(x):
            fh.write("%.17g\n" % v)


# ---------------------------------------------------------------- PGM


_TOKEN = re.compile(rb"(#[^\n]*\n?)|(\S+)")


def _header_tokens(data: bytes, count: int):
    toks, pos = [], 0
    while len(toks) < count:
        m = _TOKEN.search(data, pos)
        if m is None:
            raise ParseError("truncated PGM header")
        pos = m.end()
        if m.group(2) is not None:
            toks.append(m.group(2))
    return toks, pos


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    try:
        toks, pos = _header_tokens(data, 4)
        magic = toks[0]
        w, h, maxval = (int(t) for t in toks[1:])
    except ValueError:
        raise ParseError(f"{path}: bad PGM header") from None
    if magic not in (b"P2", b"P5") or w < 1 or h < 1 or not 0 < maxval < 65536:
        raise ParseError(f"{path}: unsupported PGM header")
    if magic == b"P2":
        try:
            vals = [int(t) for t in re.sub(rb"#[^\n]*", b"", data[pos:]).split()]
        except ValueError:
            raise ParseError(f"{path}: non-integer pixel") from None
        if len(vals) < w * h:
            raise ParseError(f"{path}: expected {w * h} pixels, got {len(vals)}")
        arr = np.array(vals[: w * h], dtype=np.int64)
    else:
        pos += 1  # single whitespace after maxval
        dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
        raw = data[pos: pos + w * h * dtype.itemsize]
        if len(raw) < w * h * dtype.itemsize:
            raise ParseError(f"{path}: truncated pixel data")
        arr = np.frombuffer(raw, dtype=dtype).astype(np.int64)
    if arr.max(initial=0) > maxval:
        raise ParseError(f"{path}: pixel exceeds maxval")
    return arr.reshape(h, w).astype(float)


def write_pgm(path, img, binary: bool = True, maxval: int | None = None) -> None:
    """Write an integer image (values are rounded and clipped to ``[0, maxval]``)."""
    a = np.rint(np.asarray(img, dtype=float))
    if a.ndim != 2:
        raise ValueError("PGM images are 2-D")
    if maxval is None:
        maxval = 255 if a.max(initial=0) <= 255 else 65535
    a = np.clip(a, 0, maxval).astype(np.int64)
    h, w = a.shape
    with open(path, "wb") as fh:
        if binary:
            fh.write(b"P5\n%d %d\n%d\n" % (w, h, maxval))
            fh.write(a.astype(">u2" if maxval > 255 else "u1").tobytes())
        else:
            fh.write(b"P2\n%d %d\n%d\n" % (w, h, maxval))
            for row in a:
                fh.write((" ".join(str(v) for v in row) + "\n").encode())


def is_pgm(path) -> bool:
    return os.path.splitext(str(path))[1].lower() in (".pgm", ".pnm")


def read_signal(path) -> np.ndarray:
    return read_pgm(path) if is_pgm(path) else read_vector(path)


def write_signal(path, x) -> None:
    if is_pgm(path):
        write_pgm(path, x)
    else:
        write_vector(path, x)


# ---------------------------------------------------------------- banks and specs


def read_json(path):
    with open(path, "r", encoding="utf-8") as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}: {exc}") from None


def bank_from_json(obj) -> FilterBank:
    if not isinstance(obj, dict) or "kernels" not in obj or not isinstance(obj["kernels"], list):
        raise ParseError('bank JSON must be an object with a "kernels" list')
    try:
        kernels = [np.array(k, dtype=float) for k in obj["kernels"]]
    except (TypeError, ValueError):
        raise ParseError("bank kernels must be rectangular numeric arrays") from None
    return FilterBank(kernels)


def read_bank(path) -> FilterBank:
    return bank_from_json(read_json(path))


def write_bank(path, bank: FilterBank) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"kernels": [k.tolist() for k in bank.kernels]}, fh)


# ---------------------------------------------------------------- results


def write_table(path, header, rows) -> None:
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        vals = [r.get(h, "") for h in header] if isinstance(r, dict) else list(r)
        w.writerow([fmt(v) for v in vals])
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(buf.getvalue())


def read_table(path) -> list[dict]:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))
