"""Binary container shared by model checkpoints and cached datasets.

Layout::

    BTC/1 <kind>\\n            format version line
    key=value\\n ...            header, UTF-8 text
    \\n                         blank line ends the header
    then, per array:
      uint32 LE  name length
      bytes      name (UTF-8)
      uint64 LE  element count
      float64 LE elements

Array shapes are not stored in the record; readers rebuild them from the
header (``shape.<name>=a,b,...`` or an architecture descriptor).
"""
import struct
from collections import OrderedDict

import numpy as np

from .errors import DataError

FORMAT_VERSION = "BTC/1"


def write_container(path, kind, header, arrays):
    chunks = [f"{FORMAT_VERSION} {kind}\n".encode()]
    for key, value in header.items():
        text = str(value)
        if "\n" in text or "=" in key or "\n" in key:
            raise DataError(f"header entry {key!r} cannot be encoded")
        chunks.append(f"{key}={text}\n".encode())
    chunks.append(b"\n")
    for name, arr in arrays.items():
        raw = name.encode()
        flat = np.ascontiguousarray(arr, dtype="<f8").reshape(-1)
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<Q", flat.size))
        chunks.append(flat.tobytes())
    blob = b"".join(chunks)
    with open(path, "wb") as fh:
        fh.write(blob)
    return blob


def read_container(path, expect_kind=None):
    with open(path, "rb") as fh:
        blob = fh.read()
    return parse_container(blob, expect_kind, source=str(path))


def parse_container(blob, expect_kind=None, source="<bytes>"):
    nl = blob.find(b"\n")
    first = blob[:nl].decode(errors="replace") if nl >= 0 else ""
    parts = first.split(" ", 1)
    if nl < 0 or parts[0] != FORMAT_VERSION or len(parts) != 2:
        raise DataError(f"{source}: not a {FORMAT_VERSION} container")
    kind = parts[1]
    if expect_kind is not None and kind != expect_kind:
        raise DataError(f"{source}: expected a {expect_kind} container, found {kind}")
    end = blob.find(b"\n\n", nl)
    if end < 0:
        raise DataError(f"{source}: unterminated header")
    header = OrderedDict()
    body = blob[nl + 1:end + 1].decode()
    for line in body.splitlines():
        if line:
            key, _, value = line.partition("=")
            header[key] = value
    pos = end + 2
    arrays = OrderedDict()
    while pos < len(blob):
        try:
            (nlen,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos:pos + nlen].decode()
            pos += nlen
            (count,) = struct.unpack_from("<Q", blob, pos)
            pos += 8
        except struct.error:
            raise DataError(f"{source}: truncated record") from None
        nbytes = 8 * count
        if pos + nbytes > len(blob):
            raise DataError(f"{source}: truncated data for {name!r}")
        arrays[name] = np.frombuffer(blob, dtype="<f8", count=count, offset=pos).astype(np.float64)
        pos += nbytes
    return kind, header, arrays
