"""MRtrix .tck track file reader/writer.

Layout: a text header starting with "mrtrix tracks", key: value lines
(at least ``datatype: Float32LE``, ``count``, and ``file: . <offset>``
where the offset points at the first binary byte), an END line, then
float32 coordinate triplets.  Each streamline is followed by one
(NaN, NaN, NaN) triplet and the stream ends with a single
(Inf, Inf, Inf) triplet.  The writer emits no timestamp, so identical
inputs produce byte-identical files.
"""

import numpy as np

from .errors import FormatError, InvalidInputError

_MAGIC = "mrtrix tracks"


def save_tracks(path, streamlines):
    """Write cropped streamlines (lists of (P, 3) arrays, P >= 1)."""
    arrays = []
    for i, s in enumerate(streamlines):
        a = np.asarray(s, dtype=np.float64)
        if a.ndim != 2 or a.shape[1] != 3 or len(a) == 0:
            raise InvalidInputError(f"streamline {i} must be a non-empty (P, 3) array")
        if not np.all(np.isfinite(a)):
            raise InvalidInputError(f"streamline {i} contains non-finite coordinates")
        arrays.append(a.astype("<f4"))
    count = len(arrays)
    fixed = (
        f"{_MAGIC}\n"
        f"datatype: Float32LE\n"
        f"count: {count}\n"
        f"total_count: {count}\n"
    )
    tail = "END\n"
    # the offset names the first binary byte, so its own digits count
    offset = len(fixed) + len("file: . \n") + len(tail) + 1
    while True:
        candidate = len(fixed) + len(f"file: . {offset}\n") + len(tail)
        if candidate == offset:
            break
        offset = candidate
    header = (fixed + f"file: . {offset}\n" + tail).encode("ascii")
    assert len(header) == offset
    sep = np.full(3, np.nan, dtype="<f4")
    term = np.full(3, np.inf, dtype="<f4")
    with open(path, "wb") as f:
        f.write(header)
        for a in arrays:
            f.write(a.tobytes())
            f.write(sep.tobytes())
        f.write(term.tobytes())


def load_tracks(path):
    """Read a .tck file back into a list of float32-precision polylines."""
    with open(path, "rb") as f:
        blob = f.read()
    newline = blob.find(b"\n")
    if newline < 0 or blob[:newline].decode("latin-1") != _MAGIC:
        raise FormatError(f"not a track file (first line must be {_MAGIC!r})", offset=0)
    end_marker = blob.find(b"\nEND\n")
    if end_marker < 0:
        raise FormatError("header END line missing")
    header_text = blob[: end_marker + 5].decode("latin-1")
    fields = {}
    for line in header_text.splitlines()[1:-1]:
        if ":" not in line:
            raise FormatError(f"malformed header line {line!r}")
        key, _, value = line.partition(":")
        fields[key.strip()] = value.strip()
    datatype = fields.get("datatype")
    if datatype != "Float32LE":
        raise FormatError(f"unsupported datatype {datatype!r} (expected Float32LE)")
    if "count" not in fields:
        raise FormatError("header is missing the count field")
    try:
        count = int(fields["count"])
    except ValueError as e:
        raise FormatError(f"bad count field {fields['count']!r}") from e
    file_field = fields.get("file")
    if file_field is None or not file_field.startswith("."):
        raise FormatError("header is missing the 'file: . <offset>' field")
    try:
        offset = int(file_field[1:].strip())
    except ValueError as e:
        raise FormatError(f"bad file offset in {file_field!r}") from e
    if offset != end_marker + 5:
        raise FormatError(
            f"file offset {offset} does not point at the first binary byte "
            f"({end_marker + 5})",
            offset=offset,
        )
    body = blob[offset:]
    if len(body) % 12 != 0:
        raise FormatError(
            f"binary block of {len(body)} bytes is not whole float32 triplets",
            offset=offset,
        )
    triplets = np.frombuffer(body, dtype="<f4").reshape(-1, 3)
    if len(triplets) == 0:
        raise FormatError("missing terminator triplet", offset=offset)
    streamlines = []
    current = []
    terminated = False
    for row_index, row in enumerate(triplets):
        nan_count = int(np.isnan(row).sum())
        inf_count = int(np.isinf(row).sum())
        if terminated:
            raise FormatError(
                f"data after the terminator triplet (row {row_index})", offset=offset
            )
        if nan_count == 3:
            if not current:
                raise FormatError(
                    f"empty streamline before separator at row {row_index}", offset=offset
                )
            streamlines.append(np.array(current, dtype=np.float64))
            current = []
        elif inf_count == 3:
            if not np.all(np.isposinf(row)):
                raise FormatError(
                    f"corrupt terminator triplet at row {row_index}", offset=offset
                )
            if current:
                raise FormatError(
                    "streamline not closed by a separator before the terminator",
                    offset=offset,
                )
            terminated = True
        elif nan_count or inf_count:
            raise FormatError(
                f"corrupt triplet (partial sentinel) at row {row_index}", offset=offset
            )
        else:
            current.append(row.astype(np.float64))
    if not terminated:
        raise FormatError("missing terminator triplet")
    if len(streamlines) != count:
        raise FormatError(
            f"header declares {count} streamlines but the data holds {len(streamlines)}"
        )
    return streamlines
