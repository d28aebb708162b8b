# NetPBM grayscale/color codec.
#
#   P2  plain gray     P5  binary gray
#   P3  plain color    P6  binary color
#
# Header: magic, width, height, maxval separated by whitespace, '#' starts a
# comment running to end of line. Binary rasters use 1 byte per sample when
# maxval < 256 and 2 big-endian bytes otherwise.

from typing import List, Optional, Tuple

import numpy as np

from src.utils.errors import DataError

MAGICS = {b'P2': (1, False), b'P3': (3, False), b'P5': (1, True), b'P6': (3, True)}
MAX_MAXVAL = 65535
_WHITESPACE = b' \t\r\n\x0b\x0c'


def _read_header(data: bytes, source: str) -> Tuple[List[int], int]:
    """Read width, height, maxval after the magic; return them and the raster offset."""
    tokens = []
    pos = 2
    while len(tokens) < 3:
        if pos >= len(data):
            raise DataError(f"Truncated NetPBM header in {source}")
        byte = data[pos:pos + 1]
        if byte == b'#':
            newline = data.find(b'\n', pos)
            pos = len(data) if newline < 0 else newline + 1
        elif byte in _WHITESPACE:
            pos += 1
        else:
            end = pos
            while end < len(data) and data[end:end + 1] not in _WHITESPACE and data[end:end + 1] != b'#':
                end += 1
            try:
                tokens.append(int(data[pos:end]))
            except ValueError:
                raise DataError(f"Invalid NetPBM header token {data[pos:end]!r} in {source}")
            pos = end
    # exactly one whitespace byte separates the header from a binary raster
    if pos >= len(data) or data[pos:pos + 1] not in _WHITESPACE:
        raise DataError(f"Missing raster after NetPBM header in {source}")
    return tokens, pos + 1


def decode_netpbm(data: bytes, source: str = '<buffer>') -> Tuple[np.ndarray, int]:
    """Decode a P2/P3/P5/P6 buffer.

    Returns (pixels, maxval); pixels are (h, w) for gray and (h, w, 3) for color,
    uint8 when maxval < 256 and uint16 otherwise.
    """
    magic = data[:2]
    if magic not in MAGICS:
        raise DataError(f"{source} is not a P2/P3/P5/P6 NetPBM file (magic {magic!r})")
    channels, binary = MAGICS[magic]
    (width, height, maxval), offset = _read_header(data, source)
    if width < 1 or height < 1:
        raise DataError(f"Invalid NetPBM extents {width}x{height} in {source}")
    if not 1 <= maxval <= MAX_MAXVAL:
        raise DataError(f"NetPBM maxval {maxval} outside [1, {MAX_MAXVAL}] in {source}")

    count = width * height * channels
    dtype = np.uint8 if maxval < 256 else np.uint16
    if binary:
        wire = np.dtype('u1') if maxval < 256 else np.dtype('>u2')
        raw = data[offset:offset + count * wire.itemsize]
        if len(raw) < count * wire.itemsize:
            raise DataError(f"Truncated NetPBM raster in {source}: expected {count * wire.itemsize} bytes, got {len(raw)}")
        values = np.frombuffer(raw, dtype=wire).astype(dtype)
    else:
        fields = data[offset:].split()
        if len(fields) < count:
            raise DataError(f"Truncated NetPBM raster in {source}: expected {count} samples, got {len(fields)}")
        try:
            values = np.array([int(field) for field in fields[:count]], dtype=np.int64)
        except ValueError as e:
            raise DataError(f"Invalid NetPBM sample in {source}: {e}")
        values = values.astype(dtype)

    if int(values.max(initial=0)) > maxval:
        raise DataError(f"NetPBM sample exceeds maxval {maxval} in {source}")
    shape = (height, width) if channels == 1 else (height, width, 3)
    return values.reshape(shape), maxval


def encode_netpbm(pixels: np.ndarray, maxval: Optional[int] = None, plain: bool = False) -> bytes:
    """Encode (h, w) as P5/P2 or (h, w, 3) as P6/P3."""
    pixels = np.asarray(pixels)
    if pixels.ndim == 2:
        magic = b'P2' if plain else b'P5'
    elif pixels.ndim == 3 and pixels.shape[2] == 3:
        magic = b'P3' if plain else b'P6'
    else:
        raise DataError(f"NetPBM encodes (h, w) or (h, w, 3) arrays, got shape {pixels.shape}")
    if not np.issubdtype(pixels.dtype, np.integer) and not np.issubdtype(pixels.dtype, np.bool_):
        raise DataError(f"NetPBM encodes integer samples, got {pixels.dtype}")
    if pixels.size and int(pixels.min()) < 0:
        raise DataError("NetPBM samples must be non-negative")

    peak = int(pixels.max(initial=0))
    if maxval is None:
        maxval = 255 if peak <= 255 else MAX_MAXVAL
    if not 1 <= maxval <= MAX_MAXVAL or peak > maxval:
        raise DataError(f"Invalid maxval {maxval} for samples peaking at {peak}")

    height, width = pixels.shape[:2]
    header = b'%s\n%d %d\n%d\n' % (magic, width, height, maxval)
    if plain:
        rows = [' '.join(str(int(v)) for v in row.reshape(-1)) for row in pixels]
        return header + ('\n'.join(rows) + '\n').encode('ascii')
    wire = np.dtype('u1') if maxval < 256 else np.dtype('>u2')
    return header + pixels.astype(wire).tobytes()


def read_netpbm(path: str) -> Tuple[np.ndarray, int]:
    try:
        with open(path, 'rb') as f:
            data = f.read()
    except OSError as e:
        raise DataError(f"Cannot read {path}: {e}")
    return decode_netpbm(data, path)


def write_netpbm(path: str, pixels: np.ndarray, maxval: Optional[int] = None, plain: bool = False):
    payload = encode_netpbm(pixels, maxval, plain)
    try:
        with open(path, 'wb') as f:
            f.write(payload)
    except OSError as e:
        raise DataError(f"Cannot write {path}: {e}")
