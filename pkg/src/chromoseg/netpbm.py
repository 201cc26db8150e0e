"""Minimal 8-bit binary PGM (P5) and PPM (P6) reading and writing."""

import numpy as np

from .errors import FormatError


def _tokens(buf, count):
    """Read ``count`` whitespace-separated header tokens, skipping comments.

    Returns the tokens and the offset of the byte after the single whitespace
    that terminates the last token.
    """
    tokens, pos, n = [], 0, len(buf)
    while len(tokens) < count:
        while pos < n and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < n and buf[pos:pos + 1] == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise FormatError("truncated netpbm header")
        tokens.append(buf[start:pos])
    if pos >= n or not buf[pos:pos + 1].isspace():
        raise FormatError("netpbm header must end with whitespace")
    return tokens, pos + 1


def _decode(buf, magic, channels):
    tokens, offset = _tokens(buf, 4)
    if tokens[0] != magic:
        raise FormatError(f"expected {magic.decode()} file, got {tokens[0]!r}")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise FormatError(f"non-integer netpbm header field: {exc}") from None
    if maxval != 255:
        raise FormatError(f"only 8-bit files (maxval 255) are supported, got {maxval}")
    size = width * height * channels
    if len(buf) - offset < size:
        raise FormatError(f"pixel data truncated: need {size} bytes, have {len(buf) - offset}")
    data = np.frombuffer(buf, dtype=np.uint8, count=size, offset=offset)
    shape = (height, width) if channels == 1 else (height, width, channels)
    return data.reshape(shape).copy()


def encode_pgm(img):
    img = np.asarray(img, dtype=np.uint8)
    h, w = img.shape
    return b"P5\n%d %d\n255\n" % (w, h) + img.tobytes()


def encode_ppm(rgb):
    rgb = np.asarray(rgb, dtype=np.uint8)
    h, w, c = rgb.shape
    if c != 3:
        raise FormatError(f"PPM needs 3 channels, got {c}")
    return b"P6\n%d %d\n255\n" % (w, h) + rgb.tobytes()


def read_pgm(path):
    with open(path, "rb") as fh:
        return _decode(fh.read(), b"P5", 1)


def write_pgm(img, path):
    with open(path, "wb") as fh:
        fh.write(encode_pgm(img))


def read_ppm(path):
    with open(path, "rb") as fh:
        return _decode(fh.read(), b"P6", 3)


def write_ppm(rgb, path):
    with open(path, "wb") as fh:
        fh.write(encode_ppm(rgb))
