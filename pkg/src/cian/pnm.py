"""Binary PGM (P5) and PPM (P6) readers/writers, bit-exact on round trip.

Masks go to PGM with pixel value = class id and 255 = ignore; images go to
PPM with [0,1] floats quantised to u8.
"""

import numpy as np

__all__ = ["write_pgm", "read_pgm", "write_ppm", "read_ppm",
           "float_to_u8", "u8_to_float"]


def _write_pnm(path, magic, arr):
    h, w = arr.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"{magic}\n{w} {h}\n255\n".encode("ascii"))
        fh.write(arr.astype(np.uint8).tobytes())


def _read_header(fh, magic):
    if fh.read(2) != magic:
        raise ValueError(f"not a {magic.decode()} file")
    vals = []
    while len(vals) < 3:
        tok = b""
        ch = fh.read(1)
        while ch.isspace():
            ch = fh.read(1)
        if ch == b"#":  # comment runs to end of line
            while ch not in (b"\n", b""):
                ch = fh.read(1)
            continue
        while ch and not ch.isspace():
            tok += ch
            ch = fh.read(1)
        if not tok:
            raise ValueError("truncated header")
        vals.append(int(tok))
    w, h, maxval = vals
    if maxval != 255:
        raise ValueError(f"unsupported maxval {maxval}")
    return w, h


def write_pgm(path, mask):
    """Write a 2-D u8 array as binary PGM, maxval 255."""
    if mask.ndim != 2:
        raise ValueError(f"PGM wants 2-D array, got shape {mask.shape}")
    _write_pnm(path, "P5", mask)


def read_pgm(path):
    with open(path, "rb") as fh:
        w, h = _read_header(fh, b"P5")
        data = np.frombuffer(fh.read(w * h), dtype=np.uint8)
        if data.size != w * h:
            raise ValueError(f"{path}: truncated pixel data")
        return data.reshape(h, w).copy()


def write_ppm(path, rgb):
    """Write an (H,W,3) u8 array as binary PPM, maxval 255."""
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError(f"PPM wants (H,W,3), got shape {rgb.shape}")
    _write_pnm(path, "P6", rgb)


def read_ppm(path):
    with open(path, "rb") as fh:
        w, h = _read_header(fh, b"P6")
        data = np.frombuffer(fh.read(w * h * 3), dtype=np.uint8)
        if data.size != w * h * 3:
            raise ValueError(f"{path}: truncated pixel data")
        return data.reshape(h, w, 3).copy()


def float_to_u8(x):
    """Quantise [0,1] floats to u8 by round-half-away, clipped."""
    return np.clip(np.floor(x * 255.0 + 0.5), 0, 255).astype(np.uint8)


def u8_to_float(x, dtype=np.float32):
    return (x.astype(dtype) / dtype(255.0))
