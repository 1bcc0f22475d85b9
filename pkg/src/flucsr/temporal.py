"""Image stacks, their temporal mean and empirical second-order cumulant.

File containers
---------------
``FLSTK1`` (stacks, and means dumped with ``T=1``)::

    FLSTK1\\n
    T=<int> H=<int> W=<int> dtype=f32 endian=LE\\n
    <T*H*W little-endian floats, frame-major then row-major>

``FLCOV1`` (covariance matrices)::

    FLCOV1\\n
    P=<int> H=<int> W=<int> dtype=f64 endian=LE\\n
    <P*P little-endian floats, row-major>

Readers accept ``dtype=f32`` or ``dtype=f64``. Raw stacks are written as
``f32``; derived statistics as ``f64`` so a stats/solve round trip through
files is lossless.
"""
from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

STACK_MAGIC = b"FLSTK1\n"
COV_MAGIC = b"FLCOV1\n"
MAX_PIXELS = 128 * 128

_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}
_STACK_HEADER = re.compile(rb"T=(\d+) H=(\d+) W=(\d+) dtype=(f32|f64) endian=LE\n")
_COV_HEADER = re.compile(rb"P=(\d+) H=(\d+) W=(\d+) dtype=(f32|f64) endian=LE\n")


class StackFormatError(ValueError):
    """Malformed container; ``offset`` is the byte offset of the problem."""

    def __init__(self, message, offset):
        self.offset = offset
        super().__init__(f"byte {offset}: {message}")


@dataclass(frozen=True, eq=False)
class ImageStack:
    """``T`` frames of ``H x W`` intensities. ``frame_rate`` is metadata (frames/s)."""

    frames: np.ndarray
    frame_rate: float = 100.0

    def __post_init__(self):
        f = np.asarray(self.frames, dtype=float)
        if f.ndim == 2:
            f = f[None]
        if f.ndim != 3 or f.shape[0] < 1:
            raise ValueError(f"frames must have shape (T, H, W), got {f.shape}")
        if not np.all(np.isfinite(f)):
            raise ValueError("stack contains non-finite intensities")
        if not self.frame_rate > 0:
            raise ValueError("frame_rate must be positive")
        f.setflags(write=False)
        object.__setattr__(self, "frames", f)

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def shape(self):
        return self.frames.shape[1:]

    @property
    def n_pixels(self) -> int:
        return self.frames.shape[1] * self.frames.shape[2]

    def vectorized(self) -> np.ndarray:
        """``(T, P)`` view with row-major pixel order."""
        return self.frames.reshape(self.n_frames, -1)


def empirical_mean(stack: ImageStack) -> np.ndarray:
    """Temporal mean, length ``H*W``."""
    return stack.vectorized().mean(axis=0)


def empirical_covariance(stack: ImageStack) -> np.ndarray:
    """Unbiased empirical covariance of the vectorized frames, ``P x P``.

    Two-pass (mean, then centred products) in float64. The result is exactly
    symmetric.
    """
    t = stack.n_frames
    if t < 2:
        raise ValueError("covariance requires at least 2 frames")
    if stack.n_pixels > MAX_PIXELS:
        raise ValueError(f"stack has {stack.n_pixels} pixels, limit is {MAX_PIXELS}")
    y = stack.vectorized()
    centred = y - y.mean(axis=0)
    cov = (centred.T @ centred) / (t - 1)
    upper = np.triu(cov)
    return upper + np.triu(cov, 1).T


# --- containers ---------------------------------------------------------------

def encode_stack(frames, dtype: str = "f32") -> bytes:
    f = np.asarray(frames, dtype=float)
    if f.ndim == 2:
        f = f[None]
    t, h, w = f.shape
    header = f"T={t} H={h} W={w} dtype={dtype} endian=LE\n".encode("ascii")
    return STACK_MAGIC + header + f.astype(_DTYPES[dtype]).tobytes(order="C")


def write_stack(path, stack_or_frames, dtype: str = "f32") -> None:
    frames = stack_or_frames.frames if isinstance(stack_or_frames, ImageStack) else stack_or_frames
    with open(path, "wb") as fh:
        fh.write(encode_stack(frames, dtype))


def _split_header(raw: bytes, magic: bytes, pattern):
    if not raw.startswith(magic):
        found = raw[:len(magic)]
        raise StackFormatError(f"bad magic {found!r}, expected {magic!r}", 0)
    end = raw.find(b"\n", len(magic))
    if end < 0:
        raise StackFormatError("unterminated header line", len(magic))
    match = pattern.fullmatch(raw[len(magic):end + 1])
    if match is None:
        raise StackFormatError(f"malformed header {raw[len(magic):end]!r}", len(magic))
    return match, end + 1


def decode_stack(raw: bytes, frame_rate: float = 100.0) -> ImageStack:
    match, start = _split_header(raw, STACK_MAGIC, _STACK_HEADER)
    t, h, w = (int(v) for v in match.groups()[:3])
    dt = _DTYPES[match.group(4).decode()]
    if min(t, h, w) < 1:
        raise StackFormatError("dimensions must be positive", len(STACK_MAGIC))
    need = t * h * w * dt.itemsize
    have = len(raw) - start
    if have != need:
        raise StackFormatError(f"payload has {have} bytes, header implies {need}",
                               start + min(have, need))
    data = np.frombuffer(raw, dtype=dt, offset=start).astype(float).reshape(t, h, w)
    bad = ~np.isfinite(data)
    if bad.any():
        idx = int(np.flatnonzero(bad.reshape(-1))[0])
        raise StackFormatError("non-finite value in payload", start + idx * dt.itemsize)
    return ImageStack(data, frame_rate)


def read_stack(path, frame_rate: float = 100.0) -> ImageStack:
    with open(path, "rb") as fh:
        return decode_stack(fh.read(), frame_rate)


def encode_covariance(cov, height: int, width: int, dtype: str = "f64") -> bytes:
    c = np.asarray(cov, dtype=float)
    p = height * width
    if c.shape != (p, p):
        raise ValueError(f"covariance shape {c.shape} does not match a {height}x{width} grid")
    header = f"P={p} H={height} W={width} dtype={dtype} endian=LE\n".encode("ascii")
    return COV_MAGIC + header + c.astype(_DTYPES[dtype]).tobytes(order="C")


def write_covariance(path, cov, height: int, width: int, dtype: str = "f64") -> None:
    with open(path, "wb") as fh:
        fh.write(encode_covariance(cov, height, width, dtype))


def decode_covariance(raw: bytes):
    """Return ``(matrix, (H, W))``."""
    match, start = _split_header(raw, COV_MAGIC, _COV_HEADER)
    p, h, w = (int(v) for v in match.groups()[:3])
    if p != h * w or p < 1:
        raise StackFormatError(f"P={p} inconsistent with H={h} W={w}", len(COV_MAGIC))
    dt = _DTYPES[match.group(4).decode()]
    need = p * p * dt.itemsize
    have = len(raw) - start
    if have != need:
        raise StackFormatError(f"payload has {have} bytes, header implies {need}",
                               start + min(have, need))
    cov = np.frombuffer(raw, dtype=dt, offset=start).astype(float).reshape(p, p)
    return cov, (h, w)


def read_covariance(path):
    with open(path, "rb") as fh:
        return decode_covariance(fh.read())


def sniff_container(path) -> str:
    """``"stack"`` or ``"covariance"`` from the magic line."""
    with open(path, "rb") as fh:
        head = fh.read(len(STACK_MAGIC))
    if head == STACK_MAGIC:
        return "stack"
    if head == COV_MAGIC:
        return "covariance"
    raise StackFormatError(f"unknown magic {head!r}", 0)
