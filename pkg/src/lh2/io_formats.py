"""Bit-exact file formats and run configuration shared by all modules.

Binary tensor container layout (little-endian throughout):

    magic   4 bytes  b"LH2T"
    version u32      1
    ndim    u32      1..4
    dims    ndim*u32
    payload prod(dims) float32, row-major

Depth maps go to 16-bit binary PGM (P5) with the quantization range kept in
a `# range <min> <max>` comment so the round trip is exact to
(max-min)/65535 per pixel.  Images go to 8-bit binary PPM (P6).
"""

from __future__ import annotations

import dataclasses
import struct

import numpy as np

from .errors import ConfigError, DimError, FormatError, SchemaError, TruncationError

_MAGIC = b"LH2T"
_VERSION = 1


def write_tensor(path, array) -> None:
    """Write an array (rank 1..4) as a float32 tensor file."""
    arr = np.ascontiguousarray(array, dtype=np.float32)
    if not 1 <= arr.ndim <= 4:
        raise DimError(f"tensor rank {arr.ndim} outside [1, 4]")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _VERSION, arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.astype("<f4").tobytes(order="C"))


def read_tensor(path) -> np.ndarray:
    """Read a tensor file back as a float32 array with its declared shape."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != _MAGIC:
        raise FormatError(f"bad magic {data[:4]!r}, expected {_MAGIC!r}")
    if len(data) < 12:
        raise TruncationError("header truncated")
    version, ndim = struct.unpack_from("<II", data, 4)
    if version != _VERSION:
        raise FormatError(f"unsupported version {version}")
    if not 1 <= ndim <= 4:
        raise DimError(f"tensor rank {ndim} outside [1, 4]")
    header_end = 12 + 4 * ndim
    if len(data) < header_end:
        raise TruncationError("dims truncated")
    dims = struct.unpack_from(f"<{ndim}I", data, 12)
    count = int(np.prod(dims, dtype=np.int64))
    payload_end = header_end + 4 * count
    if len(data) < payload_end:
        raise TruncationError(f"payload needs {payload_end - header_end} bytes, "
                              f"got {len(data) - header_end}")
    if len(data) > payload_end:
        raise FormatError(f"{len(data) - payload_end} trailing bytes after payload")
    flat = np.frombuffer(data, dtype="<f4", count=count, offset=header_end)
    return flat.reshape(dims).astype(np.float32)


def write_pgm(depth, path) -> None:
    """Write a 2-D depth array as 16-bit binary PGM with a range comment."""
    arr = np.asarray(depth, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"depth must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("depth contains non-finite values")
    lo = float(arr.min())
    hi = float(arr.max())
    if hi > lo:
        q = np.rint((arr - lo) / (hi - lo) * 65535.0).astype(np.uint16)
    else:
        q = np.zeros(arr.shape, dtype=np.uint16)
    h, w = arr.shape
    header = f"P5\n# range {lo:.17g} {hi:.17g}\n{w} {h}\n65535\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(q.astype(">u2").tobytes(order="C"))


def read_pgm(path) -> np.ndarray:
    """Read a 16-bit PGM written by write_pgm back to float64 depths."""
    with open(path, "rb") as fh:
        data = fh.read()
    tokens, rng, offset = _parse_netpbm_header(data, b"P5")
    w, h, maxval = tokens
    if maxval != 65535:
        raise FormatError(f"expected maxval 65535, got {maxval}")
    if rng is None:
        raise FormatError("missing '# range <min> <max>' comment")
    lo, hi = rng
    n = w * h
    if len(data) - offset < 2 * n:
        raise TruncationError("pixel data truncated")
    q = np.frombuffer(data, dtype=">u2", count=n, offset=offset).reshape(h, w)
    return lo + q.astype(np.float64) * ((hi - lo) / 65535.0)


def write_ppm(image, path) -> None:
    """Write an H x W x 3 float image in [0, 1] as 8-bit binary PPM."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"image must be H x W x 3, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("image contains non-finite values")
    q = np.rint(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w, _ = arr.shape
    header = f"P6\n{w} {h}\n255\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(q.tobytes(order="C"))


def read_ppm(path) -> np.ndarray:
    """Read an 8-bit PPM back to float64 in [0, 1]."""
    with open(path, "rb") as fh:
        data = fh.read()
    tokens, _, offset = _parse_netpbm_header(data, b"P6")
    w, h, maxval = tokens
    if maxval != 255:
        raise FormatError(f"expected maxval 255, got {maxval}")
    n = w * h * 3
    if len(data) - offset < n:
        raise TruncationError("pixel data truncated")
    q = np.frombuffer(data, dtype=np.uint8, count=n, offset=offset).reshape(h, w, 3)
    return q.astype(np.float64) / 255.0


def _parse_netpbm_header(data, magic):
    """Return ((w, h, maxval), range-or-None, payload offset) for P5/P6 data."""
    if data[:2] != magic:
        raise FormatError(f"bad magic {data[:2]!r}, expected {magic!r}")
    pos = 2
    tokens = []
    rng = None
    while len(tokens) < 3:
        if pos >= len(data):
            raise TruncationError("header truncated")
        ch = data[pos:pos + 1]
        if ch.isspace():
            pos += 1
        elif ch == b"#":
            end = data.find(b"\n", pos)
            if end < 0:
                raise TruncationError("unterminated comment")
            comment = data[pos + 1:end].decode("ascii", "replace").split()
            if len(comment) == 3 and comment[0] == "range":
                rng = (float(comment[1]), float(comment[2]))
            pos = end + 1
        else:
            end = pos
            while end < len(data) and not data[end:end + 1].isspace():
                end += 1
            try:
                tokens.append(int(data[pos:end]))
            except ValueError as exc:
                raise FormatError(f"bad header token {data[pos:end]!r}") from exc
            pos = end
    # single whitespace byte separates the maxval token from pixel data
    return (tokens[0], tokens[1], tokens[2]), rng, pos + 1


@dataclasses.dataclass
class RunConfig:
    """Flat configuration for the training harness and loss stack.

    Every key has the documented default below; a config file may override
    any subset with `key = value` lines (`#` starts a comment).  Unknown or
    duplicate keys are rejected with the offending line number.
    """

    seed: int = 0
    # synthetic dataset
    C: int = 64                      # number of classes / proxies
    d: int = 512                     # feature dimension
    n: int = 256                     # distribution dimension in the similarity normalizer
    d_in: int = 64                   # raw input dimension before the linear embedder
    samples_per_class: int = 500
    noise_angle_deg: float = 10.0    # angular noise around each class direction
    norm_logmean: float = 3.0        # log-normal feature-norm model (quality signal)
    norm_logstd: float = 0.25
    # structural stand-in for reconstruction-aware inputs: append this many
    # constant summary channels of the rendered demo scene to every sample
    render_channels: int = 0
    # optimizer
    epochs: int = 20
    batch_size: int = 128
    lr: float = 0.1
    momentum: float = 0.9
    lr_halve_every: int = 2          # halve lr every this many epochs
    # margin softmax
    tau: float = 1.0
    margin_coeff: float = 0.35       # m = coeff * EMA(||z||)
    ema_alpha: float = 0.1           # weight of the current batch mean in the EMA
    mu_norm_init: float = 20.0
    # proxy regularizers
    lambda_pps: float = 5.0
    lambda_pns: float = 20.0
    lambda_pp: float = 150.0
    lambda_sns: float = 150.0
    sns_enabled: bool = False
    cos_min: float = 0.5
    cos_max: float = 0.9
    mid_strict_mode: bool = False    # accumulate only the first positive cosine per batch
    # composite loss weights
    lambda_reco: float = 0.01
    lambda_canon: float = 0.001
    lambda_view: float = 0.001
    lambda_flip: float = 0.5
    lambda_perc: float = 1.0
    lambda_smooth: float = 0.01
    # view-variance thresholds (axis 2 spans frontal-to-profile, widest range)
    view_v1: float = 0.01
    view_v2: float = 0.04
    view_v3: float = 0.01


_CONFIG_FIELDS = {f.name: f.type for f in dataclasses.fields(RunConfig)}
_TRUE_WORDS = {"true", "1", "yes", "on"}
_FALSE_WORDS = {"false", "0", "no", "off"}


def parse_config(path) -> RunConfig:
    """Parse a `key = value` config file into a RunConfig."""
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    return parse_config_text(text)


def parse_config_text(text) -> RunConfig:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {raw.strip()!r}", line=lineno)
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in _CONFIG_FIELDS:
            raise ConfigError(f"unknown key {key!r}", line=lineno)
        if key in values:
            raise ConfigError(f"duplicate key {key!r}", line=lineno)
        values[key] = _convert(key, value, lineno)
    return RunConfig(**values)


def _convert(key, value, lineno):
    kind = _CONFIG_FIELDS[key]
    try:
        if kind in (int, "int"):
            return int(value)
        if kind in (float, "float"):
            return float(value)
        if kind in (bool, "bool"):
            low = value.lower()
            if low in _TRUE_WORDS:
                return True
            if low in _FALSE_WORDS:
                return False
            raise ValueError(f"not a boolean: {value!r}")
        return value
    except ValueError as exc:
        raise ConfigError(f"bad value for {key!r}: {exc}", line=lineno) from exc


def emit_metrics(records, path, fields=None) -> None:
    """Write records (mappings with one shared key set) as CSV.

    Floats are printed with 9 significant digits; an empty record sequence
    with no explicit fields yields an empty file.
    """
    records = list(records)
    if fields is None:
        fields = list(records[0].keys()) if records else []
    fieldset = set(fields)
    lines = []
    if fields:
        lines.append(",".join(fields))
    for i, rec in enumerate(records):
        if set(rec.keys()) != fieldset:
            raise SchemaError(f"record {i} keys {sorted(rec)} != header {sorted(fieldset)}")
        lines.append(",".join(_format_value(rec[k]) for k in fields))
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("\n".join(lines))
        if lines:
            fh.write("\n")


def _format_value(v):
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.9g}"
    return str(v)
