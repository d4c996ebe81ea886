"""Bit-exact file formats and the synthetic microscopy-image generator.

Formats (all multi-byte values little-endian):

  PGM   binary "P5": ASCII magic, whitespace (comments starting with '#'
        permitted in the header), width, height, maxval 255, one whitespace
        byte, then width*height raw bytes row-major.
  CSV   centroid annotations: header line "x,y", then one "<x>,<y>" integer
        pair per line (x = column, y = row, zero-based), LF line endings.
  DMAP  density map: magic "DMAP", u32 version (=1), u32 rows, u32 cols,
        rows*cols float32 values row-major.
  DRMW  model checkpoint: magic "DRMW", u32 version (=1), u8 variant id
        (0=fcrn, 1=pricnn_only, 2=pricnn_aux), f32 density scale, u32 tensor
        count, then per tensor: u16 name length, UTF-8 name, u8 ndim,
        u32 dims[ndim], float32 payload. Tensor order is the canonical model
        order (trunk blocks then aux heads, weight before bias per layer).

A dataset directory holds images/<id>.pgm, annotations/<id>.csv and
optionally density/<id>.dmap.
"""

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import ModelParams, layer_specs
from .ops import ConvFilter

VARIANT_IDS = {"fcrn": 0, "pricnn_only": 1, "pricnn_aux": 2}
_VARIANT_BY_ID = {v: k for k, v in VARIANT_IDS.items()}


class FormatError(ValueError):
    """A file does not match its documented byte/text format."""

    def __init__(self, message: str, *, path=None, offset: int | None = None, line: int | None = None):
        where = []
        if path is not None:
            where.append(str(path))
        if offset is not None:
            where.append(f"byte {offset}")
        if line is not None:
            where.append(f"line {line}")
        suffix = f" ({', '.join(where)})" if where else ""
        super().__init__(message + suffix)
        self.path = path
        self.offset = offset
        self.line = line


# ---------------------------------------------------------------------------
# PGM


def write_pgm(path, image: np.ndarray):
    image = np.asarray(image)
    if image.ndim != 2 or image.dtype != np.uint8:
        raise ValueError("write_pgm expects a 2D uint8 array")
    h, w = image.shape
    header = f"P5\n{w} {h}\n255\n".encode("ascii")
    Path(path).write_bytes(header + image.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    pos = 0

    def skip_space():
        nonlocal pos
        while pos < len(data):
            ch = data[pos : pos + 1]
            if ch == b"#":
                while pos < len(data) and data[pos : pos + 1] != b"\n":
                    pos += 1
            elif ch.isspace():
                pos += 1
            else:
                break

    def token(what: str) -> bytes:
        nonlocal pos
        skip_space()
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if pos == start:
            raise FormatError(f"missing {what} in PGM header", path=path, offset=start)
        return data[start:pos]

    magic = token("magic")
    if magic != b"P5":
        raise FormatError(f"expected binary PGM magic 'P5', got {magic!r}", path=path, offset=0)

    def int_token(what: str) -> int:
        start = pos
        tok = token(what)
        try:
            return int(tok)
        except ValueError:
            raise FormatError(f"bad {what} {tok!r} in PGM header", path=path, offset=start) from None

    width = int_token("width")
    height = int_token("height")
    maxval_at = pos
    maxval = int_token("maxval")
    if width <= 0 or height <= 0:
        raise FormatError(f"bad PGM dimensions {width}x{height}", path=path, offset=0)
    if maxval != 255:
        raise FormatError(f"unsupported PGM maxval {maxval} (only 255)", path=path, offset=maxval_at)
    if pos >= len(data) or not data[pos : pos + 1].isspace():
        raise FormatError("missing whitespace after maxval", path=path, offset=pos)
    pos += 1  # exactly one whitespace byte before the payload

    need = width * height
    if len(data) - pos < need:
        raise FormatError(
            f"truncated payload: expected {need} bytes, file ends early",
            path=path,
            offset=len(data),
        )
    if len(data) - pos > need:
        raise FormatError("trailing bytes after pixel payload", path=path, offset=pos + need)
    return np.frombuffer(data, dtype=np.uint8, count=need, offset=pos).reshape(height, width).copy()


# ---------------------------------------------------------------------------
# Centroid CSV


def write_centroids(path, centroids):
    lines = ["x,y"] + [f"{int(x)},{int(y)}" for x, y in centroids]
    Path(path).write_text("\n".join(lines) + "\n", newline="")


def read_centroids(path) -> list:
    text = Path(path).read_text()
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines or lines[0] != "x,y":
        raise FormatError("first line must be exactly 'x,y'", path=path, line=1)
    points = []
    for ln, line in enumerate(lines[1:], start=2):
        parts = line.split(",")
        if len(parts) != 2:
            raise FormatError(f"expected '<x>,<y>', got {line!r}", path=path, line=ln)
        try:
            points.append((int(parts[0]), int(parts[1])))
        except ValueError:
            raise FormatError(f"non-integer coordinate in {line!r}", path=path, line=ln) from None
    return points


# ---------------------------------------------------------------------------
# DMAP


def write_dmap(path, density_map: np.ndarray):
    m = np.asarray(density_map, dtype=np.float32)
    if m.ndim != 2:
        raise ValueError("density map must be 2D")
    header = b"DMAP" + struct.pack("<III", 1, m.shape[0], m.shape[1])
    Path(path).write_bytes(header + m.astype("<f4").tobytes())


def read_dmap(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != b"DMAP":
        raise FormatError(f"bad magic {data[:4]!r}, expected b'DMAP'", path=path, offset=0)
    if len(data) < 16:
        raise FormatError("truncated DMAP header", path=path, offset=len(data))
    version, rows, cols = struct.unpack_from("<III", data, 4)
    if version != 1:
        raise FormatError(f"unsupported DMAP version {version}", path=path, offset=4)
    need = rows * cols * 4
    if len(data) - 16 != need:
        raise FormatError(
            f"payload length {len(data) - 16} does not match {rows}x{cols} float32 values",
            path=path,
            offset=16,
        )
    return np.frombuffer(data, dtype="<f4", count=rows * cols, offset=16).reshape(rows, cols).copy()


# ---------------------------------------------------------------------------
# DRMW checkpoints


def save_checkpoint(path, params: ModelParams, density_scale: float = 1.0):
    out = bytearray()
    out += b"DRMW"
    tensors = list(params.tensors())
    out += struct.pack("<IBfI", 1, VARIANT_IDS[params.variant], density_scale, len(tensors))
    for name, arr in tensors:
        encoded = name.encode("utf-8")
        out += struct.pack("<H", len(encoded))
        out += encoded
        out += struct.pack("<B", arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += arr.astype("<f4").tobytes()
    Path(path).write_bytes(bytes(out))


def expected_tensor_shapes(variant: str) -> list:
    """Canonical (name, shape) list a checkpoint of this variant must carry."""
    shapes = []
    for spec in layer_specs(variant):
        k = spec.kernel_size
        shapes.append((f"{spec.name}.weight", (spec.out_channels, spec.in_channels, k, k)))
        shapes.append((f"{spec.name}.bias", (spec.out_channels,)))
    return shapes


def load_checkpoint(path, expect_variant: str | None = None):
    """Read a DRMW file; returns (params, density_scale).

    Tensors are validated in order against the expected shape table of
    expect_variant (default: the variant recorded in the header); the error
    for a mismatch names the offending tensor.
    """
    data = Path(path).read_bytes()
    if data[:4] != b"DRMW":
        raise FormatError(f"bad magic {data[:4]!r}, expected b'DRMW'", path=path, offset=0)
    if len(data) < 17:
        raise FormatError("truncated DRMW header", path=path, offset=len(data))
    version, variant_id, density_scale, count = struct.unpack_from("<IBfI", data, 4)
    if version != 1:
        raise FormatError(f"unsupported DRMW version {version}", path=path, offset=4)
    if variant_id not in _VARIANT_BY_ID:
        raise FormatError(f"unknown variant id {variant_id}", path=path, offset=8)
    variant = expect_variant or _VARIANT_BY_ID[variant_id]
    expected = expected_tensor_shapes(variant)
    if count != len(expected):
        raise FormatError(
            f"checkpoint has {count} tensors but variant {variant!r} expects "
            f"{len(expected)} (first expected: {expected[min(count, len(expected) - 1)][0]!r})",
            path=path,
            offset=13,
        )

    pos = 17
    arrays = {}
    for exp_name, exp_shape in expected:
        try:
            (name_len,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos : pos + name_len].decode("utf-8")
            pos += name_len
            (ndim,) = struct.unpack_from("<B", data, pos)
            pos += 1
            dims = struct.unpack_from(f"<{ndim}I", data, pos)
            pos += 4 * ndim
        except struct.error:
            raise FormatError(
                f"truncated tensor header for expected tensor {exp_name!r}", path=path, offset=pos
            ) from None
        if name != exp_name:
            raise FormatError(f"expected tensor {exp_name!r}, found {name!r}", path=path, offset=pos)
        if dims != exp_shape:
            raise FormatError(
                f"tensor {name!r} has shape {dims}, variant {variant!r} expects {exp_shape}",
                path=path,
                offset=pos,
            )
        n_vals = int(np.prod(dims, dtype=np.int64)) if dims else 1
        if len(data) - pos < 4 * n_vals:
            raise FormatError(f"truncated payload for tensor {name!r}", path=path, offset=len(data))
        arrays[name] = (
            np.frombuffer(data, dtype="<f4", count=n_vals, offset=pos).reshape(dims).copy()
        )
        pos += 4 * n_vals
    if pos != len(data):
        raise FormatError("trailing bytes after last tensor", path=path, offset=pos)

    layers = {}
    for spec in layer_specs(variant):
        layers[spec.name] = ConvFilter(arrays[f"{spec.name}.weight"], arrays[f"{spec.name}.bias"])
    return ModelParams(variant, layers), float(density_scale)


# ---------------------------------------------------------------------------
# Synthetic data


@dataclass
class AnnotatedImage:
    """Grayscale image in [0, 1] float32 plus its cell centroid annotation."""

    id: str
    image: np.ndarray
    centroids: list

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float32)
        if self.image.ndim != 2:
            raise ValueError(f"image {self.id!r} must be 2D")
        rows, cols = self.image.shape
        for x, y in self.centroids:
            if not (0 <= x < cols and 0 <= y < rows):
                raise ValueError(
                    f"centroid ({x}, {y}) outside {rows}x{cols} image {self.id!r}"
                )


@dataclass
class SynthConfig:
    """Parameters of the synthetic fluorescence-style image generator."""

    num_images: int = 8
    rows: int = 64
    cols: int = 64
    cells_min: int = 5
    cells_max: int = 30
    blob_sigma_range: tuple = (1.0, 2.5)
    amplitude_range: tuple = (0.3, 0.9)
    noise_sigma: float = 0.02
    background_level: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.num_images < 0:
            raise ValueError("num_images must be >= 0")
        if self.rows % 8 or self.cols % 8 or self.rows <= 0 or self.cols <= 0:
            raise ValueError("rows and cols must be positive and divisible by 8")
        if not 0 <= self.cells_min <= self.cells_max:
            raise ValueError("need 0 <= cells_min <= cells_max")
        for lo, hi in (self.blob_sigma_range, self.amplitude_range):
            if not 0 < lo <= hi:
                raise ValueError("ranges must satisfy 0 < lo <= hi")
        if self.noise_sigma < 0 or self.background_level < 0:
            raise ValueError("noise_sigma and background_level must be >= 0")


def _draw_centroids(rng, config: SynthConfig, count: int) -> list:
    # Rejection sampling with a minimum Euclidean separation of 2 px.
    points = []
    for _ in range(count):
        for _attempt in range(1000):
            x = int(rng.integers(0, config.cols))
            y = int(rng.integers(0, config.rows))
            if all((x - px) ** 2 + (y - py) ** 2 >= 4 for px, py in points):
                points.append((x, y))
                break
        else:
            raise ValueError(
                f"could not place {count} cells with 2 px separation in a "
                f"{config.rows}x{config.cols} image"
            )
    return points


def synth_generate(config: SynthConfig) -> list:
    """Deterministic synthetic dataset: Gaussian blobs + background + noise.

    Per image: the cell count is uniform in [cells_min, cells_max], centroids
    are uniform with at least 2 px separation, and every cell is rendered as
    an unnormalized Gaussian blob with per-cell sigma and amplitude drawn from
    the configured ranges. The result is clipped to [0, 1] and quantized to
    8 bits; the sampled centroids are the ground truth annotation.
    """
    rng = np.random.default_rng(config.seed)
    ys = np.arange(config.rows, dtype=np.float64)[:, None]
    xs = np.arange(config.cols, dtype=np.float64)[None, :]
    images = []
    for i in range(config.num_images):
        count = int(rng.integers(config.cells_min, config.cells_max + 1))
        centroids = _draw_centroids(rng, config, count)
        canvas = np.full((config.rows, config.cols), config.background_level, dtype=np.float64)
        for cx, cy in centroids:
            sigma = rng.uniform(*config.blob_sigma_range)
            amp = rng.uniform(*config.amplitude_range)
            canvas += amp * np.exp(
                -((xs - cx) ** 2 + (ys - cy) ** 2) / (2.0 * sigma * sigma)
            )
        if config.noise_sigma > 0:
            canvas += rng.normal(0.0, config.noise_sigma, canvas.shape)
        quantized = np.round(np.clip(canvas, 0.0, 1.0) * 255.0).astype(np.uint8)
        images.append(
            AnnotatedImage(f"img_{i:04d}", quantized.astype(np.float32) / 255.0, centroids)
        )
    return images


# ---------------------------------------------------------------------------
# Dataset directories


def save_dataset(root, images):
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "annotations").mkdir(parents=True, exist_ok=True)
    for img in images:
        quantized = np.round(img.image * 255.0).astype(np.uint8)
        write_pgm(root / "images" / f"{img.id}.pgm", quantized)
        write_centroids(root / "annotations" / f"{img.id}.csv", img.centroids)


def load_dataset(root) -> list:
    root = Path(root)
    image_dir = root / "images"
    if not image_dir.is_dir():
        raise FileNotFoundError(f"no images/ directory under {root}")
    images = []
    for pgm_path in sorted(image_dir.glob("*.pgm")):
        image_id = pgm_path.stem
        csv_path = root / "annotations" / f"{image_id}.csv"
        if not csv_path.exists():
            raise FileNotFoundError(f"missing annotation for image {image_id!r}: {csv_path}")
        raw = read_pgm(pgm_path)
        centroids = read_centroids(csv_path)
        images.append(AnnotatedImage(image_id, raw.astype(np.float32) / 255.0, centroids))
    if not images:
        raise FileNotFoundError(f"no .pgm images found under {image_dir}")
    return images
