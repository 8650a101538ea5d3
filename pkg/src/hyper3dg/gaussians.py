"""3D Gaussian clouds: data model, attribute matrix, PLY I/O, synthetic init.

A cloud of ``M`` Gaussians is stored as one ``(M, 14)`` float64 matrix with
the column layout::

    [x y z | opacity_logit | log_scale(3) | quaternion w x y z | r g b]
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, NumericalError, PlyParseError

NUM_ATTRIBUTES = 14

POSITION = slice(0, 3)
OPACITY = 3
SCALE = slice(4, 7)
ROTATION = slice(7, 11)
COLOR = slice(11, 14)

PLY_PROPERTIES = (
    "x", "y", "z",
    "opacity",
    "scale_0", "scale_1", "scale_2",
    "rot_0", "rot_1", "rot_2", "rot_3",
    "f_dc_0", "f_dc_1", "f_dc_2",
)

SHAPES = ("sphere", "box", "two-blobs")


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def logit(p):
    return np.log(p) - np.log1p(-p)


def quat_to_rotmat(q):
    """Rotation matrices from (..., 4) quaternions in (w, x, y, z) order."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    r = np.empty(q.shape[:-1] + (3, 3))
    r[..., 0, 0] = 1 - 2 * (y * y + z * z)
    r[..., 0, 1] = 2 * (x * y - w * z)
    r[..., 0, 2] = 2 * (x * z + w * y)
    r[..., 1, 0] = 2 * (x * y + w * z)
    r[..., 1, 1] = 1 - 2 * (x * x + z * z)
    r[..., 1, 2] = 2 * (y * z - w * x)
    r[..., 2, 0] = 2 * (x * z - w * y)
    r[..., 2, 1] = 2 * (y * z + w * x)
    r[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return r


def normalize_quaternions(q):
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(norm == 0) or not np.all(np.isfinite(norm)):
        raise NumericalError("cannot normalize zero or non-finite quaternion")
    return q / norm


@dataclass(frozen=True)
class Gaussian:
    """A single anisotropic 3D Gaussian."""

    position: np.ndarray
    opacity_logit: float
    log_scale: np.ndarray
    rotation: np.ndarray
    color: np.ndarray

    @property
    def opacity(self):
        return float(sigmoid(self.opacity_logit))

    def as_row(self):
        return np.concatenate([
            np.asarray(self.position, dtype=np.float64).reshape(3),
            [float(self.opacity_logit)],
            np.asarray(self.log_scale, dtype=np.float64).reshape(3),
            np.asarray(self.rotation, dtype=np.float64).reshape(4),
            np.asarray(self.color, dtype=np.float64).reshape(3),
        ])

    @classmethod
    def from_row(cls, row):
        row = np.asarray(row, dtype=np.float64)
        return cls(
            position=row[POSITION].copy(),
            opacity_logit=float(row[OPACITY]),
            log_scale=row[SCALE].copy(),
            rotation=row[ROTATION].copy(),
            color=row[COLOR].copy(),
        )


def covariance(g):
    """World-space covariance ``R S S^T R^T`` of a Gaussian (or a cloud).

    Accepts a :class:`Gaussian` (returns 3x3) or a :class:`GaussianCloud`
    (returns ``(M, 3, 3)``).
    """
    if isinstance(g, GaussianCloud):
        log_scale, rotation = g.log_scales, g.rotations
    else:
        log_scale = np.asarray(g.log_scale, dtype=np.float64)
        rotation = np.asarray(g.rotation, dtype=np.float64)
        if not (np.all(np.isfinite(log_scale)) and np.all(np.isfinite(rotation))
                and np.all(np.isfinite(g.position)) and np.isfinite(g.opacity_logit)):
            raise NumericalError("Gaussian has non-finite fields")
    if not (np.all(np.isfinite(log_scale)) and np.all(np.isfinite(rotation))):
        raise NumericalError("non-finite scale or rotation")
    r = quat_to_rotmat(normalize_quaternions(rotation))
    m = r * np.exp(log_scale)[..., None, :]
    return m @ np.swapaxes(m, -1, -2)


class GaussianCloud:
    """An ordered collection of Gaussians backed by an ``(M, 14)`` matrix."""

    def __init__(self, params):
        params = np.array(params, dtype=np.float64, copy=True)
        if params.ndim != 2 or params.shape[1] != NUM_ATTRIBUTES:
            raise ConfigError(f"attribute matrix must be (M, 14), got {params.shape}")
        self._params = params

    @classmethod
    def from_attribute_matrix(cls, matrix):
        return cls(matrix)

    @classmethod
    def from_gaussians(cls, gaussians):
        rows = [g.as_row() for g in gaussians]
        return cls(np.reshape(rows, (len(rows), NUM_ATTRIBUTES)))

    @classmethod
    def empty(cls):
        return cls(np.zeros((0, NUM_ATTRIBUTES)))

    def to_attribute_matrix(self):
        return self._params.copy()

    @property
    def params(self):
        """Read-only view of the attribute matrix."""
        view = self._params.view()
        view.flags.writeable = False
        return view

    def __len__(self):
        return self._params.shape[0]

    def __getitem__(self, index):
        if isinstance(index, (int, np.integer)):
            return Gaussian.from_row(self._params[index])
        return GaussianCloud(self._params[index])

    def __iter__(self):
        for row in self._params:
            yield Gaussian.from_row(row)

    def __eq__(self, other):
        if not isinstance(other, GaussianCloud):
            return NotImplemented
        return self._params.shape == other._params.shape and bool(np.array_equal(self._params, other._params))

    def __repr__(self):
        return f"GaussianCloud(M={len(self)})"

    def copy(self):
        return GaussianCloud(self._params)

    @property
    def positions(self):
        return self._params[:, POSITION]

    @property
    def opacity_logits(self):
        return self._params[:, OPACITY]

    @property
    def opacities(self):
        return sigmoid(self._params[:, OPACITY])

    @property
    def log_scales(self):
        return self._params[:, SCALE]

    @property
    def rotations(self):
        return self._params[:, ROTATION]

    @property
    def colors(self):
        return self._params[:, COLOR]

    @property
    def centroid(self):
        return self.positions.mean(axis=0)

    @property
    def bounding_radius(self):
        """Largest distance from the centroid to a Gaussian center."""
        if len(self) == 0:
            return 0.0
        return float(np.linalg.norm(self.positions - self.centroid, axis=1).max())

    def check_finite(self):
        if not np.all(np.isfinite(self._params)):
            raise NumericalError("cloud contains non-finite attributes")
        return self


def to_attribute_matrix(cloud):
    return cloud.to_attribute_matrix()


def from_attribute_matrix(matrix):
    return GaussianCloud.from_attribute_matrix(matrix)


def default_gaussian(position=(0.0, 0.0, 0.0), opacity=0.1, scale=1.0, color=(0.5, 0.5, 0.5)):
    return Gaussian(
        position=np.asarray(position, dtype=np.float64),
        opacity_logit=float(logit(opacity)),
        log_scale=np.full(3, np.log(scale)),
        rotation=np.array([1.0, 0.0, 0.0, 0.0]),
        color=np.asarray(color, dtype=np.float64),
    )


# ---------------------------------------------------------------------------
# PLY persistence


def save_ply(cloud, path):
    """Write ``cloud`` as a binary little-endian vertex PLY.

    The file is written to a temporary sibling and renamed into place.
    """
    path = Path(path)
    data = np.ascontiguousarray(cloud.to_attribute_matrix().astype("<f4"))
    header = "ply\nformat binary_little_endian 1.0\n"
    header += f"element vertex {len(cloud)}\n"
    header += "".join(f"property float {name}\n" for name in PLY_PROPERTIES)
    header += "end_header\n"
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(data.tobytes())
    os.replace(tmp, path)


_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def _read_header(raw):
    offset = 0
    lines = []
    while True:
        end = raw.find(b"\n", offset)
        if end < 0:
            raise PlyParseError("unterminated PLY header", offset)
        line = raw[offset:end].rstrip(b"\r").decode("ascii", errors="replace")
        lines.append((offset, line))
        offset = end + 1
        if line.strip() == "end_header":
            return lines, offset


def load_ply(path):
    """Read a Gaussian cloud from a vertex PLY.

    Extra vertex properties (e.g. higher SH bands or normals) are skipped.
    """
    raw = Path(path).read_bytes()
    lines, body_start = _read_header(raw)
    if not lines or lines[0][1].strip() != "ply":
        raise PlyParseError("missing 'ply' magic line", 0)
    fmt_seen = False
    elements = []  # (name, count, [(prop, dtype)])
    for off, line in lines[1:-1]:
        tokens = line.split()
        if not tokens or tokens[0] in ("comment", "obj_info"):
            continue
        if tokens[0] == "format":
            if tokens[1:] != ["binary_little_endian", "1.0"]:
                raise PlyParseError(f"unsupported format {' '.join(tokens[1:])!r}", off)
            fmt_seen = True
        elif tokens[0] == "element":
            if len(tokens) != 3 or not tokens[2].isdigit():
                raise PlyParseError(f"malformed element line {line!r}", off)
            elements.append((tokens[1], int(tokens[2]), []))
        elif tokens[0] == "property":
            if not elements:
                raise PlyParseError("property before any element", off)
            if tokens[1] == "list":
                raise PlyParseError("list properties are not supported", off)
            if len(tokens) != 3 or tokens[1] not in _PLY_TYPES:
                raise PlyParseError(f"malformed property line {line!r}", off)
            elements[-1][2].append((tokens[2], "<" + _PLY_TYPES[tokens[1]]))
        else:
            raise PlyParseError(f"unexpected header line {line!r}", off)
    if not fmt_seen:
        raise PlyParseError("missing format line", lines[0][0])

    offset = body_start
    vertex = None
    for name, count, props in elements:
        dtype = np.dtype(props)
        nbytes = dtype.itemsize * count
        if offset + nbytes > len(raw):
            raise PlyParseError(
                f"element '{name}' declares {count} entries but the body is too short", offset
            )
        if name == "vertex":
            vertex = np.frombuffer(raw, dtype=dtype, count=count, offset=offset)
        offset += nbytes
    if vertex is None:
        raise PlyParseError("no 'vertex' element", body_start)
    if offset != len(raw):
        raise PlyParseError(f"{len(raw) - offset} trailing bytes after declared elements", offset)
    missing = [p for p in PLY_PROPERTIES if p not in vertex.dtype.names]
    if missing:
        raise PlyParseError(f"missing vertex properties {missing}", body_start)
    if len(vertex) == 0:
        raise PlyParseError("M >= 1 required: vertex element is empty", body_start)
    matrix = np.stack([vertex[p].astype(np.float64) for p in PLY_PROPERTIES], axis=1)
    return GaussianCloud(matrix)


# ---------------------------------------------------------------------------
# Synthetic initialization


def _random_unit_quaternions(rng, m):
    q = rng.standard_normal((m, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return q


def _uniform_ball(rng, m, radius):
    direction = rng.standard_normal((m, 3))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    r = radius * rng.random(m) ** (1.0 / 3.0)
    return direction * r[:, None]


def synth_init(shape, m, seed=0, *, radius=1.0, separation=5.0, opacity=0.1, scale=None):
    """Deterministic synthetic cloud standing in for a pretrained 3D generator.

    ``sphere`` samples uniformly in a ball of ``radius``; ``box`` uniformly
    in the cube ``[-radius, radius]^3``; ``two-blobs`` places half the
    points in each of two balls of ``radius`` centred at
    ``(+-separation, 0, 0)``, each blob with its own uniform color.
    """
    if shape not in SHAPES:
        raise ConfigError(f"unknown shape {shape!r}; expected one of {SHAPES}")
    m = int(m)
    if m < 1:
        raise ConfigError("M >= 1 required")
    rng = np.random.default_rng(seed)
    if shape == "sphere":
        positions = _uniform_ball(rng, m, radius)
        volume = 4.0 / 3.0 * np.pi * radius**3
        colors = rng.random((m, 3))
    elif shape == "box":
        positions = rng.uniform(-radius, radius, size=(m, 3))
        volume = (2.0 * radius) ** 3
        colors = rng.random((m, 3))
    else:
        n_left = (m + 1) // 2
        side = np.where(np.arange(m) < n_left, -1.0, 1.0)
        positions = _uniform_ball(rng, m, radius)
        positions[:, 0] += side * separation
        blob_colors = rng.random((2, 3))
        colors = blob_colors[(side > 0).astype(int)]
        volume = 2 * 4.0 / 3.0 * np.pi * radius**3
    if scale is None:
        # about half the mean inter-point spacing
        scale = 0.5 * (volume / m) ** (1.0 / 3.0)
    params = np.empty((m, NUM_ATTRIBUTES))
    params[:, POSITION] = positions
    params[:, OPACITY] = logit(opacity)
    params[:, SCALE] = np.log(scale)
    params[:, ROTATION] = _random_unit_quaternions(rng, m)
    params[:, COLOR] = colors
    return GaussianCloud(params)


def two_blob_membership(cloud):
    """Ground-truth blob index (0 for -x, 1 for +x) of a two-blobs cloud."""
    return (cloud.positions[:, 0] > 0).astype(int)
