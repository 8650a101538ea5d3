"""Latent features for patch renders.

Built-in extractors are deterministic image statistics; ``external``
delegates to a user command through a small file protocol:

1. every image is written as a PNG, and a manifest lists one absolute path
   per line (patch-major, view-minor order);
2. the command is run with the manifest path as its only argument;
3. it prints the path of a reply file on stdout. The reply is
   ``b"H3DGFEAT"``, ``u32 N``, ``u32 C_l`` then ``N * C_l`` little-endian
   float32 values, row-major, one row per manifest line.
"""

from __future__ import annotations

import shlex
import struct
import subprocess
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ExtractorError
from .render import load_png, render_patch, save_png

FEATURE_MAGIC = b"H3DGFEAT"
KINDS = ("downsample-gray", "rgb-hist", "external")
LUMA = np.array([0.2126, 0.7152, 0.0722])


@dataclass(frozen=True)
class ExtractorSpec:
    kind: str = "downsample-gray"
    grid: int = 8
    bins: int = 4
    command: tuple = field(default_factory=tuple)
    timeout: float = 300.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown extractor kind {self.kind!r}; expected one of {KINDS}")
        if self.kind == "downsample-gray" and int(self.grid) < 1:
            raise ConfigError("grid must be >= 1")
        if self.kind == "rgb-hist" and int(self.bins) < 1:
            raise ConfigError("bins must be >= 1")
        if self.kind == "external":
            cmd = self.command
            if isinstance(cmd, str):
                cmd = tuple(shlex.split(cmd))
                object.__setattr__(self, "command", cmd)
            if not cmd:
                raise ConfigError("external extractor needs a command")

    @property
    def extractor_id(self):
        if self.kind == "downsample-gray":
            return f"downsample-gray/{self.grid}"
        if self.kind == "rgb-hist":
            return f"rgb-hist/{self.bins}"
        return "external:" + " ".join(self.command)


@dataclass
class FeatureMatrix:
    matrix: np.ndarray  # (N, C_l)
    extractor_id: str

    @property
    def n_features(self):
        return self.matrix.shape[1]


def resize_bilinear(img, out_h, out_w):
    """Bilinear resample with half-pixel centres and edge clamping."""
    h, w = img.shape[:2]

    def axis(n_in, n_out):
        pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        pos = np.clip(pos, 0.0, n_in - 1)
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    y0, y1, fy = axis(h, out_h)
    x0, x1, fx = axis(w, out_w)
    if img.ndim == 3:
        fy, fx = fy[:, None, None], fx[None, :, None]
    else:
        fy, fx = fy[:, None], fx[None, :]
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bottom = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return top * (1 - fy) + bottom * fy


def downsample_gray(rgb, grid=8):
    luma = np.asarray(rgb, dtype=np.float64) @ LUMA
    return resize_bilinear(luma, grid, grid).reshape(-1)


def rgb_histogram(rgb, bins=4):
    """Joint RGB histogram with ``bins`` per channel, normalized to sum 1."""
    px = np.clip(np.asarray(rgb, dtype=np.float64).reshape(-1, 3), 0.0, 1.0)
    idx = np.minimum((px * bins).astype(int), bins - 1)
    flat = (idx[:, 0] * bins + idx[:, 1]) * bins + idx[:, 2]
    hist = np.bincount(flat, minlength=bins**3).astype(np.float64)
    return hist / hist.sum()


def _builtin(image, spec):
    rgb = getattr(image, "rgb", image)
    if spec.kind == "downsample-gray":
        return downsample_gray(rgb, spec.grid)
    return rgb_histogram(rgb, spec.bins)


def encode_reply(matrix):
    matrix = np.ascontiguousarray(matrix, dtype="<f4")
    n, c = matrix.shape
    return FEATURE_MAGIC + struct.pack("<II", n, c) + matrix.tobytes()


def decode_reply(data):
    if len(data) < 16 or data[:8] != FEATURE_MAGIC:
        raise ExtractorError("reply does not start with the H3DGFEAT magic")
    n, c = struct.unpack("<II", data[8:16])
    expected = 16 + 4 * n * c
    if len(data) != expected:
        raise ExtractorError(f"reply holds {len(data)} bytes, expected {expected} for N={n}, C_l={c}")
    return np.frombuffer(data, dtype="<f4", offset=16).reshape(n, c).astype(np.float64)


def run_external(images, spec, workdir=None):
    """Run the external extractor once over ``images``; returns ``(len(images), C_l)``."""
    with tempfile.TemporaryDirectory(dir=workdir) as tmp:
        tmp = Path(tmp)
        paths = []
        for i, image in enumerate(images):
            p = (tmp / f"img_{i:05d}.png").resolve()
            save_png(image, p, with_alpha=False)
            paths.append(str(p))
        manifest = tmp / "manifest.txt"
        manifest.write_text("\n".join(paths) + "\n", encoding="utf-8")
        try:
            proc = subprocess.run(
                [*spec.command, str(manifest)], capture_output=True, text=True,
                timeout=spec.timeout, cwd=tmp,
            )
        except (OSError, subprocess.TimeoutExpired) as exc:
            raise ExtractorError(f"could not run external extractor: {exc}") from exc
        diag = f"exit={proc.returncode}\nstdout:\n{proc.stdout}\nstderr:\n{proc.stderr}"
        if proc.returncode != 0:
            raise ExtractorError("external extractor exited with nonzero status", diag)
        lines = [ln for ln in proc.stdout.splitlines() if ln.strip()]
        if len(lines) != 1:
            raise ExtractorError("external extractor must print exactly one reply path", diag)
        reply = Path(lines[0].strip())
        if not reply.is_absolute():
            reply = tmp / reply
        try:
            data = reply.read_bytes()
        except OSError as exc:
            raise ExtractorError(f"cannot read reply file {reply}: {exc}", diag) from exc
        try:
            feats = decode_reply(data)
        except ExtractorError as exc:
            raise ExtractorError(str(exc), diag) from None
        if feats.shape[0] != len(images):
            raise ExtractorError(f"reply has {feats.shape[0]} rows for {len(images)} images", diag)
        return feats


def extract(images, spec=None, *, groups=None):
    """Feature rows for ``images``, mean-pooled within each group.

    ``images`` is either a flat sequence (one row per image) or, when
    ``groups`` is None, a sequence of per-patch sequences of views.
    """
    spec = spec or ExtractorSpec()
    if groups is None:
        nested = [list(v) if isinstance(v, (list, tuple)) else [v] for v in images]
    else:
        nested = [list(g) for g in groups]
    if any(len(g) == 0 for g in nested):
        raise ConfigError("every patch needs at least one image")
    flat = [img for g in nested for img in g]
    if spec.kind == "external":
        rows = run_external(flat, spec)
    else:
        rows = [_builtin(img, spec) for img in flat]
        if len({r.shape for r in rows}) > 1:
            raise ExtractorError("feature dimension differs between images")
        rows = np.stack(rows)
    out = np.empty((len(nested), rows.shape[1]))
    lo = 0
    for p, g in enumerate(nested):
        out[p] = rows[lo:lo + len(g)].mean(axis=0)
        lo += len(g)
    if not np.all(np.isfinite(out)):
        raise ExtractorError("extractor produced non-finite features")
    return FeatureMatrix(matrix=out, extractor_id=spec.extractor_id)


def render_patch_views(cloud, assignment, poses, background=None):
    n = int(assignment.n_patches)
    return [[render_patch(cloud, assignment, p, pose, background) for pose in poses] for p in range(n)]


def patch_feature_pipeline(cloud, assignment, poses, spec=None, background=None):
    """Render every patch from every pose and extract one pooled row per patch."""
    if len(poses) == 0:
        raise ConfigError("at least one pose is required")
    views = render_patch_views(cloud, assignment, poses, background)
    return extract(views, spec)


def standardize(matrix, eps=1e-8):
    """Per-column z-score across rows."""
    matrix = np.asarray(matrix, dtype=np.float64)
    mu = matrix.mean(axis=0)
    sd = matrix.std(axis=0)
    return (matrix - mu) / (sd + eps)


def echo_extractor_main(argv=None):
    """Reference external extractor: flattened 4x4 luma downsample per image.

    Usage: ``python -m hyper3dg.features MANIFEST``.
    """
    import sys

    argv = sys.argv[1:] if argv is None else argv
    manifest = Path(argv[0])
    paths = [ln.strip() for ln in manifest.read_text(encoding="utf-8").splitlines() if ln.strip()]
    rows = np.stack([downsample_gray(load_png(p).rgb, 4) for p in paths])
    reply = manifest.with_name("reply.bin")
    reply.write_bytes(encode_reply(rows))
    print(reply)
    return 0


if __name__ == "__main__":
    raise SystemExit(echo_extractor_main())
