"""Landmark-driven spatial attention priors.

A unit's prior map is built from two Gaussians centred on its two facial
sub-centers, max-combined and normalised into a distribution over the
``(side/8) x (side/8)`` token grid. Sub-center positions are configuration: a
rules file maps each unit to two anchor landmarks plus an offset measured in
"scale" units, where scale is the distance between the two inner eye corners.

Grid convention: token cell ``k`` covers pixels ``[8k, 8k+8)``, so a pixel
coordinate ``p`` maps to the continuous grid coordinate ``(p - 3.5) / 8``
(cell centers). Horizontal mirroring reflects pixel-center coordinates,
``x -> (width - 1) - x``; with the cell-center convention this commutes
exactly with flipping the grid.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from importlib import resources

import numpy as np

from .errors import (
    ConfigurationError,
    DataError,
    DimensionError,
    GeometryError,
    VersionError,
)

_MAP_MAGIC = b"APM1"


def scheme_point_count(scheme: str) -> int:
    if scheme.startswith("synth"):
        try:
            m = int(scheme[5:])
        except ValueError as exc:
            raise ConfigurationError(f"unknown landmark scheme {scheme!r}") from exc
        return 2 + 2 * m
    if scheme in ("49", "66", "68"):
        return int(scheme)
    raise ConfigurationError(f"unknown landmark scheme {scheme!r}")


@dataclass
class LandmarkSet:
    """Pixel-coordinate landmarks under a named layout convention."""

    points: np.ndarray  # (n, 2) of (x, y)
    scheme: str

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 2:
            raise DataError(f"landmarks must be (n, 2), got {self.points.shape}")
        if not np.all(np.isfinite(self.points)):
            raise DataError("landmark coordinates must be finite")
        expected = scheme_point_count(self.scheme)
        if self.points.shape[0] != expected:
            raise DataError(
                f"scheme {self.scheme!r} expects {expected} points, got {self.points.shape[0]}"
            )


@dataclass
class SubCenterRule:
    au_id: int
    left: int
    right: int
    dx: float = 0.0
    dy: float = 0.0


@dataclass
class SchemeRules:
    scheme: str
    eye_corners: tuple
    mirror: list
    rules: dict  # au_id -> SubCenterRule

    def validate(self) -> None:
        n = scheme_point_count(self.scheme)
        if sorted(self.mirror) != list(range(n)):
            raise ConfigurationError(f"mirror permutation for scheme {self.scheme} is invalid")
        for i, j in enumerate(self.mirror):
            if self.mirror[j] != i:
                raise ConfigurationError(
                    f"mirror permutation for scheme {self.scheme} is not an involution at {i}"
                )
        for idx in self.eye_corners:
            if not 0 <= idx < n:
                raise ConfigurationError(f"eye corner index {idx} out of range for {self.scheme}")
        for rule in self.rules.values():
            for idx in (rule.left, rule.right):
                if not 0 <= idx < n:
                    raise ConfigurationError(
                        f"anchor {idx} of au {rule.au_id} out of range for scheme {self.scheme}"
                    )


@dataclass
class PriorAttentionMap:
    """Normalized ground-truth spatial attention for one unit."""

    au_id: int
    grid: np.ndarray

    def validate(self, tol: float = 1e-6) -> None:
        if np.any(self.grid <= 0.0):
            raise DataError(f"prior map for au {self.au_id} has non-positive entries")
        if abs(float(self.grid.sum()) - 1.0) > tol:
            raise DataError(f"prior map for au {self.au_id} does not sum to 1")


@dataclass
class SimilarityTransform:
    """Rotation + isotropic scale + translation, p -> s R p + t."""

    angle: float
    scale: float
    tx: float
    ty: float

    def __post_init__(self):
        if self.scale <= 0:
            raise GeometryError(f"similarity scale must be positive, got {self.scale}")

    @property
    def rotation(self) -> np.ndarray:
        c, s = np.cos(self.angle), np.sin(self.angle)
        return np.array([[c, -s], [s, c]])

    def apply(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return pts @ (self.scale * self.rotation).T + np.array([self.tx, self.ty])

    def inverse(self) -> "SimilarityTransform":
        inv_scale = 1.0 / self.scale
        c, s = np.cos(-self.angle), np.sin(-self.angle)
        tx = -inv_scale * (c * self.tx - s * self.ty)
        ty = -inv_scale * (s * self.tx + c * self.ty)
        return SimilarityTransform(-self.angle, inv_scale, tx, ty)


def fit_similarity(landmarks: LandmarkSet, template: LandmarkSet) -> SimilarityTransform:
    """Least-squares similarity transform mapping ``landmarks`` onto ``template``."""
    if landmarks.scheme != template.scheme:
        raise DataError(
            f"scheme mismatch: {landmarks.scheme!r} vs {template.scheme!r}"
        )
    src = landmarks.points
    dst = template.points
    if src.shape[0] < 2:
        raise GeometryError("similarity fit needs at least 2 points")
    mu_s = src.mean(axis=0)
    mu_t = dst.mean(axis=0)
    sc = src - mu_s
    tc = dst - mu_t
    var_s = float((sc * sc).sum()) / src.shape[0]
    if var_s <= 0.0:
        raise GeometryError("similarity fit is degenerate: all points coincide")
    cov = tc.T @ sc / src.shape[0]
    u, d, vt = np.linalg.svd(cov)
    sign = np.ones(2)
    if np.linalg.det(u @ vt) < 0:
        sign[1] = -1.0
    rot = u @ np.diag(sign) @ vt
    scale = float((d * sign).sum()) / var_s
    t = mu_t - scale * rot @ mu_s
    angle = float(np.arctan2(rot[1, 0], rot[0, 0]))
    return SimilarityTransform(angle, scale, float(t[0]), float(t[1]))


def apply_transform(image: np.ndarray, landmarks: LandmarkSet,
                    transform: SimilarityTransform, out_size: int):
    """Resample ``image`` (C,H,W) under ``transform`` and move the landmarks with it.

    The output pixel at (x, y) is the bilinear sample of the input at the
    inverse-transformed location; samples outside the input fill with zero.
    """
    if out_size <= 0:
        raise DimensionError(f"out_size must be positive, got {out_size}")
    img = np.asarray(image, dtype=np.float64)
    C, H, W = img.shape
    inv = transform.inverse()
    ys, xs = np.mgrid[0:out_size, 0:out_size]
    coords = np.stack([xs.ravel(), ys.ravel()], axis=1).astype(np.float64)
    src = inv.apply(coords)
    sx, sy = src[:, 0], src[:, 1]
    x0 = np.floor(sx).astype(np.int64)
    y0 = np.floor(sy).astype(np.int64)
    wx = sx - x0
    wy = sy - y0
    out = np.zeros((C, out_size * out_size), dtype=img.dtype)
    flat = img.reshape(C, -1)
    for dy_, dx_ in ((0, 0), (0, 1), (1, 0), (1, 1)):
        xi = x0 + dx_
        yi = y0 + dy_
        weight = (wx if dx_ else 1.0 - wx) * (wy if dy_ else 1.0 - wy)
        valid = (xi >= 0) & (xi < W) & (yi >= 0) & (yi < H)
        idx = np.clip(yi, 0, H - 1) * W + np.clip(xi, 0, W - 1)
        out += flat[:, idx] * (weight * valid)
    out_img = out.reshape(C, out_size, out_size)
    out_lms = LandmarkSet(transform.apply(landmarks.points), landmarks.scheme)
    return out_img, out_lms


def mirror_landmarks(landmarks: LandmarkSet, width: float, rules: SchemeRules) -> LandmarkSet:
    """Reflect landmarks about the vertical image midline, x -> (width-1)-x."""
    pts = landmarks.points[rules.mirror].copy()
    pts[:, 0] = (width - 1.0) - pts[:, 0]
    return LandmarkSet(pts, landmarks.scheme)


def compute_subcenters(landmarks: LandmarkSet, rules: SchemeRules, au_ids=None) -> dict:
    """Per-unit pair of sub-center points (pixels) from anchor landmarks and offsets.

    "scale" is the distance between the two inner eye corners; the stored x
    offset is negated for the right anchor so the pair stays symmetric.
    """
    if landmarks.scheme != rules.scheme:
        raise ConfigurationError(
            f"rules are for scheme {rules.scheme!r}, landmarks use {landmarks.scheme!r}"
        )
    pts = landmarks.points
    ca, cb = rules.eye_corners
    scale = float(np.linalg.norm(pts[ca] - pts[cb]))
    if au_ids is None:
        au_ids = sorted(rules.rules)
    out = {}
    for au in au_ids:
        rule = rules.rules.get(au)
        if rule is None:
            raise ConfigurationError(f"no sub-center rule for au {au} in scheme {rules.scheme}")
        left = pts[rule.left] + scale * np.array([rule.dx, rule.dy])
        right = pts[rule.right] + scale * np.array([-rule.dx, rule.dy])
        out[au] = np.stack([left, right])
    return out


def to_grid_coords(points: np.ndarray, grid_side: int) -> np.ndarray:
    """Continuous token-grid coordinates of pixel points, clamped to the grid."""
    g = (np.asarray(points, dtype=np.float64) - 3.5) / 8.0
    return np.clip(g, 0.0, grid_side - 1.0)


def gaussian_prior(subcenter, delta: float, grid_side: int) -> np.ndarray:
    """Unnormalized Gaussian attention around one grid-coordinate sub-center.

    The value at cell (a, b) is ``exp(-((a-ax)^2 + (b-ay)^2) / (2 delta^2))``
    where (ax, ay) is the sub-center; all values lie in (0, 1].
    """
    if delta <= 0:
        raise ConfigurationError(f"delta must be positive, got {delta}")
    ax, ay = float(subcenter[0]), float(subcenter[1])
    cols = np.arange(grid_side, dtype=np.float64)
    rows = np.arange(grid_side, dtype=np.float64)
    d2 = (cols[None, :] - ax) ** 2 + (rows[:, None] - ay) ** 2
    return np.exp(-d2 / (2.0 * delta * delta))


def combine_and_normalize(m1: np.ndarray, m2: np.ndarray, au_id: int = -1) -> PriorAttentionMap:
    """Elementwise max of the two sub-center maps, normalized to sum to 1."""
    if m1.shape != m2.shape:
        raise DimensionError(f"cannot combine grids of shapes {m1.shape} and {m2.shape}")
    grid = np.maximum(m1, m2)
    grid = grid / grid.sum()
    return PriorAttentionMap(au_id, grid)


def mirror_prior(pmap: PriorAttentionMap) -> PriorAttentionMap:
    if pmap.grid.shape[0] != pmap.grid.shape[1]:
        raise DimensionError(f"mirror_prior needs a square grid, got {pmap.grid.shape}")
    return PriorAttentionMap(pmap.au_id, pmap.grid[:, ::-1].copy())


def generate_prior_maps(landmarks: LandmarkSet, rules: SchemeRules, au_ids,
                        side: int, delta: float) -> list:
    """Full pipeline: sub-centers -> grid coordinates -> Gaussians -> combined maps."""
    if side % 8 != 0:
        raise ConfigurationError(f"side must be divisible by 8, got {side}")
    grid_side = side // 8
    centers = compute_subcenters(landmarks, rules, au_ids)
    maps = []
    for au in au_ids:
        g = to_grid_coords(centers[au], grid_side)
        m1 = gaussian_prior(g[0], delta, grid_side)
        m2 = gaussian_prior(g[1], delta, grid_side)
        maps.append(combine_and_normalize(m1, m2, au))
    return maps


# ---------------------------------------------------------------------------
# rules and map files


def _parse_kv_line(line: str) -> dict:
    out = {}
    for token in line.split():
        if "=" not in token:
            raise DataError(f"malformed rules token {token!r}")
        key, value = token.split("=", 1)
        out[key] = value
    return out


def parse_rules(text: str) -> dict:
    """Parse a rules document into ``{scheme: SchemeRules}``."""
    schemes = {}
    current = None
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        kv = _parse_kv_line(line)
        if "scheme" in kv:
            current = SchemeRules(kv["scheme"], (), [], {})
            schemes[current.scheme] = current
            continue
        if current is None:
            raise DataError("rules entry appears before any scheme declaration")
        if "eyes" in kv:
            a, b = kv["eyes"].split(",")
            current.eye_corners = (int(a), int(b))
        elif "mirror" in kv:
            current.mirror = [int(v) for v in kv["mirror"].split(",")]
        elif "au" in kv:
            rule = SubCenterRule(
                au_id=int(kv["au"]),
                left=int(kv["left"]),
                right=int(kv["right"]),
                dx=float(kv.get("dx", 0.0)),
                dy=float(kv.get("dy", 0.0)),
            )
            current.rules[rule.au_id] = rule
        else:
            raise DataError(f"unrecognized rules line {raw!r}")
    for rules in schemes.values():
        rules.validate()
    return schemes


def load_rules(path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_rules(fh.read())


def default_rules() -> dict:
    text = resources.files("audet.data").joinpath("subcenter_rules.txt").read_text("utf-8")
    return parse_rules(text)


def load_landmarks_csv(path) -> list:
    """Rows of ``sample_id,x0,y0,x1,y1,...`` as ``[(sample_id, (n,2) array)]``."""
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for raw in fh:
            line = raw.strip()
            if not line:
                continue
            parts = line.split(",")
            vals = np.array([float(v) for v in parts[1:]], dtype=np.float64)
            if vals.size % 2 != 0:
                raise DataError(f"odd coordinate count in landmarks row {parts[0]!r}")
            rows.append((parts[0], vals.reshape(-1, 2)))
    return rows


def default_template(scheme: str = "49") -> LandmarkSet:
    """The shipped 200x200 alignment template (eye line horizontal)."""
    text = resources.files("audet.data").joinpath(f"template_{scheme}.csv").read_text("utf-8")
    parts = text.strip().split(",")
    vals = np.array([float(v) for v in parts[1:]], dtype=np.float64)
    return LandmarkSet(vals.reshape(-1, 2), scheme)


def write_prior_map(path, pmap: PriorAttentionMap) -> None:
    """Portable float grid: 16-byte header (magic, grid side, au id), float64 row-major."""
    grid = np.ascontiguousarray(pmap.grid, dtype=np.float64)
    header = struct.pack("<4sIII", _MAP_MAGIC, grid.shape[0], pmap.au_id & 0xFFFFFFFF, 0)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(grid.tobytes())


def read_prior_map(path) -> PriorAttentionMap:
    with open(path, "rb") as fh:
        header = fh.read(16)
        if len(header) != 16 or header[:4] != _MAP_MAGIC:
            raise VersionError(f"{path} is not a prior map file")
        _, side, au_id, _ = struct.unpack("<4sIII", header)
        data = np.frombuffer(fh.read(), dtype=np.float64)
    if data.size != side * side:
        raise VersionError(f"{path} payload does not match declared grid side {side}")
    return PriorAttentionMap(int(au_id), data.reshape(side, side).copy())
