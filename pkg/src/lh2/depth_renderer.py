"""Depth-map rotation rendering: back-projection to a point cloud, rigid
transform about a pivot, perspective reprojection with vectorized
scatter-min occlusion, unified-canvas sizing, diffuse shading, and the
image warp built on top.

Geometry conventions: pixel (u, v) = (column, row), camera looks down +z,
all depths positive.  The unified canvas is sized once for a whole set of
poses so every rendered frame shares one output geometry; its bounds are
symmetric about the source principal point (x_min + x_max = W,
y_min + y_max = H), the aspect ratio is preserved, and the enlargement
ratio is at least 2.5.  Bounds are stored with extent exactly W_new - 1
so the canvas index normalization has unit scale and introduces no
resampling of its own.
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np

from .errors import CanvasError, DomainError

_BACKGROUND = np.inf


@dataclasses.dataclass
class DepthMap:
    """H x W positive depths plus the stored quantization/normalization
    range used by smoothness losses and the PGM container."""

    values: np.ndarray
    min_depth: float
    max_depth: float

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise DomainError(f"depth must be 2-D, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise DomainError("depth contains non-finite values")
        if self.min_depth <= 0.0:
            raise DomainError(f"min_depth must be positive, got {self.min_depth}")
        if v.min() < self.min_depth - 1e-9 or v.max() > self.max_depth + 1e-9:
            raise DomainError("values outside [min_depth, max_depth]")
        self.values = v

    @staticmethod
    def from_values(values) -> "DepthMap":
        v = np.asarray(values, dtype=np.float64)
        return DepthMap(values=v, min_depth=float(v.min()), max_depth=float(v.max()))

    @property
    def shape(self):
        return self.values.shape


@dataclasses.dataclass
class CameraIntrinsics:
    K: np.ndarray
    fov_deg: float
    W: int
    H: int


def intrinsics_from_fov(W: int, H: int, fov_deg: float) -> CameraIntrinsics:
    """Pinhole intrinsics with focal length (W-1)/(2 tan(fov/2)) and the
    principal point at the pixel-grid center."""
    if W < 2 or H < 2:
        raise DomainError(f"need W, H >= 2, got ({W}, {H})")
    if not 0.0 < fov_deg < 180.0:
        raise DomainError(f"fov must be in (0, 180) degrees, got {fov_deg}")
    f = (W - 1) / (2.0 * math.tan(math.radians(fov_deg) / 2.0))
    K = np.array([[f, 0.0, (W - 1) / 2.0],
                  [0.0, f, (H - 1) / 2.0],
                  [0.0, 0.0, 1.0]])
    return CameraIntrinsics(K=K, fov_deg=float(fov_deg), W=int(W), H=int(H))


@dataclasses.dataclass
class Pose:
    """Rigid motion P' = R (P - pivot) + pivot + t."""

    R: np.ndarray
    t: np.ndarray
    pivot: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.R, dtype=np.float64)
        if R.shape != (3, 3):
            raise DomainError(f"R must be 3 x 3, got {R.shape}")
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-9:
            raise DomainError("R is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise DomainError(f"det R = {np.linalg.det(R)}, expected 1")
        self.R = R
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)
        self.pivot = np.asarray(self.pivot, dtype=np.float64).reshape(3)

    @staticmethod
    def identity(pivot=(0.0, 0.0, 0.0)) -> "Pose":
        return Pose(R=np.eye(3), t=np.zeros(3), pivot=np.asarray(pivot, dtype=np.float64))

    def compose(self, other: "Pose") -> "Pose":
        """Pose applying self first, then other.  Requires a shared pivot."""
        if np.abs(self.pivot - other.pivot).max() > 1e-12:
            raise DomainError("compose requires matching pivots")
        return Pose(R=other.R @ self.R, t=other.R @ self.t + other.t, pivot=self.pivot)


def rotation_about_axis(axis: int, angle_deg: float) -> np.ndarray:
    """Rotation matrix about the x (0), y (1), or z (2) camera axis."""
    a = math.radians(angle_deg)
    c, s = math.cos(a), math.sin(a)
    if axis == 0:
        return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])
    if axis == 1:
        return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])
    if axis == 2:
        return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    raise DomainError(f"axis must be 0, 1, or 2, got {axis}")


@dataclasses.dataclass
class LightingParams:
    k_a: float
    k_d: float
    l_dx: float
    l_dy: float

    def __post_init__(self):
        if not (0.0 <= self.k_a <= 1.0 and 0.0 <= self.k_d <= 1.0):
            raise DomainError("k_a and k_d must lie in [0, 1]")
        if self.k_a + self.k_d > 2.0:
            raise DomainError("k_a + k_d must not exceed 2")


@dataclasses.dataclass
class CanvasSpec:
    H_new: int
    W_new: int
    x_min_g: float
    x_max_g: float
    y_min_g: float
    y_max_g: float
    ratio: float


def depth_to_pointcloud(depth: DepthMap, K: CameraIntrinsics) -> np.ndarray:
    """Back-project every pixel: point = depth * K^-1 [u, v, 1]; the z
    component equals the depth exactly."""
    f = K.K[0, 0]
    cx, cy = K.K[0, 2], K.K[1, 2]
    h, w = depth.shape
    u = np.arange(w, dtype=np.float64)[None, :]
    v = np.arange(h, dtype=np.float64)[:, None]
    d = depth.values
    pts = np.empty((h, w, 3))
    pts[..., 0] = (u - cx) / f * d
    pts[..., 1] = (v - cy) / f * d
    pts[..., 2] = d
    return pts


def transform_pointcloud(points: np.ndarray, pose: Pose) -> np.ndarray:
    """P' = R (P - pivot) + pivot + t over any (..., 3) array."""
    p = np.asarray(points, dtype=np.float64)
    return (p - pose.pivot) @ pose.R.T + pose.pivot + pose.t


def project_points(points: np.ndarray, K: CameraIntrinsics):
    """Perspective projection; returns (u, v, d, valid) with d = depth w
    and valid false where w <= 0 (those points are excluded downstream)."""
    p = np.asarray(points, dtype=np.float64)
    f = K.K[0, 0]
    cx, cy = K.K[0, 2], K.K[1, 2]
    w = p[..., 2]
    valid = w > 0.0
    safe = np.where(valid, w, 1.0)
    u = f * p[..., 0] / safe + cx
    v = f * p[..., 1] / safe + cy
    return np.where(valid, u, 0.0), np.where(valid, v, 0.0), w.copy(), valid


def depth_centroid(depth: DepthMap, K: CameraIntrinsics, mask=None) -> np.ndarray:
    """Back-projected centroid of the (masked) depth pixels; the natural
    rotation pivot for a scene."""
    pts = depth_to_pointcloud(depth, K).reshape(-1, 3)
    if mask is not None:
        pts = pts[np.asarray(mask, dtype=bool).ravel()]
    if len(pts) == 0:
        raise CanvasError("no pixels to take a centroid over")
    return pts.mean(axis=0)


def make_canvas(poses, template: DepthMap, K: CameraIntrinsics,
                depths=None) -> CanvasSpec:
    """Shared output geometry for a set of poses.

    All real depth maps are projected under their poses; two synthetic
    auxiliary images (constant-depth probes under pure translations, see
    auxiliary_poses) pad the projected bounds out to exact symmetry about
    the source center, preserving aspect and enforcing W_new >= 2.5 W.
    The auxiliary images only shape the bounds; they carry no content.
    """
    poses = list(poses)
    if not poses:
        raise CanvasError("need at least one pose")
    if depths is None:
        depths = [template] * len(poses)
    if len(depths) != len(poses):
        raise CanvasError(f"{len(poses)} poses but {len(depths)} depth maps")

    W, H = K.W, K.H
    cx, cy = W / 2.0, H / 2.0
    ex = ey = 0.0
    any_valid = False
    for depth, pose in zip(depths, poses):
        pts = transform_pointcloud(depth_to_pointcloud(depth, K), pose)
        u, v, _, valid = project_points(pts, K)
        if not np.any(valid):
            continue
        any_valid = True
        ex = max(ex, cx - u[valid].min(), u[valid].max() - cx)
        ey = max(ey, cy - v[valid].min(), v[valid].max() - cy)
    if not any_valid:
        raise CanvasError("no pose projects any point in front of the camera")

    W_new = max(math.ceil(2.5 * W),
                math.ceil(2.0 * ex + 1.0),
                math.ceil((2.0 * ey + 1.0) * W / H))
    while (W_new * H) % W != 0:        # keep H_new integral at the same aspect
        W_new += 1
    H_new = W_new * H // W

    # extent exactly W_new - 1 centered on W/2: unit index scale, exact symmetry
    x_min = (W - (W_new - 1)) / 2.0
    x_max = (W + (W_new - 1)) / 2.0
    y_min = (H - (H_new - 1)) / 2.0
    y_max = (H + (H_new - 1)) / 2.0
    return CanvasSpec(H_new=int(H_new), W_new=int(W_new),
                      x_min_g=x_min, x_max_g=x_max, y_min_g=y_min, y_max_g=y_max,
                      ratio=W_new / W)


def auxiliary_poses(canvas: CanvasSpec, template: DepthMap, K: CameraIntrinsics):
    """The two boundary probes behind a canvas: a constant-depth plane at
    the template's min depth under pure translations placing its extreme
    corners exactly on the canvas bounds.  Returns (probe_depth, [pose_lo,
    pose_hi]); including their projections in a plain min/max bound pass
    reproduces the stored canvas bounds."""
    z0 = template.min_depth
    f = K.K[0, 0]
    probe = DepthMap(values=np.full(template.shape, z0), min_depth=z0, max_depth=z0)
    t_lo = np.array([canvas.x_min_g * z0 / f, canvas.y_min_g * z0 / f, 0.0])
    t_hi = np.array([(canvas.x_max_g - (K.W - 1)) * z0 / f,
                     (canvas.y_max_g - (K.H - 1)) * z0 / f, 0.0])
    zero = np.zeros(3)
    return probe, [Pose(R=np.eye(3), t=t_lo, pivot=zero),
                   Pose(R=np.eye(3), t=t_hi, pivot=zero)]


def neighborhood_offsets(radius: int):
    """All integer (di, dj) with di^2 + dj^2 <= radius^2."""
    if radius < 0:
        raise DomainError(f"radius must be >= 0, got {radius}")
    r2 = radius * radius
    return [(di, dj)
            for di in range(-radius, radius + 1)
            for dj in range(-radius, radius + 1)
            if di * di + dj * dj <= r2]


@dataclasses.dataclass
class RenderResult:
    """Canvas-sized depth render: +inf marks background, mask is true where
    any point landed, dropped counts writes outside the canvas, and
    mean_rounding_error reports the mean index-quantization residual."""

    values: np.ndarray
    mask: np.ndarray
    dropped: int
    mean_rounding_error: float


def scatter_min_render(projected, canvas: CanvasSpec, radius: int = 1) -> RenderResult:
    """Vectorized z-buffer: each valid projected point writes its depth to
    the nearest canvas pixel and every neighbor within the radius, keeping
    the minimum depth per pixel.  Independent of input ordering."""
    u, v, d, valid = projected
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    d = np.asarray(d, dtype=np.float64).ravel()
    keep = np.asarray(valid, dtype=bool).ravel()

    sx = (canvas.W_new - 1) / (canvas.x_max_g - canvas.x_min_g)
    sy = (canvas.H_new - 1) / (canvas.y_max_g - canvas.y_min_g)
    fx = (u[keep] - canvas.x_min_g) * sx
    fy = (v[keep] - canvas.y_min_g) * sy
    j = np.floor(fx + 0.5).astype(np.int64)
    i = np.floor(fy + 0.5).astype(np.int64)
    dep = d[keep]
    rounding = float(np.mean(np.abs(fx - j) + np.abs(fy - i)) / 2.0) if len(fx) else 0.0

    flat = np.full(canvas.H_new * canvas.W_new, _BACKGROUND)
    dropped = 0
    for di, dj in neighborhood_offsets(radius):
        ii = i + di
        jj = j + dj
        inb = (ii >= 0) & (ii < canvas.H_new) & (jj >= 0) & (jj < canvas.W_new)
        dropped += int(np.sum(~inb))
        np.minimum.at(flat, ii[inb] * canvas.W_new + jj[inb], dep[inb])
    values = flat.reshape(canvas.H_new, canvas.W_new)
    return RenderResult(values=values, mask=np.isfinite(values),
                        dropped=dropped, mean_rounding_error=rounding)


def center_crop(values: np.ndarray, H: int, W: int) -> np.ndarray:
    """Central H x W window of a (H_new, W_new, ...) array."""
    h_new, w_new = values.shape[:2]
    if h_new < H or w_new < W:
        raise DomainError(f"cannot crop {h_new} x {w_new} to {H} x {W}")
    oy = (h_new - H) // 2
    ox = (w_new - W) // 2
    return values[oy:oy + H, ox:ox + W]


def shade(depth: DepthMap, albedo: np.ndarray, light: LightingParams,
          K: CameraIntrinsics = None) -> np.ndarray:
    """Lambertian shading of the depth surface.

    Normals come from central differences of the back-projected surface
    (one-sided at borders); with no intrinsics the surface is treated
    orthographically as (u, v, depth).  The 2-D light direction is lifted
    to normalize(l_dx, l_dy, 1) and I = albedo * (k_a + k_d * s) with
    s = max(0, <l, n>), clamped to [0, 1].
    """
    albedo = np.asarray(albedo, dtype=np.float64)
    if albedo.ndim != 3 or albedo.shape[2] != 3 or albedo.shape[:2] != depth.shape:
        raise DomainError(f"albedo must be H x W x 3 matching the depth, "
                          f"got {albedo.shape}")
    if albedo.min() < 0.0 or albedo.max() > 1.0:
        raise DomainError("albedo must lie in [0, 1]")

    if K is not None:
        pts = depth_to_pointcloud(depth, K)
    else:
        h, w = depth.shape
        pts = np.empty((h, w, 3))
        pts[..., 0] = np.arange(w, dtype=np.float64)[None, :]
        pts[..., 1] = np.arange(h, dtype=np.float64)[:, None]
        pts[..., 2] = depth.values
    # tangents along the pixel axes, central differences inside, one-sided edges
    t_u = np.stack([np.gradient(pts[..., k], axis=1, edge_order=1) for k in range(3)],
                   axis=-1)
    t_v = np.stack([np.gradient(pts[..., k], axis=0, edge_order=1) for k in range(3)],
                   axis=-1)
    n = np.cross(t_u, t_v)
    # orient toward the camera-facing half space (+z here)
    flip = n[..., 2] < 0.0
    n[flip] *= -1.0
    norms = np.linalg.norm(n, axis=-1)
    degenerate = norms < 1e-300
    n[degenerate] = (0.0, 0.0, 1.0)
    norms = np.where(degenerate, 1.0, norms)
    n /= norms[..., None]

    l = np.array([light.l_dx, light.l_dy, 1.0])
    l /= np.linalg.norm(l)
    s = np.maximum(n @ l, 0.0)
    return np.clip(albedo * (light.k_a + light.k_d * s)[..., None], 0.0, 1.0)


def warp_image(source: np.ndarray, depth: DepthMap, pose: Pose,
               K: CameraIntrinsics, canvas: CanvasSpec, radius: int = 1):
    """Render the depth under the pose, then for every output pixel with a
    non-background depth bilinearly sample the source at the inverse-mapped
    coordinate.  Background pixels are black with mask 0.  Returns the
    center-cropped (image H x W x 3, mask H x W)."""
    source = np.asarray(source, dtype=np.float64)
    pts = transform_pointcloud(depth_to_pointcloud(depth, K), pose)
    rendered = scatter_min_render(project_points(pts, K), canvas, radius)

    h_new, w_new = rendered.values.shape
    sx = (canvas.x_max_g - canvas.x_min_g) / (canvas.W_new - 1)
    sy = (canvas.y_max_g - canvas.y_min_g) / (canvas.H_new - 1)
    jj, ii = np.meshgrid(np.arange(w_new), np.arange(h_new))
    x = canvas.x_min_g + jj * sx
    y = canvas.y_min_g + ii * sy

    f = K.K[0, 0]
    cx, cy = K.K[0, 2], K.K[1, 2]
    valid = rendered.mask
    dv = np.where(valid, rendered.values, 1.0)
    pts_c = np.stack([(x - cx) / f * dv, (y - cy) / f * dv, dv], axis=-1)
    back = (pts_c - pose.pivot - pose.t) @ pose.R + pose.pivot   # R^T via right-multiply
    w0 = back[..., 2]
    valid = valid & (w0 > 0.0)
    safe = np.where(valid, w0, 1.0)
    u0 = f * back[..., 0] / safe + cx
    v0 = f * back[..., 1] / safe + cy
    valid &= (u0 >= 0.0) & (u0 <= K.W - 1) & (v0 >= 0.0) & (v0 <= K.H - 1)

    out = np.zeros((h_new, w_new, 3))
    if np.any(valid):
        uu = u0[valid]
        vv = v0[valid]
        u_lo = np.clip(np.floor(uu).astype(np.int64), 0, K.W - 2)
        v_lo = np.clip(np.floor(vv).astype(np.int64), 0, K.H - 2)
        fu = (uu - u_lo)[:, None]
        fv = (vv - v_lo)[:, None]
        out[valid] = ((1 - fv) * ((1 - fu) * source[v_lo, u_lo]
                                  + fu * source[v_lo, u_lo + 1])
                      + fv * ((1 - fu) * source[v_lo + 1, u_lo]
                              + fu * source[v_lo + 1, u_lo + 1]))
    return center_crop(out, K.H, K.W), center_crop(valid, K.H, K.W)


def hemisphere_scene(size: int = 30, fov_deg: float = 40.0):
    """Analytic hemisphere depth bump with an axis-marked albedo: the test
    scene for the renderer demo."""
    if size < 8:
        raise DomainError(f"size must be >= 8, got {size}")
    c = (size - 1) / 2.0
    rho = 0.4 * size
    z0, bump = 10.0, 3.0
    u = np.arange(size, dtype=np.float64)[None, :]
    v = np.arange(size, dtype=np.float64)[:, None]
    rr = (u - c) ** 2 + (v - c) ** 2
    inside = rr <= rho ** 2
    z = np.full((size, size), z0)
    z[inside] -= np.sqrt(rho ** 2 - rr[inside]) * (bump / rho)
    depth = DepthMap.from_values(z)

    albedo = np.full((size, size, 3), 0.75)
    stripe = max(1, size // 10)
    albedo[:, np.abs(np.arange(size) - c) < stripe] = (0.85, 0.20, 0.20)
    albedo[np.abs(np.arange(size) - c) < stripe, :] = (0.20, 0.70, 0.25)
    K = intrinsics_from_fov(size, size, fov_deg)
    light = LightingParams(k_a=0.35, k_d=0.65, l_dx=0.4, l_dy=0.25)
    return depth, albedo, K, light


def render_hemisphere_demo(size: int = 30, rotations=(10.0, 10.0, 10.0),
                           frames_per_axis: int = 5, radius: int = 1):
    """Rotation sweeps of the shaded hemisphere about each camera axis with
    fixed lighting.  Returns a dict with the canonical shaded image, the
    shared canvas, and (name, image, mask) frames."""
    depth, albedo, K, light = hemisphere_scene(size)
    canonical = shade(depth, albedo, light, K)
    pivot = depth_centroid(depth, K)

    poses = []
    names = []
    for axis, max_angle in enumerate(rotations):
        for angle in np.linspace(-max_angle, max_angle, frames_per_axis):
            poses.append(Pose(R=rotation_about_axis(axis, float(angle)),
                              t=np.zeros(3), pivot=pivot))
            names.append(f"axis{axis}_{angle:+07.2f}deg")
    canvas = make_canvas(poses, depth, K)
    frames = [(name, *warp_image(canonical, depth, pose, K, canvas, radius))
              for name, pose in zip(names, poses)]
    return {"depth": depth, "albedo": albedo, "intrinsics": K, "light": light,
            "canonical": canonical, "canvas": canvas, "frames": frames}
