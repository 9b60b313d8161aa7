"""Mesh ingestion, normalization, surface sampling, cameras, and projection.

Everything downstream operates on normalized meshes (bounding box centered at
the origin, diagonal length 1) so that distances, loss weights, and metric
units are comparable across shapes. All functions here are pure: meshes and
cameras are treated as immutable values and mutation happens by returning new
objects.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

WELD_TOLERANCE = 1e-8
FPS_CANDIDATES = 50_000

# Camera placement defaults: 8x the (unit) bbox diagonal keeps the
# perspective/orthographic gap on the bbox corners below 2%, and the field of
# view is sized so the unit-diagonal bbox fills 75% of the frame half-extent.
DEFAULT_RADIUS_FACTOR = 8.0
DEFAULT_FRAME_FILL = 0.75


class MeshError(ValueError):
    """Raised for malformed or empty mesh inputs."""


@dataclass
class Mesh:
    """Triangle mesh with optional per-corner UVs and an albedo texture.

    ``vertices`` is (V, 3) float64, ``faces`` is (F, 3) int64. ``uvs`` holds
    the UV coordinate table and ``face_uvs`` indexes it per face corner;
    both are None for untextured meshes. ``transform`` records the
    normalization (center, scale) that maps original model units into the
    normalized frame: normalized = (model - center) * scale.
    """

    vertices: np.ndarray
    faces: np.ndarray
    uvs: np.ndarray | None = None
    face_uvs: np.ndarray | None = None
    texture: np.ndarray | None = None
    texture_path: str | None = None
    transform: tuple[np.ndarray, float] | None = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if len(self.faces) and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise MeshError("face index out of range")

    @property
    def bbox(self) -> tuple[np.ndarray, np.ndarray]:
        if len(self.vertices) == 0:
            raise MeshError("empty mesh has no bounding box")
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    @property
    def bbox_diagonal(self) -> float:
        lo, hi = self.bbox
        return float(np.linalg.norm(hi - lo))

    @property
    def face_normals(self) -> np.ndarray:
        tri = self.vertices[self.faces]
        n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        norm = np.linalg.norm(n, axis=1, keepdims=True)
        return n / np.maximum(norm, 1e-300)

    @property
    def face_areas(self) -> np.ndarray:
        tri = self.vertices[self.faces]
        n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        return 0.5 * np.linalg.norm(n, axis=1)

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.vertices).tobytes())
        h.update(np.ascontiguousarray(self.faces).tobytes())
        if self.texture is not None:
            h.update(np.ascontiguousarray(self.texture).tobytes())
        return h.hexdigest()[:16]


def _weld_vertices(vertices: np.ndarray, faces: np.ndarray, tol: float = WELD_TOLERANCE):
    """Merge duplicate vertices within ``tol`` so edge adjacency is meaningful."""
    if len(vertices) == 0:
        return vertices, faces, np.arange(0)
    keys = np.round(vertices / tol).astype(np.int64)
    _, first, inverse = np.unique(keys, axis=0, return_index=True, return_inverse=True)
    order = np.argsort(first)
    rank = np.empty_like(order)
    rank[order] = np.arange(len(order))
    new_vertices = vertices[np.sort(first)]
    remap = rank[inverse]
    return new_vertices, remap[faces], remap


def _drop_degenerate(faces: np.ndarray, vertices: np.ndarray) -> np.ndarray:
    if len(faces) == 0:
        return faces
    distinct = (
        (faces[:, 0] != faces[:, 1])
        & (faces[:, 1] != faces[:, 2])
        & (faces[:, 0] != faces[:, 2])
    )
    faces = faces[distinct]
    tri = vertices[faces]
    area2 = np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)
    return faces[area2 > 1e-30]


def _fan_triangulate(polygons: list[list[int]]) -> np.ndarray:
    tris = []
    for poly in polygons:
        for i in range(1, len(poly) - 1):
            tris.append((poly[0], poly[i], poly[i + 1]))
    return np.asarray(tris, dtype=np.int64).reshape(-1, 3)


def _load_texture_image(path: Path) -> np.ndarray:
    from PIL import Image

    img = Image.open(path).convert("RGB")
    return np.asarray(img, dtype=np.float64) / 255.0


def _parse_mtl(path: Path) -> str | None:
    """Return the first map_Kd filename in an MTL file, if any."""
    if not path.exists():
        return None
    for line in path.read_text().splitlines():
        parts = line.split()
        if len(parts) >= 2 and parts[0] == "map_Kd":
            return parts[-1]
    return None


def _load_obj(path: Path):
    vertices, uvs, polygons, poly_uvs = [], [], [], []
    texture_file = None
    for raw in path.read_text().splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        tag = parts[0]
        if tag == "v":
            vertices.append([float(x) for x in parts[1:4]])
        elif tag == "vt":
            uvs.append([float(parts[1]), float(parts[2])])
        elif tag == "f":
            vi, ti = [], []
            for corner in parts[1:]:
                fields = corner.split("/")
                vi.append(int(fields[0]) - 1 if int(fields[0]) > 0 else len(vertices) + int(fields[0]))
                if len(fields) > 1 and fields[1]:
                    ti.append(int(fields[1]) - 1)
            polygons.append(vi)
            poly_uvs.append(ti if len(ti) == len(vi) else None)
        elif tag == "mtllib":
            texture_file = _parse_mtl(path.parent / parts[1]) or texture_file
    faces = _fan_triangulate(polygons)
    face_uvs = None
    if uvs and all(t is not None for t in poly_uvs):
        face_uvs = _fan_triangulate([t for t in poly_uvs if t is not None])
    texture = None
    if texture_file is not None:
        tex_path = path.parent / texture_file
        if tex_path.exists():
            texture = _load_texture_image(tex_path)
    return (
        np.asarray(vertices, dtype=np.float64),
        faces,
        np.asarray(uvs, dtype=np.float64) if uvs else None,
        face_uvs,
        texture,
        texture_file,
    )


def _load_ply(path: Path):
    with open(path, "rb") as fh:
        if fh.readline().strip() != b"ply":
            raise MeshError(f"not a PLY file: {path}")
        fmt = None
        elements = []  # (name, count, [(prop_name, dtype) or ('list', count_dtype, dtype, name)])
        while True:
            line = fh.readline()
            if not line:
                raise MeshError("unexpected end of PLY header")
            tokens = line.decode("ascii").strip().split()
            if not tokens:
                continue
            if tokens[0] == "format":
                fmt = tokens[1]
            elif tokens[0] == "element":
                elements.append((tokens[1], int(tokens[2]), []))
            elif tokens[0] == "property":
                if tokens[1] == "list":
                    elements[-1][2].append(("list", tokens[2], tokens[3], tokens[4]))
                else:
                    elements[-1][2].append((tokens[2], tokens[1]))
            elif tokens[0] == "end_header":
                break
        np_types = {
            "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
            "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
            "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
            "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
        }
        vertices, polygons, uvs = None, [], None
        if fmt == "ascii":
            for name, count, props in elements:
                rows = [fh.readline().decode("ascii").split() for _ in range(count)]
                if name == "vertex":
                    names = [p[0] for p in props]
                    table = np.asarray(rows, dtype=np.float64)
                    ix = [names.index(c) for c in ("x", "y", "z")]
                    vertices = table[:, ix]
                    if "u" in names and "v" in names:
                        uvs = table[:, [names.index("u"), names.index("v")]]
                    elif "s" in names and "t" in names:
                        uvs = table[:, [names.index("s"), names.index("t")]]
                elif name == "face":
                    for row in rows:
                        n = int(row[0])
                        polygons.append([int(v) for v in row[1 : 1 + n]])
        elif fmt == "binary_little_endian":
            for name, count, props in elements:
                if name == "vertex" and all(p[0] != "list" for p in props):
                    dtype = np.dtype([(p[0], "<" + np_types[p[1]]) for p in props])
                    data = np.frombuffer(fh.read(dtype.itemsize * count), dtype=dtype)
                    vertices = np.stack([data["x"], data["y"], data["z"]], axis=1).astype(np.float64)
                    names = dtype.names or ()
                    if "u" in names and "v" in names:
                        uvs = np.stack([data["u"], data["v"]], axis=1).astype(np.float64)
                else:
                    for _ in range(count):
                        if props and props[0][0] == "list":
                            n = int(np.frombuffer(fh.read(np.dtype(np_types[props[0][1]]).itemsize),
                                                  dtype="<" + np_types[props[0][1]])[0])
                            idx_dt = np.dtype("<" + np_types[props[0][2]])
                            idx = np.frombuffer(fh.read(idx_dt.itemsize * n), dtype=idx_dt)
                            if name == "face":
                                polygons.append([int(v) for v in idx])
                        else:
                            for p in props:
                                fh.read(np.dtype(np_types[p[1]]).itemsize)
        else:
            raise MeshError(f"unsupported PLY format: {fmt}")
    if vertices is None:
        raise MeshError("PLY file has no vertex element")
    faces = _fan_triangulate(polygons)
    face_uvs = faces if uvs is not None else None
    return vertices, faces, uvs, face_uvs


def load_mesh(path: str | Path) -> Mesh:
    """Load an OBJ or PLY file, fan-triangulating polygonal faces.

    Duplicate vertices are welded at 1e-8 before normals are derived and
    zero-area faces are dropped. Textures referenced through an OBJ's MTL
    file are resolved relative to the mesh path.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"file not found: {path}")
    suffix = path.suffix.lower()
    if suffix == ".obj":
        vertices, faces, uvs, face_uvs, texture, texture_file = _load_obj(path)
    elif suffix == ".ply":
        vertices, faces, uvs, face_uvs = _load_ply(path)
        texture, texture_file = None, None
    else:
        raise MeshError(f"unsupported mesh format: {suffix}")
    if len(vertices) == 0:
        raise MeshError(f"mesh has no vertices: {path}")
    # UVs are indexed per corner against the original vertex table, so weld
    # only the position/face arrays and keep the UV indexing intact.
    welded, new_faces, _ = _weld_vertices(vertices, faces)
    new_faces = _drop_degenerate(new_faces, welded)
    if uvs is not None and face_uvs is not None and len(face_uvs) != len(new_faces):
        # Welding changed the face list; re-derive per-corner UVs is not
        # possible in general, so fall back to untextured.
        uvs, face_uvs, texture = None, None, None
    return Mesh(
        vertices=welded,
        faces=new_faces,
        uvs=uvs,
        face_uvs=face_uvs,
        texture=texture,
        texture_path=str(texture_file) if texture_file else None,
    )


def export_mesh(mesh: Mesh, path: str | Path) -> None:
    """Write the mesh as OBJ (positions and faces only)."""
    path = Path(path)
    lines = [f"v {x:.17g} {y:.17g} {z:.17g}" for x, y, z in mesh.vertices]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces]
    path.write_text("\n".join(lines) + "\n")


def normalize_mesh(mesh: Mesh) -> Mesh:
    """Translate to the bbox center and scale so the bbox diagonal is 1."""
    if len(mesh.vertices) == 0:
        raise MeshError("cannot normalize an empty mesh")
    lo, hi = mesh.bbox
    center = (lo + hi) / 2.0
    diag = float(np.linalg.norm(hi - lo))
    if diag == 0.0:
        raise MeshError("mesh has zero extent")
    scale = 1.0 / diag
    prev_center, prev_scale = mesh.transform or (np.zeros(3), 1.0)
    # Compose with any earlier normalization so transform always maps
    # original model units into the current frame.
    new_center = prev_center + center / prev_scale
    return replace(
        mesh,
        vertices=(mesh.vertices - center) * scale,
        transform=(new_center, prev_scale * scale),
    )


def surface_samples(mesh: Mesh, n: int, rng: np.random.Generator):
    """Area-weighted uniform samples on the surface.

    Returns (points, face_indices, barycentric) so callers can also
    interpolate per-face attributes.
    """
    areas = mesh.face_areas
    total = areas.sum()
    if total <= 0:
        raise MeshError("mesh has no surface area")
    face_idx = rng.choice(len(mesh.faces), size=n, p=areas / total)
    u = rng.random(n)
    v = rng.random(n)
    flip = u + v > 1.0
    u[flip], v[flip] = 1.0 - u[flip], 1.0 - v[flip]
    bary = np.stack([1.0 - u - v, u, v], axis=1)
    tri = mesh.vertices[mesh.faces[face_idx]]
    points = np.einsum("nk,nkd->nd", bary, tri)
    return points, face_idx, bary


def farthest_point_sample(
    mesh: Mesh, n: int, seed: int, candidates: int = FPS_CANDIDATES
) -> np.ndarray:
    """Greedy max-min selection of ``n`` surface points.

    Candidates come from a dense area-weighted surface sampling; the first
    point is drawn by the seeded RNG and each following point maximizes the
    distance to the already selected set, which makes any prefix of the
    output independent of ``n``.
    """
    if n < 1:
        raise ValueError("farthest_point_sample requires n >= 1")
    if len(mesh.vertices) == 0:
        raise MeshError("cannot sample an empty mesh")
    rng = np.random.default_rng(seed)
    pool, _, _ = surface_samples(mesh, candidates, rng)
    return greedy_max_min(pool, n, start=int(rng.integers(len(pool))))


def greedy_max_min(points: np.ndarray, n: int, start: int = 0) -> np.ndarray:
    """Greedy farthest-point subset of an explicit candidate array."""
    points = np.asarray(points, dtype=np.float64)
    n = min(n, len(points))
    chosen = [start]
    dist = np.linalg.norm(points - points[start], axis=1)
    for _ in range(n - 1):
        nxt = int(np.argmax(dist))
        chosen.append(nxt)
        dist = np.minimum(dist, np.linalg.norm(points - points[nxt], axis=1))
    return points[chosen]


@dataclass(frozen=True)
class Camera:
    """Pinhole camera with a look-at frame and square image plane.

    ``fov`` is the vertical field of view in radians. ``mode`` selects
    perspective or orthographic projection; the orthographic frame is scaled
    so both projections agree exactly on the plane through ``target``.
    """

    eye: tuple[float, float, float]
    target: tuple[float, float, float] = (0.0, 0.0, 0.0)
    up: tuple[float, float, float] = (0.0, 1.0, 0.0)
    fov: float = 2.0 * math.atan(0.5 / (DEFAULT_RADIUS_FACTOR * DEFAULT_FRAME_FILL))
    resolution: int = 224
    near: float = 1e-3
    far: float = 1e3
    mode: str = "perspective"

    def __post_init__(self):
        if np.allclose(self.eye, self.target):
            raise ValueError("camera eye must differ from target")
        if not 0.0 < self.fov < math.pi:
            raise ValueError("fov must lie in (0, pi)")
        if self.resolution < 16:
            raise ValueError("resolution must be >= 16")

    @property
    def basis(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Right, up, forward unit vectors of the view frame."""
        eye = np.asarray(self.eye, dtype=np.float64)
        target = np.asarray(self.target, dtype=np.float64)
        fwd = target - eye
        fwd = fwd / np.linalg.norm(fwd)
        right = np.cross(fwd, np.asarray(self.up, dtype=np.float64))
        nr = np.linalg.norm(right)
        if nr < 1e-12:  # looking straight along up: pick any perpendicular
            right = np.cross(fwd, np.array([1.0, 0.0, 0.0]))
            nr = np.linalg.norm(right)
        right = right / nr
        true_up = np.cross(right, fwd)
        return right, true_up, fwd

    @property
    def ortho_scale(self) -> float:
        eye = np.asarray(self.eye, dtype=np.float64)
        target = np.asarray(self.target, dtype=np.float64)
        return float(np.linalg.norm(target - eye) * math.tan(self.fov / 2.0))

    def key(self) -> str:
        """Stable hash of all camera parameters, for render caching."""
        h = hashlib.sha256()
        payload = (
            tuple(self.eye), tuple(self.target), tuple(self.up),
            self.fov, self.resolution, self.near, self.far, self.mode,
        )
        h.update(repr(payload).encode())
        return h.hexdigest()[:16]


def project(camera: Camera, points: np.ndarray):
    """Project points into normalized [0,1]^2 image coordinates plus depth.

    Returns (coords, depth, valid). ``coords[:, 0]`` grows rightward and
    ``coords[:, 1]`` grows downward (image row convention); the look-at
    target maps to (0.5, 0.5). ``depth`` is the distance along the view
    axis. Points at or behind the near plane are flagged invalid and their
    coordinates are unreliable.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    right, up, fwd = camera.basis
    d = pts - np.asarray(camera.eye, dtype=np.float64)
    x = d @ right
    y = d @ up
    z = d @ fwd
    valid = z > camera.near
    if camera.mode == "orthographic":
        denom = camera.ortho_scale
        u = x / denom
        v = y / denom
        valid = np.ones_like(valid)
    else:
        denom = np.where(np.abs(z) > 1e-12, z, 1e-12) * math.tan(camera.fov / 2.0)
        u = x / denom
        v = y / denom
    coords = np.stack([0.5 + 0.5 * u, 0.5 - 0.5 * v], axis=1)
    if points.ndim == 1:
        return coords[0], float(z[0]), bool(valid[0])
    return coords, z, valid


@dataclass(frozen=True)
class ViewSampler:
    """Uniform random cameras on a sphere band around the origin.

    Elevation/azimuth are in degrees; azimuth 0 points along +x and grows
    counterclockwise about +y, elevation is measured from the xz-plane.
    The radius is a multiple of the (unit) bbox diagonal.
    """

    elevation: tuple[float, float] = (0.0, 30.0)
    azimuth: tuple[float, float] = (0.0, 360.0)
    radius: float = DEFAULT_RADIUS_FACTOR
    resolution: int = 224
    fov: float | None = None
    seed: int = 0

    def camera_at(self, elevation_deg: float, azimuth_deg: float) -> Camera:
        el = math.radians(elevation_deg)
        az = math.radians(azimuth_deg)
        eye = (
            self.radius * math.cos(el) * math.cos(az),
            self.radius * math.sin(el),
            -self.radius * math.cos(el) * math.sin(az),
        )
        fov = self.fov
        if fov is None:
            fov = 2.0 * math.atan(0.5 / (self.radius * DEFAULT_FRAME_FILL))
        return Camera(eye=eye, resolution=self.resolution, fov=fov)

    def sample(self, rng: np.random.Generator) -> Camera:
        el = rng.uniform(*self.elevation)
        az = rng.uniform(*self.azimuth)
        return self.camera_at(el, az)

    def rng(self) -> np.random.Generator:
        return np.random.default_rng(self.seed)


def sample_view(sampler: ViewSampler, rng: np.random.Generator | None = None) -> Camera:
    """Draw one camera; pass an explicit rng to control the stream."""
    return sampler.sample(rng if rng is not None else sampler.rng())
