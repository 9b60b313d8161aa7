"""Procedural test meshes: cube, icosphere, open UV-mapped cylinder.

Used by demos and the test fixtures; all return un-normalized meshes in
model units.
"""

from __future__ import annotations

import numpy as np

from .geometry import Mesh


def make_cube(size: float = 1.0) -> Mesh:
    s = size / 2.0
    vertices = np.array(
        [
            [-s, -s, -s], [s, -s, -s], [s, s, -s], [-s, s, -s],
            [-s, -s, s], [s, -s, s], [s, s, s], [-s, s, s],
        ]
    )
    faces = np.array(
        [
            [0, 2, 1], [0, 3, 2],  # -z
            [4, 5, 6], [4, 6, 7],  # +z
            [0, 1, 5], [0, 5, 4],  # -y
            [2, 3, 7], [2, 7, 6],  # +y
            [1, 2, 6], [1, 6, 5],  # +x
            [0, 4, 7], [0, 7, 3],  # -x
        ]
    )
    return Mesh(vertices, faces)


def make_icosphere(subdivisions: int = 3, radius: float = 1.0) -> Mesh:
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array(
        [
            [-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
            [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
            [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1],
        ],
        dtype=np.float64,
    )
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    faces = np.array(
        [
            [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
            [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
            [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
            [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
        ]
    )
    for _ in range(subdivisions):
        midpoint: dict[tuple[int, int], int] = {}
        new_verts = list(verts)

        def mid(a: int, b: int) -> int:
            key = (min(a, b), max(a, b))
            if key not in midpoint:
                m = (new_verts[a] + new_verts[b]) / 2.0
                m = m / np.linalg.norm(m)
                midpoint[key] = len(new_verts)
                new_verts.append(m)
            return midpoint[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new_faces += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        verts = np.asarray(new_verts)
        faces = np.asarray(new_faces)
    return Mesh(verts * radius, faces)


def make_cylinder(
    segments: int = 48,
    rings: int = 12,
    radius: float = 0.5,
    height: float = 2.0,
    texture: np.ndarray | None = None,
) -> Mesh:
    """Open cylinder (no caps) around the y axis, with wrap-around UVs."""
    theta = np.linspace(0.0, 2.0 * np.pi, segments, endpoint=False)
    ys = np.linspace(-height / 2.0, height / 2.0, rings + 1)
    verts, uvs = [], []
    for yi, y in enumerate(ys):
        for si, th in enumerate(theta):
            verts.append([radius * np.cos(th), y, radius * np.sin(th)])
            uvs.append([si / segments, yi / rings])
    faces, face_uvs = [], []
    for yi in range(rings):
        for si in range(segments):
            a = yi * segments + si
            b = yi * segments + (si + 1) % segments
            c = (yi + 1) * segments + (si + 1) % segments
            d = (yi + 1) * segments + si
            faces += [[a, b, c], [a, c, d]]
            face_uvs += [[a, b, c], [a, c, d]]
    return Mesh(
        np.asarray(verts),
        np.asarray(faces),
        uvs=np.asarray(uvs),
        face_uvs=np.asarray(face_uvs, dtype=np.int64),
        texture=texture,
    )


def polka_dot_texture(size: int = 128, dots: int = 5, seed: int = 3) -> np.ndarray:
    """Lightweight RGB texture with dark dots on a bright ground."""
    rng = np.random.default_rng(seed)
    img = np.full((size, size, 3), 0.92)
    yy, xx = np.mgrid[0:size, 0:size] / size
    for _ in range(dots * dots):
        cx, cy = rng.random(2)
        r = 0.04 + 0.03 * rng.random()
        mask = (xx - cx) ** 2 + (yy - cy) ** 2 < r * r
        img[mask] = rng.random(3) * 0.4
    return img
