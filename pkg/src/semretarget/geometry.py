"""Closed triangle-mesh primitives used by fixtures and synthetic characters."""
from __future__ import annotations

import numpy as np


def icosphere(subdivisions: int = 4, radius: float = 1.0):
    """Subdivided icosahedron. Level 4 has 2562 vertices and 5120 faces."""
    t = (1.0 + 5 ** 0.5) / 2.0
    verts = [(-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0),
             (0, -1, t), (0, 1, t), (0, -1, -t), (0, 1, -t),
             (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1)]
    faces = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
             (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
             (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
             (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    verts = [np.asarray(v, float) / np.linalg.norm(v) for v in verts]
    for _ in range(subdivisions):
        cache: dict[tuple[int, int], int] = {}

        def midpoint(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces
    return np.asarray(verts) * radius, np.asarray(faces, dtype=np.int64)


def capsule(a, b, radius: float, segments: int = 8, cap_rings: int = 3,
            body_rings: int = 2):
    """Watertight capsule around segment ``a -> b``.

    Returns ``(vertices, faces, s)`` where ``s`` in [0, 1] is each vertex's
    normalised position along the axis (0 at ``a``).
    """
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    axis = b - a
    length = np.linalg.norm(axis)
    w = axis / length if length > 0 else np.array([0.0, 0.0, 1.0])
    helper = np.array([1.0, 0.0, 0.0]) if abs(w[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    u = np.cross(w, helper)
    u /= np.linalg.norm(u)
    v = np.cross(w, u)

    # ring profile: (axial position, ring radius)
    profile = []
    for k in range(1, cap_rings + 1):
        phi = np.pi / 2 * k / cap_rings  # from pole towards equator
        profile.append((-radius * np.cos(phi), radius * np.sin(phi)))
    for k in range(1, body_rings):
        profile.append((length * k / body_rings, radius))
    for k in range(cap_rings, 0, -1):
        phi = np.pi / 2 * k / cap_rings
        profile.append((length + radius * np.cos(phi), radius * np.sin(phi)))

    ang = 2 * np.pi * np.arange(segments) / segments
    ring_dir = np.cos(ang)[:, None] * u + np.sin(ang)[:, None] * v
    verts = [a - radius * w]
    axial = [-radius]
    for z, r in profile:
        verts.extend(a + z * w + r * ring_dir)
        axial.extend([z] * segments)
    verts.append(b + radius * w)
    axial.append(length + radius)
    verts = np.asarray(verts)
    n_rings = len(profile)
    top = len(verts) - 1

    faces = []
    for i in range(segments):
        j = (i + 1) % segments
        faces.append((0, 1 + j, 1 + i))
    for r in range(n_rings - 1):
        base0 = 1 + r * segments
        base1 = base0 + segments
        for i in range(segments):
            j = (i + 1) % segments
            faces.append((base0 + i, base0 + j, base1 + j))
            faces.append((base0 + i, base1 + j, base1 + i))
    last = 1 + (n_rings - 1) * segments
    for i in range(segments):
        j = (i + 1) % segments
        faces.append((top, last + i, last + j))
    s = np.clip(np.asarray(axial) / length, 0.0, 1.0) if length > 0 else np.zeros(len(verts))
    return verts, np.asarray(faces, dtype=np.int64), s
