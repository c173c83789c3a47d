"""Analytic SDF primitives and procedural scenes."""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .. import diffengine as de

KINDS = ("plane", "sphere", "box", "capsule")
LABELS = ("foreground", "ground")

DEFAULT_BOUNDS = (np.array([-10.0, -10.0, -0.5]), np.array([10.0, 10.0, 7.5]))


class SceneError(ValueError):
    pass


def yaw_matrix(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@dataclass
class ScenePrimitive:
    """One analytic shape. ``rotation`` maps local to world coordinates."""

    kind: str
    translation: np.ndarray
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    size: tuple = ()
    albedo: np.ndarray = field(default_factory=lambda: np.full(3, 0.5))
    label: str = "foreground"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise SceneError(f"unknown primitive kind '{self.kind}'")
        if self.label not in LABELS:
            raise SceneError(f"unknown semantic label '{self.label}'")
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.albedo = np.asarray(self.albedo, dtype=np.float64).reshape(3)
        self.size = tuple(float(s) for s in self.size)
        expected = {"plane": 0, "sphere": 1, "box": 3, "capsule": 2}[self.kind]
        if len(self.size) != expected:
            raise SceneError(f"{self.kind} takes {expected} size parameters, got {len(self.size)}")
        if any(s <= 0 for s in self.size):
            raise SceneError(f"size parameters must be positive, got {self.size}")
        if np.any(self.albedo < 0) or np.any(self.albedo > 1):
            raise SceneError("albedo must lie in [0, 1]")

    # -- numpy evaluation -------------------------------------------------
    def local(self, p: np.ndarray) -> np.ndarray:
        return (np.asarray(p, dtype=np.float64) - self.translation) @ self.rotation

    def sdf(self, p: np.ndarray) -> np.ndarray:
        q = self.local(p)
        if self.kind == "plane":
            return q[..., 2]
        if self.kind == "sphere":
            return np.linalg.norm(q, axis=-1) - self.size[0]
        if self.kind == "box":
            d = np.abs(q) - np.array(self.size)
            outside = np.linalg.norm(np.maximum(d, 0.0), axis=-1)
            inside = np.minimum(d.max(axis=-1), 0.0)
            return outside + inside
        radius, half = self.size
        seg = np.zeros_like(q)
        seg[..., 2] = np.clip(q[..., 2], -half, half)
        return np.linalg.norm(q - seg, axis=-1) - radius

    def curvature(self, p: np.ndarray) -> np.ndarray:
        """Frobenius norm of the normal-field Jacobian at surface points."""
        q = self.local(p)
        n = q.shape[0]
        if self.kind in ("plane", "box"):
            return np.zeros(n)
        if self.kind == "sphere":
            return np.full(n, np.sqrt(2.0) / self.size[0])
        radius, half = self.size
        on_cylinder = np.abs(q[:, 2]) < half
        return np.where(on_cylinder, 1.0 / radius, np.sqrt(2.0) / radius)

    def extent_z(self) -> float:
        """Height of the centre above a supporting ground plane."""
        if self.kind == "sphere":
            return self.size[0]
        if self.kind == "box":
            return self.size[2]
        if self.kind == "capsule":
            return self.size[0] + self.size[1]
        return 0.0

    def footprint(self) -> float:
        """Radius of a vertical cylinder enclosing the shape."""
        if self.kind == "sphere":
            return self.size[0]
        if self.kind == "box":
            return float(np.hypot(self.size[0], self.size[1]))
        if self.kind == "capsule":
            return self.size[0]
        return np.inf

    # -- differentiable evaluation -----------------------------------------
    def sdf_diff(self, p: de.DiffValue) -> de.DiffValue:
        """Same SDF built from engine ops so it can be differentiated twice."""
        q = de.matmul(p - self.translation, self.rotation)
        if self.kind == "plane":
            return de.reshape(q[:, 2:3], (q.shape[0],))
        if self.kind == "sphere":
            return de.reshape(de.l2norm(q), (q.shape[0],)) - self.size[0]
        if self.kind == "box":
            d = de.abs_(q) - np.array(self.size)
            outside = de.l2norm(de.maximum(d, 0.0))
            m = de.elementwise_max(d[:, 0:1], de.elementwise_max(d[:, 1:2], d[:, 2:3]))
            inside = de.minimum(m, 0.0)
            return de.reshape(outside + inside, (q.shape[0],))
        radius, half = self.size
        qz = de.clamp(q[:, 2:3], -half, half)
        seg = de.concat([np.zeros((q.shape[0], 2)), qz], axis=1)
        return de.reshape(de.l2norm(q - seg), (q.shape[0],)) - radius

    # -- serialization ------------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "translation": self.translation.tolist(),
            "rotation": self.rotation.tolist(),
            "size": list(self.size),
            "albedo": self.albedo.tolist(),
            "label": self.label,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ScenePrimitive":
        return cls(d["kind"], np.array(d["translation"]), np.array(d["rotation"]),
                   tuple(d["size"]), np.array(d["albedo"]), d["label"])


def ground_plane(height: float = 0.0, albedo=(0.5, 0.5, 0.5)) -> ScenePrimitive:
    return ScenePrimitive("plane", np.array([0.0, 0.0, height]), np.eye(3), (), np.array(albedo), "ground")


@dataclass
class Scene:
    primitives: list
    bbox_min: np.ndarray = field(default_factory=lambda: DEFAULT_BOUNDS[0].copy())
    bbox_max: np.ndarray = field(default_factory=lambda: DEFAULT_BOUNDS[1].copy())
    seed: int | None = None

    def __post_init__(self):
        self.bbox_min = np.asarray(self.bbox_min, dtype=np.float64)
        self.bbox_max = np.asarray(self.bbox_max, dtype=np.float64)
        if not any(p.kind == "plane" and p.label == "ground" for p in self.primitives):
            raise SceneError("a scene needs a ground plane")

    def sdf_all(self, p: np.ndarray) -> np.ndarray:
        return np.stack([prim.sdf(p) for prim in self.primitives], axis=-1)

    def sdf(self, p: np.ndarray) -> np.ndarray:
        return self.sdf_all(p).min(axis=-1)

    def primitive_id(self, p: np.ndarray) -> np.ndarray:
        return self.sdf_all(p).argmin(axis=-1)

    def sdf_diff(self, p: de.DiffValue) -> de.DiffValue:
        out = self.primitives[0].sdf_diff(p)
        for prim in self.primitives[1:]:
            out = -de.elementwise_max(-out, -prim.sdf_diff(p))
        return out

    def normals(self, p: np.ndarray, eps: float = 1e-6) -> np.ndarray:
        """Unit normal of the owning primitive (central differences)."""
        ids = self.primitive_id(p)
        out = np.zeros_like(p)
        for k, prim in enumerate(self.primitives):
            sel = ids == k
            if not np.any(sel):
                continue
            q = p[sel]
            g = np.stack([(prim.sdf(q + eps * e) - prim.sdf(q - eps * e)) / (2 * eps) for e in np.eye(3)], -1)
            out[sel] = g / np.linalg.norm(g, axis=-1, keepdims=True)
        return out

    def curvature(self, p: np.ndarray) -> np.ndarray:
        ids = self.primitive_id(p)
        out = np.zeros(p.shape[0])
        for k, prim in enumerate(self.primitives):
            sel = ids == k
            if np.any(sel):
                out[sel] = prim.curvature(p[sel])
        return out

    def semantic(self, prim_ids: np.ndarray) -> np.ndarray:
        """0 = foreground, 1 = ground, per primitive index."""
        table = np.array([LABELS.index(p.label) for p in self.primitives])
        return table[prim_ids]

    def albedo(self, prim_ids: np.ndarray) -> np.ndarray:
        table = np.stack([p.albedo for p in self.primitives])
        return table[prim_ids]

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "bbox_min": self.bbox_min.tolist(),
            "bbox_max": self.bbox_max.tolist(),
            "primitives": [p.to_dict() for p in self.primitives],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "Scene":
        return cls([ScenePrimitive.from_dict(p) for p in d["primitives"]],
                   np.array(d["bbox_min"]), np.array(d["bbox_max"]), d.get("seed"))

    @classmethod
    def from_json(cls, text: str) -> "Scene":
        return cls.from_dict(json.loads(text))


def generate_scene(seed: int, n_objects: int = 3, bounds=None, keep_clear=((0.0, 0.0),),
                   clear_radius: float = 3.0, max_tries: int = 200) -> Scene:
    """Ground plane plus ``n_objects`` random shapes resting on it.

    Objects never overlap (enclosing cylinders are kept apart), stay inside
    ``bounds`` and keep ``clear_radius`` metres from every xy position in
    ``keep_clear`` (the sensor rig).
    """
    if n_objects < 0:
        raise SceneError("n_objects must be >= 0")
    lo, hi = (DEFAULT_BOUNDS if bounds is None else bounds)
    lo, hi = np.asarray(lo, dtype=np.float64), np.asarray(hi, dtype=np.float64)
    rng = np.random.default_rng(seed)
    prims = [ground_plane(0.0)]
    placed: list[tuple[np.ndarray, float]] = []
    for _ in range(n_objects):
        for _attempt in range(max_tries):
            kind = ("sphere", "box", "capsule")[rng.integers(3)]
            if kind == "sphere":
                size = (rng.uniform(0.6, 1.5),)
            elif kind == "box":
                size = tuple(rng.uniform([0.4, 0.4, 0.4], [1.2, 1.2, 1.2]))
            else:
                size = (rng.uniform(0.3, 0.6), rng.uniform(0.3, 1.0))
            albedo = rng.uniform(0.15, 0.95, size=3)
            rot = yaw_matrix(rng.uniform(0, 2 * np.pi)) if kind != "sphere" else np.eye(3)
            prim = ScenePrimitive(kind, np.zeros(3), rot, size, albedo, "foreground")
            r = prim.footprint()
            margin = r + 0.25
            if np.any(hi[:2] - lo[:2] <= 2 * margin) or prim.extent_z() * 2 > hi[2]:
                continue
            xy = rng.uniform(lo[:2] + margin, hi[:2] - margin)
            if any(np.linalg.norm(xy - np.asarray(c)) < r + clear_radius for c in keep_clear):
                continue
            if any(np.linalg.norm(xy - c) < r + rc + 0.3 for c, rc in placed):
                continue
            prim.translation = np.array([xy[0], xy[1], prim.extent_z()])
            prims.append(prim)
            placed.append((xy, r))
            break
        else:
            raise SceneError(f"could not place {n_objects} objects in bounds after {max_tries} tries each")
    return Scene(prims, lo.copy(), hi.copy(), seed)
