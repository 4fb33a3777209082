"""Octree over the labelled surface, material ray queries and impact responses."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator

from ._validation import check_points
from .exceptions import EmptyModel, UnknownMaterial
from .label_fusion import LabeledSurfaceModel
from .materials import UNKNOWN, ResponseTable, material_name

E_REF = 50.0               # J, penetration reference energy
RICOCHET_MAX_ANGLE = 25.0  # degrees from the surface plane
RICOCHET_MIN_HARDNESS = 0.7
DEBRIS_HALF_ANGLE = 30.0   # degrees, i.e. a 60 degree cone


@dataclass
class Octree:
    """Flat-array octree.

    Node ``k`` is the cube ``center[k] +/- half[k]``. ``children[k]`` holds 8
    node ids (octant bit 0 = x, 1 = y, 2 = z upper half) or -1 for leaves,
    whose points are ``order[start[k]:end[k]]`` (ascending point index).
    """

    center: np.ndarray
    half: np.ndarray
    children: np.ndarray
    depth: np.ndarray
    start: np.ndarray
    end: np.ndarray
    order: np.ndarray
    points: np.ndarray
    leaf_capacity: int
    max_depth: int

    @property
    def n_nodes(self):
        return len(self.half)

    def is_leaf(self, k) -> bool:
        return self.children[k, 0] < 0

    def leaf_points(self, k) -> np.ndarray:
        return self.order[self.start[k]:self.end[k]]

    def locate(self, p) -> int:
        """Leaf whose cell contains point ``p`` (descending by octant)."""
        p = np.asarray(p, dtype=float)
        k = 0
        while not self.is_leaf(k):
            c = self.center[k]
            k = self.children[k, int(p[0] >= c[0]) | int(p[1] >= c[1]) << 1 | int(p[2] >= c[2]) << 2]
        return k

    def leaves(self):
        return np.nonzero(self.children[:, 0] < 0)[0]


def build_octree(points, leaf_capacity: int = 32, max_depth: int = 10) -> Octree:
    """Octree over ``points`` (an array or a model with ``positions``).

    The root is the bounding cube of the points inflated by 1%; a node splits
    into 8 equal children while it holds more than ``leaf_capacity`` points
    and is shallower than ``max_depth``.
    """
    pts = np.asarray(getattr(points, "positions", points), dtype=float)
    if pts.ndim != 2 or pts.shape[0] == 0:
        raise EmptyModel("cannot build an octree over an empty model")
    pts = check_points(pts)
    if leaf_capacity < 1 or max_depth < 0:
        raise ValueError("leaf_capacity must be >= 1 and max_depth >= 0")
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    half = max(float(np.max(hi - lo)) / 2.0, 1e-6) * 1.01
    centers, halves, children, depths, starts, ends = [(lo + hi) / 2.0], [half], [None], [0], [0], [len(pts)]
    order = np.arange(len(pts))
    stack = [0]
    while stack:
        k = stack.pop()
        s, e = starts[k], ends[k]
        if e - s <= leaf_capacity or depths[k] >= max_depth:
            children[k] = [-1] * 8
            continue
        idx = order[s:e]
        c = centers[k]
        p = pts[idx]
        above = (p >= c).astype(int)
        code = above[:, 0] | above[:, 1] << 1 | above[:, 2] << 2
        perm = np.argsort(code, kind="stable")      # keeps ascending index inside each octant
        order[s:e] = idx[perm]
        bounds = np.searchsorted(code[perm], np.arange(9))
        h = halves[k] / 2.0
        kids = []
        for o in range(8):
            off = np.array([o & 1, (o >> 1) & 1, (o >> 2) & 1]) * 2.0 - 1.0
            kids.append(len(halves))
            centers.append(c + off * h)
            halves.append(h)
            children.append(None)
            depths.append(depths[k] + 1)
            starts.append(s + int(bounds[o]))
            ends.append(s + int(bounds[o + 1]))
        children[k] = kids
        stack.extend(reversed(kids))
    return Octree(np.array(centers), np.array(halves), np.array(children, dtype=np.intp),
                  np.array(depths), np.array(starts), np.array(ends), order, pts,
                  int(leaf_capacity), int(max_depth))


def check_octree(tree: Octree) -> list[str]:
    """Structural invariant violations (empty list when the tree is sound)."""
    problems = []
    seen = np.zeros(len(tree.points), dtype=int)
    for k in range(tree.n_nodes):
        if tree.is_leaf(k):
            ids = tree.leaf_points(k)
            seen[ids] += 1
            if len(ids) > tree.leaf_capacity and tree.depth[k] < tree.max_depth:
                problems.append(f"leaf {k} over capacity")
            p = tree.points[ids]
            if len(ids) and np.any(np.abs(p - tree.center[k]) > tree.half[k] * (1 + 1e-12)):
                problems.append(f"leaf {k} holds a point outside its cell")
        else:
            kids = tree.children[k]
            if np.any(tree.half[kids] != tree.half[k] / 2):
                problems.append(f"node {k}: children are not half-size")
            offs = (tree.center[kids] - tree.center[k]) / (tree.half[k] / 2)
            if not np.allclose(np.sort(offs, axis=0), np.sort(
                    [[(o & 1) * 2 - 1, ((o >> 1) & 1) * 2 - 1, ((o >> 2) & 1) * 2 - 1] for o in range(8)],
                    axis=0)):
                problems.append(f"node {k}: children do not tile the parent")
            if tree.start[kids[0]] != tree.start[k] or tree.end[kids[-1]] != tree.end[k]:
                problems.append(f"node {k}: child point ranges do not partition the parent")
    if np.any(seen != 1):
        problems.append("some points are not in exactly one leaf")
    return problems


@dataclass
class RayQueryHit:
    position: np.ndarray
    normal: np.ndarray
    material: int
    confidence: float
    traversal_distance: float
    index: int

    def to_dict(self):
        return {"position": self.position.tolist(), "normal": self.normal.tolist(),
                "material": material_name(self.material), "material_id": int(self.material),
                "confidence": float(self.confidence),
                "traversal_distance": float(self.traversal_distance), "index": int(self.index)}


def _unit(direction):
    d = np.asarray(direction, dtype=float).reshape(3)
    n = np.linalg.norm(d)
    if not n > 0 or not np.isfinite(n):
        raise ValueError("ray direction must be non-zero")
    return d / n


def ray_point_params(points, origin, direction):
    """Ray parameter and perpendicular distance of each point (``direction`` unit)."""
    # elementwise so the rounding does not depend on how many points are batched
    rel = points - origin
    t = rel[:, 0] * direction[0] + rel[:, 1] * direction[1] + rel[:, 2] * direction[2]
    off = rel - t[:, None] * direction
    perp = np.sqrt(off[:, 0] ** 2 + off[:, 1] ** 2 + off[:, 2] ** 2)
    return t, perp


def _best(ids, t, perp, radius):
    ok = (t >= 0) & (perp <= radius)
    if not ok.any():
        return None
    ids, t = ids[ok], t[ok]
    j = np.lexsort((ids, t))[0]
    return t[j], ids[j]


def _slab(center, half, origin, inv, radius):
    lo = center - half - radius
    hi = center + half + radius
    with np.errstate(invalid="ignore"):
        t1 = (lo - origin) * inv
        t2 = (hi - origin) * inv
    tmin = np.fmin(t1, t2)
    tmax = np.fmax(t1, t2)
    # axis-parallel rays: inside the slab -> unbounded, outside -> miss
    par = ~np.isfinite(inv)
    if np.any(par):
        inside = (origin >= lo) & (origin <= hi)
        tmin = np.where(par, np.where(inside, -np.inf, np.inf), tmin)
        tmax = np.where(par, np.where(inside, np.inf, -np.inf), tmax)
    return float(np.max(tmin)), float(np.min(tmax))


def _make_hit(model, idx, t):
    return RayQueryHit(model.positions[idx].copy(), model.normals[idx].copy(), int(model.material[idx]),
                       float(model.confidence[idx]), float(t), int(idx))


def raycast_query(tree: Octree, model: LabeledSurfaceModel, origin, direction, radius: float,
                  prune: bool = True, stats: dict | None = None) -> RayQueryHit | None:
    """Nearest model point along a ray within ``radius`` of it.

    Nodes are visited front to back by their entry parameter into the cell
    grown by ``radius``; a node is skipped once it starts beyond the best hit
    (``prune=False`` visits every node the ray touches, for checking).
    Ties in ray parameter go to the smaller point index.
    """
    if not radius > 0:
        raise ValueError("radius must be positive")
    o = np.asarray(origin, dtype=float).reshape(3)
    d = _unit(direction)
    with np.errstate(divide="ignore"):
        inv = 1.0 / d
    best_t, best_i = np.inf, -1
    visited = 0
    stack = [0]
    while stack:
        k = stack.pop()
        t0, t1 = _slab(tree.center[k], tree.half[k], o, inv, radius)
        if t0 > t1 or t1 < 0 or (prune and t0 > best_t):
            continue
        visited += 1
        if tree.is_leaf(k):
            ids = tree.leaf_points(k)
            if len(ids):
                t, perp = ray_point_params(tree.points[ids], o, d)
                res = _best(ids, t, perp, radius)
                if res is not None and (res[0] < best_t or (res[0] == best_t and res[1] < best_i)):
                    best_t, best_i = res
            continue
        kids = tree.children[k]
        entry = []
        for c in kids:
            c0, c1 = _slab(tree.center[c], tree.half[c], o, inv, radius)
            if c0 <= c1 and c1 >= 0:
                entry.append((c0, c))
        # push far children first so the nearest is popped next
        for _, c in sorted(entry, reverse=True):
            stack.append(c)
    if stats is not None:
        stats["visited"] = visited
    return None if best_i < 0 else _make_hit(model, best_i, best_t)


def brute_force_query(model: LabeledSurfaceModel, origin, direction, radius: float) -> RayQueryHit | None:
    o = np.asarray(origin, dtype=float).reshape(3)
    d = _unit(direction)
    t, perp = ray_point_params(model.positions, o, d)
    res = _best(np.arange(len(t)), t, perp, radius)
    return None if res is None else _make_hit(model, res[1], res[0])


# ----------------------------------------------------------------------------
# impacts


@dataclass
class ImpactEvent:
    origin: np.ndarray
    direction: np.ndarray
    mass: float = 0.01       # kg
    speed: float = 100.0     # m/s
    seed: int = 0

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=float).reshape(3)
        self.direction = _unit(self.direction)
        if self.mass < 0 or self.speed < 0:
            raise ValueError("mass and speed must be non-negative")

    @property
    def energy(self) -> float:
        return 0.5 * self.mass * self.speed ** 2

    def to_dict(self):
        return {"origin": self.origin.tolist(), "direction": self.direction.tolist(),
                "mass": self.mass, "speed": self.speed, "seed": self.seed}

    @classmethod
    def from_dict(cls, d):
        return cls(d["origin"], d["direction"], float(d.get("mass", 0.01)),
                   float(d.get("speed", 100.0)), int(d.get("seed", 0)))


@dataclass
class Debris:
    position: np.ndarray
    velocity: np.ndarray
    mass: float


@dataclass
class ImpactResult:
    outcome: str                 # stopped | ricochet | penetrated
    decal: str
    decal_position: np.ndarray
    decal_normal: np.ndarray
    sound_id: str
    material: int
    debris: list = field(default_factory=list)
    outgoing_direction: np.ndarray | None = None
    outgoing_speed: float = 0.0

    def debris_energy(self) -> float:
        return float(sum(0.5 * b.mass * float(b.velocity @ b.velocity) for b in self.debris))

    def to_dict(self):
        return {
            "outcome": self.outcome,
            "decal": {"kind": self.decal, "position": self.decal_position.tolist(),
                      "normal": self.decal_normal.tolist()},
            "sound_id": self.sound_id,
            "material": material_name(self.material),
            "debris": [{"position": b.position.tolist(), "velocity": b.velocity.tolist(),
                        "mass": b.mass} for b in self.debris],
            "outgoing_direction": None if self.outgoing_direction is None else self.outgoing_direction.tolist(),
            "outgoing_speed": self.outgoing_speed,
        }


def _cone_directions(axis, half_angle, rng, n):
    """``n`` unit vectors uniform over the spherical cap around ``axis``."""
    cos_max = np.cos(np.radians(half_angle))
    cos_t = rng.uniform(cos_max, 1.0, n)
    phi = rng.uniform(0.0, 2 * np.pi, n)
    sin_t = np.sqrt(1.0 - cos_t ** 2)
    helper = np.array([1.0, 0.0, 0.0]) if abs(axis[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    u = np.cross(axis, helper)
    u /= np.linalg.norm(u)
    v = np.cross(axis, u)
    return (cos_t[:, None] * axis + (sin_t * np.cos(phi))[:, None] * u
            + (sin_t * np.sin(phi))[:, None] * v)


def simulate_impact(hit: RayQueryHit, event: ImpactEvent, table: ResponseTable,
                    e_ref: float = E_REF) -> ImpactResult:
    """Material response of a projectile hitting ``hit``.

    The surface normal is oriented against the incoming ray. Debris share the
    projectile mass evenly and move at ``debris_speed_fraction * v * U(0.2, 1)``,
    so their total kinetic energy cannot exceed the projectile's.
    """
    if hit.material == UNKNOWN or hit.material not in table:
        raise UnknownMaterial(f"no response entry for material id {hit.material}")
    resp = table[hit.material]
    rng = np.random.default_rng(event.seed)
    d = event.direction
    n = _unit(hit.normal)
    if d @ n > 0:
        n = -n
    angle = np.degrees(np.arcsin(min(1.0, abs(float(d @ n)))))
    energy = event.energy
    outgoing, out_speed = None, 0.0
    if event.speed == 0:
        outcome = "stopped"
    elif resp.penetrable and energy > resp.hardness * e_ref:
        outcome = "penetrated"
    elif angle < RICOCHET_MAX_ANGLE and resp.hardness > RICOCHET_MIN_HARDNESS:
        outcome = "ricochet"
        outgoing = d - 2.0 * (d @ n) * n
        out_speed = resp.restitution * event.speed
    else:
        outcome = "stopped"
    lo, hi = resp.debris_count_range
    count = int(rng.integers(lo, hi + 1))
    debris = []
    if count:
        dirs = _cone_directions(n, DEBRIS_HALF_ANGLE, rng, count)
        speeds = resp.debris_speed_fraction * event.speed * rng.uniform(0.2, 1.0, count)
        m = event.mass / count
        debris = [Debris(hit.position.copy(), dirs[i] * speeds[i], m) for i in range(count)]
    return ImpactResult(outcome, resp.decal, hit.position.copy(), n, resp.sound_id, hit.material,
                        debris, outgoing, out_speed)


def replay_impacts(events, tree: Octree, model: LabeledSurfaceModel, table: ResponseTable,
                   radius: float) -> list[dict]:
    """Run a list of events; rays that miss the model give ``{"hit": false}``."""
    out = []
    for ev in events:
        ev = ev if isinstance(ev, ImpactEvent) else ImpactEvent.from_dict(ev)
        hit = raycast_query(tree, model, ev.origin, ev.direction, radius)
        if hit is None:
            out.append({"hit": False})
            continue
        res = simulate_impact(hit, ev, table).to_dict()
        res["hit"] = True
        res["position"] = hit.position.tolist()
        out.append(res)
    return out


def load_events(path) -> list[ImpactEvent]:
    return [ImpactEvent.from_dict(d) for d in json.loads(Path(path).read_text())]


def save_events(events, path):
    Path(path).write_text(json.dumps([e.to_dict() for e in events], indent=2) + "\n")


class MaterialOctree(BaseEstimator):
    """Ray-query estimator: ``fit`` indexes a labelled model, ``predict`` casts rays."""

    def __init__(self, leaf_capacity=32, max_depth=10, radius=None):
        self.leaf_capacity = leaf_capacity
        self.max_depth = max_depth
        self.radius = radius

    def fit(self, model: LabeledSurfaceModel, y=None, voxel_size=None):
        self.tree_ = build_octree(model, self.leaf_capacity, self.max_depth)
        self.model_ = model
        self.radius_ = self.radius if self.radius is not None else voxel_size
        if self.radius_ is None:
            raise ValueError("radius or voxel_size is required")
        return self

    def predict(self, origins, directions) -> list:
        origins = np.atleast_2d(np.asarray(origins, dtype=float))
        directions = np.atleast_2d(np.asarray(directions, dtype=float))
        if origins.shape != directions.shape:
            raise ValueError("origins and directions differ in shape")
        return [raycast_query(self.tree_, self.model_, o, d, self.radius_)
                for o, d in zip(origins, directions)]
