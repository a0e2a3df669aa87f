"""Topological active nets with link cutting and a perturbation escape step.

A mesh is a ``rows x cols`` grid of nodes placed over a region.  Internal
energy keeps the grid regular (membrane term on first differences, thin
plate term on second differences, both measured relative to the rest
spacing); external energy pulls interior nodes onto foreground and
perimeter nodes onto image edges.  Nodes are moved greedily; links that
lie entirely over expensive background are cut, which lets the mesh open
holes and split into several pieces.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .boxes import RoiBox

# minimum energy decrease that counts as an improvement
ENERGY_TOL = 1e-9


@dataclass(frozen=True)
class EnergyParams:
    elasticity: float = 1.0
    rigidity: float = 0.5
    w_internal: float = 2.0
    w_boundary: float = 2.0
    w_distance: float = 0.5
    search_radius: int = 2
    max_passes: int = 100
    cut_thresholds: tuple[float, ...] = (0.5, 1.0, 2.0)
    # normalised gradient magnitude at which a pixel counts as an edge for the distance map
    edge_threshold: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "cut_thresholds", tuple(float(t) for t in self.cut_thresholds))
        for name in ("elasticity", "rigidity", "w_internal", "w_boundary", "w_distance"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.search_radius < 1:
            raise ValueError("search_radius must be >= 1")
        if self.max_passes < 1:
            raise ValueError("max_passes must be >= 1")
        t = self.cut_thresholds
        if not t or any(b < a for a, b in zip(t, t[1:])):
            raise ValueError("cut_thresholds must be a non-empty ascending sequence")


@dataclass
class ActiveNetMesh:
    """Node grid with positions ``pos[r, c] = (x, y)`` and 4-neighbour links.

    ``hlinks[r, c]`` joins ``(r, c)`` and ``(r, c + 1)``; ``vlinks[r, c]``
    joins ``(r, c)`` and ``(r + 1, c)``.  ``spacing`` is the rest distance
    between neighbours along x and y.
    """

    pos: np.ndarray
    hlinks: np.ndarray
    vlinks: np.ndarray
    alive: np.ndarray
    spacing: tuple[float, float]

    @property
    def rows(self) -> int:
        return self.pos.shape[0]

    @property
    def cols(self) -> int:
        return self.pos.shape[1]

    def copy(self) -> "ActiveNetMesh":
        return ActiveNetMesh(
            self.pos.copy(), self.hlinks.copy(), self.vlinks.copy(), self.alive.copy(), self.spacing
        )

    def degree(self) -> np.ndarray:
        deg = np.zeros((self.rows, self.cols), dtype=np.int64)
        deg[:, :-1] += self.hlinks
        deg[:, 1:] += self.hlinks
        deg[:-1, :] += self.vlinks
        deg[1:, :] += self.vlinks
        return deg

    def perimeter(self) -> np.ndarray:
        """Alive nodes missing at least one of four links (grid border or next to a cut)."""
        return self.alive & (self.degree() < 4)

    def link_count(self) -> int:
        return int(self.hlinks.sum() + self.vlinks.sum())

    def to_dict(self) -> dict:
        return {
            "rows": self.rows,
            "cols": self.cols,
            "spacing": [float(s) for s in self.spacing],
            "positions": [[float(x), float(y)] for x, y in self.pos.reshape(-1, 2)],
            "alive": [int(a) for a in self.alive.ravel()],
            "links": [int(b) for b in subnet_mask(self).ravel()],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ActiveNetMesh":
        rows, cols = int(d["rows"]), int(d["cols"])
        n = rows * cols
        pos = np.asarray(d["positions"], dtype=np.float64).reshape(rows, cols, 2)
        alive = np.asarray(d["alive"], dtype=bool).reshape(rows, cols)
        adj = np.asarray(d["links"], dtype=np.uint8).reshape(n, n)
        idx = np.arange(n).reshape(rows, cols)
        hl = adj[idx[:, :-1], idx[:, 1:]].astype(bool)
        vl = adj[idx[:-1, :], idx[1:, :]].astype(bool)
        return cls(pos, hl, vl, alive, tuple(d["spacing"]))


def init_mesh(rows: int, cols: int, bbox) -> ActiveNetMesh:
    """Full mesh with nodes evenly spread from ``(x, y)`` to ``(x + w, y + h)``."""
    if rows < 2 or cols < 2:
        raise ValueError("mesh needs at least 2 rows and 2 columns")
    x, y, w, h = (float(v) for v in bbox)
    if not (w > 0 and h > 0):
        raise ValueError(f"degenerate bounding box {tuple(bbox)}")
    xs = x + w * np.arange(cols) / (cols - 1)
    ys = y + h * np.arange(rows) / (rows - 1)
    pos = np.stack(np.meshgrid(xs, ys), axis=-1)
    return ActiveNetMesh(
        pos=pos,
        hlinks=np.ones((rows, cols - 1), dtype=bool),
        vlinks=np.ones((rows - 1, cols), dtype=bool),
        alive=np.ones((rows, cols), dtype=bool),
        spacing=(w / (cols - 1), h / (rows - 1)),
    )


def subnet_mask(mesh: ActiveNetMesh) -> np.ndarray:
    """Node-by-node binary link matrix, node ``(r, c)`` at index ``r * cols + c``."""
    n = mesh.rows * mesh.cols
    idx = np.arange(n).reshape(mesh.rows, mesh.cols)
    adj = np.zeros((n, n), dtype=np.uint8)
    a, b = idx[:, :-1][mesh.hlinks], idx[:, 1:][mesh.hlinks]
    adj[a, b] = adj[b, a] = 1
    a, b = idx[:-1, :][mesh.vlinks], idx[1:, :][mesh.vlinks]
    adj[a, b] = adj[b, a] = 1
    return adj


# --- image terms ------------------------------------------------------------


def sobel_magnitude(image: np.ndarray) -> np.ndarray:
    """Sobel gradient magnitude scaled to [0, 1] (all zeros for a flat image)."""
    img = np.pad(np.asarray(image, dtype=np.float64), 1, mode="edge")
    tl, tc, tr = img[:-2, :-2], img[:-2, 1:-1], img[:-2, 2:]
    ml, mr = img[1:-1, :-2], img[1:-1, 2:]
    bl, bc, br = img[2:, :-2], img[2:, 1:-1], img[2:, 2:]
    gx = (tr + 2 * mr + br) - (tl + 2 * ml + bl)
    gy = (bl + 2 * bc + br) - (tl + 2 * tc + tr)
    mag = np.hypot(gx, gy)
    peak = mag.max()
    return mag / peak if peak > 0 else mag


@njit(cache=True)
def _chamfer_34(edges):
    h, w = edges.shape
    big = 1 << 40
    d = np.empty((h, w), dtype=np.int64)
    for r in range(h):
        for c in range(w):
            d[r, c] = 0 if edges[r, c] else big
    for r in range(h):
        for c in range(w):
            v = d[r, c]
            if c > 0 and d[r, c - 1] + 3 < v:
                v = d[r, c - 1] + 3
            if r > 0:
                if d[r - 1, c] + 3 < v:
                    v = d[r - 1, c] + 3
                if c > 0 and d[r - 1, c - 1] + 4 < v:
                    v = d[r - 1, c - 1] + 4
                if c < w - 1 and d[r - 1, c + 1] + 4 < v:
                    v = d[r - 1, c + 1] + 4
            d[r, c] = v
    for r in range(h - 1, -1, -1):
        for c in range(w - 1, -1, -1):
            v = d[r, c]
            if c < w - 1 and d[r, c + 1] + 3 < v:
                v = d[r, c + 1] + 3
            if r < h - 1:
                if d[r + 1, c] + 3 < v:
                    v = d[r + 1, c] + 3
                if c < w - 1 and d[r + 1, c + 1] + 4 < v:
                    v = d[r + 1, c + 1] + 4
                if c > 0 and d[r + 1, c - 1] + 4 < v:
                    v = d[r + 1, c - 1] + 4
            d[r, c] = v
    return d


def chamfer_distance(edges: np.ndarray) -> np.ndarray:
    """3-4 chamfer distance to the nearest ``True`` pixel, in pixel units.

    With no edge pixels at all every distance is ``height + width``.
    """
    edges = np.asarray(edges, dtype=np.bool_)
    if not edges.any():
        return np.full(edges.shape, float(edges.shape[0] + edges.shape[1]))
    return _chamfer_34(edges) / 3.0


def _as_array(img) -> np.ndarray:
    return np.asarray(getattr(img, "data", img))


@dataclass
class ExternalField:
    """Per-pixel external energy maps for interior and perimeter nodes."""

    interior: np.ndarray
    boundary: np.ndarray
    fg_mask: np.ndarray
    extra: dict = field(default_factory=dict)

    @property
    def shape(self) -> tuple[int, int]:
        return self.interior.shape

    @classmethod
    def build(cls, image, fg_mask, params: EnergyParams) -> "ExternalField":
        image = _as_array(image).astype(np.float64)
        mask = _as_array(fg_mask)
        if image.shape != mask.shape:
            raise ValueError(f"image shape {image.shape} != mask shape {mask.shape}")
        occupancy = (mask > 0).astype(np.float64)
        grad = sobel_magnitude(image)
        dist = chamfer_distance(grad >= params.edge_threshold)
        interior = params.w_internal * (1.0 - occupancy)
        boundary = params.w_boundary * (1.0 - grad) + params.w_distance * dist
        return cls(interior, boundary, mask, {"gradient": grad, "distance": dist})


def _field_for(image, fg_mask, params, field):
    if field is not None:
        return field
    if image is None:
        image = np.zeros_like(_as_array(fg_mask), dtype=np.float64)
    return ExternalField.build(image, fg_mask, params)


def bilinear(grid: np.ndarray, x, y):
    """Bilinear sample with coordinates clamped to the grid."""
    h, w = grid.shape
    x = np.clip(np.asarray(x, dtype=np.float64), 0, w - 1)
    y = np.clip(np.asarray(y, dtype=np.float64), 0, h - 1)
    x0 = np.floor(x).astype(np.intp)
    y0 = np.floor(y).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx, fy = x - x0, y - y0
    return (
        grid[y0, x0] * (1 - fx) * (1 - fy)
        + grid[y0, x1] * fx * (1 - fy)
        + grid[y1, x0] * (1 - fx) * fy
        + grid[y1, x1] * fx * fy
    )


def node_external(mesh: ActiveNetMesh, field: ExternalField) -> np.ndarray:
    """External energy of every node (zero for dead ones)."""
    xs, ys = mesh.pos[..., 0], mesh.pos[..., 1]
    ext = np.where(mesh.perimeter(), bilinear(field.boundary, xs, ys), bilinear(field.interior, xs, ys))
    return np.where(mesh.alive, ext, 0.0)


def energy_terms(mesh: ActiveNetMesh, image, fg_mask, params: EnergyParams, *, field=None) -> dict:
    """Energy split into membrane, thin-plate and external sums (weights applied)."""
    field = _field_for(image, fg_mask, params, field)
    if fg_mask is not None and _as_array(fg_mask).shape != field.shape:
        raise ValueError("mask and image dimensions differ")
    sx, sy = mesh.spacing
    pos = mesh.pos
    dh = (pos[:, 1:] - pos[:, :-1]) / sx - np.array([1.0, 0.0])
    dv = (pos[1:] - pos[:-1]) / sy - np.array([0.0, 1.0])
    membrane = (dh * dh).sum(-1)[mesh.hlinks].sum() + (dv * dv).sum(-1)[mesh.vlinks].sum()
    d2h = (pos[:, :-2] - 2 * pos[:, 1:-1] + pos[:, 2:]) / sx
    d2v = (pos[:-2] - 2 * pos[1:-1] + pos[2:]) / sy
    th = mesh.hlinks[:, :-1] & mesh.hlinks[:, 1:]
    tv = mesh.vlinks[:-1] & mesh.vlinks[1:]
    plate = (d2h * d2h).sum(-1)[th].sum() + (d2v * d2v).sum(-1)[tv].sum()
    external = node_external(mesh, field).sum()
    return {
        "membrane": params.elasticity * float(membrane),
        "thin_plate": params.rigidity * float(plate),
        "external": float(external),
    }


def mesh_energy(mesh: ActiveNetMesh, image, fg_mask, params: EnergyParams, *, field=None) -> float:
    return sum(energy_terms(mesh, image, fg_mask, params, field=field).values())


# --- greedy deformation -----------------------------------------------------


@njit(cache=True)
def _sample(grid, x, y):
    h, w = grid.shape
    x = min(max(x, 0.0), w - 1.0)
    y = min(max(y, 0.0), h - 1.0)
    x0 = int(math.floor(x))
    y0 = int(math.floor(y))
    x1 = min(x0 + 1, w - 1)
    y1 = min(y0 + 1, h - 1)
    fx = x - x0
    fy = y - y0
    return (
        grid[y0, x0] * (1 - fx) * (1 - fy)
        + grid[y0, x1] * fx * (1 - fy)
        + grid[y1, x0] * (1 - fx) * fy
        + grid[y1, x1] * fx * fy
    )


@njit(cache=True)
def _coord(pos, rr, cc, r, c, x, y, axis):
    if rr == r and cc == c:
        return x if axis == 0 else y
    return pos[rr, cc, axis]


@njit(cache=True)
def _local_energy(r, c, x, y, pos, hl, vl, perim, sx, sy, interior, boundary, el, rig):
    """Every energy term that involves node (r, c) when it sits at (x, y)."""
    rows, cols = pos.shape[0], pos.shape[1]
    e = _sample(boundary, x, y) if perim[r, c] else _sample(interior, x, y)
    if c > 0 and hl[r, c - 1]:
        dx = (x - pos[r, c - 1, 0]) / sx - 1.0
        dy = (y - pos[r, c - 1, 1]) / sx
        e += el * (dx * dx + dy * dy)
    if c < cols - 1 and hl[r, c]:
        dx = (pos[r, c + 1, 0] - x) / sx - 1.0
        dy = (pos[r, c + 1, 1] - y) / sx
        e += el * (dx * dx + dy * dy)
    if r > 0 and vl[r - 1, c]:
        dx = (x - pos[r - 1, c, 0]) / sy
        dy = (y - pos[r - 1, c, 1]) / sy - 1.0
        e += el * (dx * dx + dy * dy)
    if r < rows - 1 and vl[r, c]:
        dx = (pos[r + 1, c, 0] - x) / sy
        dy = (pos[r + 1, c, 1] - y) / sy - 1.0
        e += el * (dx * dx + dy * dy)
    if rig != 0.0:
        for m in range(c - 1, c + 2):
            if m < 1 or m > cols - 2 or not (hl[r, m - 1] and hl[r, m]):
                continue
            ddx = (_coord(pos, r, m - 1, r, c, x, y, 0) - 2 * _coord(pos, r, m, r, c, x, y, 0)
                   + _coord(pos, r, m + 1, r, c, x, y, 0)) / sx
            ddy = (_coord(pos, r, m - 1, r, c, x, y, 1) - 2 * _coord(pos, r, m, r, c, x, y, 1)
                   + _coord(pos, r, m + 1, r, c, x, y, 1)) / sx
            e += rig * (ddx * ddx + ddy * ddy)
        for m in range(r - 1, r + 2):
            if m < 1 or m > rows - 2 or not (vl[m - 1, c] and vl[m, c]):
                continue
            ddx = (_coord(pos, m - 1, c, r, c, x, y, 0) - 2 * _coord(pos, m, c, r, c, x, y, 0)
                   + _coord(pos, m + 1, c, r, c, x, y, 0)) / sy
            ddy = (_coord(pos, m - 1, c, r, c, x, y, 1) - 2 * _coord(pos, m, c, r, c, x, y, 1)
                   + _coord(pos, m + 1, c, r, c, x, y, 1)) / sy
            e += rig * (ddx * ddx + ddy * ddy)
    return e


@njit(cache=True)
def _greedy_pass(pos, hl, vl, alive, perim, sx, sy, interior, boundary, el, rig, k, tol):
    rows, cols = pos.shape[0], pos.shape[1]
    h, w = interior.shape
    moved = 0
    for r in range(rows):
        for c in range(cols):
            if not alive[r, c]:
                continue
            x0 = pos[r, c, 0]
            y0 = pos[r, c, 1]
            e0 = _local_energy(r, c, x0, y0, pos, hl, vl, perim, sx, sy, interior, boundary, el, rig)
            best = -tol
            bx = x0
            by = y0
            for dy in range(-k, k + 1):
                y = y0 + dy
                if y < 0 or y > h - 1:
                    continue
                for dx in range(-k, k + 1):
                    if dx == 0 and dy == 0:
                        continue
                    x = x0 + dx
                    if x < 0 or x > w - 1:
                        continue
                    d = _local_energy(r, c, x, y, pos, hl, vl, perim, sx, sy,
                                      interior, boundary, el, rig) - e0
                    if d < best:
                        best = d
                        bx = x
                        by = y
            if bx != x0 or by != y0:
                pos[r, c, 0] = bx
                pos[r, c, 1] = by
                moved += 1
    return moved


def greedy_deform_pass(mesh: ActiveNetMesh, image, fg_mask, params: EnergyParams, *, field=None):
    """One row-major sweep; each node jumps to the best strictly improving offset.

    Returns ``(new_mesh, moved)``.
    """
    field = _field_for(image, fg_mask, params, field)
    out = mesh.copy()
    sx, sy = out.spacing
    moved = _greedy_pass(
        out.pos, out.hlinks, out.vlinks, out.alive, out.perimeter(),
        float(sx), float(sy), field.interior, field.boundary,
        float(params.elasticity), float(params.rigidity), int(params.search_radius), ENERGY_TOL,
    )
    return out, int(moved)


def converge(mesh: ActiveNetMesh, params: EnergyParams, field: ExternalField, trace=None):
    """Greedy passes until nothing moves or ``max_passes`` is reached.

    ``trace`` receives one ``(energy_before, energy_after)`` pair per pass.
    """
    for _ in range(params.max_passes):
        before = mesh_energy(mesh, None, None, params, field=field) if trace is not None else 0.0
        mesh, moved = greedy_deform_pass(mesh, None, None, params, field=field)
        if trace is not None:
            trace.append((before, mesh_energy(mesh, None, None, params, field=field)))
        if moved == 0:
            break
    return mesh


# --- topology ---------------------------------------------------------------


def _on_background(mesh: ActiveNetMesh, mask: np.ndarray) -> np.ndarray:
    h, w = mask.shape
    cols = np.clip(np.floor(mesh.pos[..., 0] + 0.5).astype(np.intp), 0, w - 1)
    rows = np.clip(np.floor(mesh.pos[..., 1] + 0.5).astype(np.intp), 0, h - 1)
    return mask[rows, cols] == 0


def cut_links(mesh: ActiveNetMesh, fg_mask, threshold: float, image=None,
              params: EnergyParams | None = None, *, field=None) -> ActiveNetMesh:
    """Cut links whose endpoints both sit on background with mean external energy above ``threshold``.

    Links touching a dead node are dropped as well, and nodes left without
    any link die.
    """
    if threshold < 0:
        raise ValueError("threshold must be >= 0")
    params = params or EnergyParams()
    field = _field_for(image, fg_mask, params, field)
    mask = _as_array(fg_mask) if fg_mask is not None else field.fg_mask
    out = mesh.copy()
    ext = node_external(out, field)
    bg = _on_background(out, mask) & out.alive

    cut_h = bg[:, :-1] & bg[:, 1:] & ((ext[:, :-1] + ext[:, 1:]) / 2 > threshold)
    cut_v = bg[:-1] & bg[1:] & ((ext[:-1] + ext[1:]) / 2 > threshold)
    out.hlinks &= ~cut_h & out.alive[:, :-1] & out.alive[:, 1:]
    out.vlinks &= ~cut_v & out.alive[:-1] & out.alive[1:]
    out.alive &= out.degree() > 0
    return out


def perturb(mesh: ActiveNetMesh, rng: np.random.Generator, radius: int, shape) -> ActiveNetMesh:
    """Jitter alive nodes by uniform integer offsets in ``[-radius, radius]``."""
    h, w = shape
    out = mesh.copy()
    offsets = rng.integers(-radius, radius + 1, size=out.pos.shape)
    moved = out.pos + offsets
    moved[..., 0] = np.clip(moved[..., 0], 0, w - 1)
    moved[..., 1] = np.clip(moved[..., 1], 0, h - 1)
    out.pos = np.where(out.alive[..., None], moved, out.pos)
    return out


def segment(mesh: ActiveNetMesh, image, fg_mask, params: EnergyParams | None = None,
            seed: int = 0, trace: list | None = None) -> ActiveNetMesh:
    """Deform, cut and refine ``mesh``; return the lowest-energy result.

    The mesh is first relaxed to a greedy fixed point.  Then, for every cut
    threshold: cut links, relax again, try one seeded perturbation followed
    by relaxation and keep it only if it ends strictly lower.  ``trace``
    (if given) receives ``(before, after)`` energies for every greedy pass.
    """
    params = params or EnergyParams()
    field = ExternalField.build(image, fg_mask, params)

    def energy(m):
        return mesh_energy(m, None, None, params, field=field)

    base = converge(mesh, params, field, trace)
    best, best_e = None, math.inf
    for i, threshold in enumerate(params.cut_thresholds):
        cand = converge(cut_links(base, None, threshold, field=field), params, field, trace)
        cand_e = energy(cand)
        rng = np.random.default_rng([seed, i])
        alt = converge(perturb(cand, rng, params.search_radius, field.shape), params, field, trace)
        alt_e = energy(alt)
        if alt_e < cand_e - ENERGY_TOL:
            cand, cand_e = alt, alt_e
        if cand_e < best_e - ENERGY_TOL:
            best, best_e = cand, cand_e
    return best


def mesh_rows_cols(box: RoiBox, node_spacing: float = 4.0, lo: int = 4, hi: int = 16) -> tuple[int, int]:
    """Grid size for a detection box: about one node per ``node_spacing`` pixels."""
    rows = int(min(max(round(box.h / node_spacing) + 1, lo), hi))
    cols = int(min(max(round(box.w / node_spacing) + 1, lo), hi))
    return rows, cols

