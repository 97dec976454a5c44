"""Procedural colon phantom: a tube around a cubic centerline.

The lumen wall sits at radius::

    R(s, theta) = r0 * (1 + a * sin(2 pi s / wavelength)) - sum_k bump_k(s, theta)

where ``s`` is arclength along the centerline and ``theta`` the angle in a
parallel-transported frame.  Polyp bumps are Gaussians in
``(s, r0 * theta)`` protruding into the lumen.

The signed distance estimate is ``h / |grad h|`` with ``h = rho - R``; it is
negative inside the lumen, exact for a plain cylinder and has unit gradient
on the surface otherwise.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.spatial import cKDTree

MUCOSA = 0
POLYP = 1


class PhantomError(ValueError):
    pass


@dataclass(frozen=True)
class Polyp:
    s: float
    theta: float
    height: float
    width: float

    @property
    def sigma(self) -> float:
        return self.width / 2.0


@dataclass(frozen=True)
class PhantomSpec:
    centerline: tuple = ((0.0, 0.0, 0.0), (0.0, 0.0, 200.0))
    base_radius: float = 15.0
    haustra_amplitude: float = 0.1
    haustra_wavelength: float = 25.0
    polyps: tuple = ()
    seed: int = 0
    segment_length: float = 2.0

    def __post_init__(self):
        pts = np.asarray(self.centerline, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 3 or len(pts) < 2:
            raise PhantomError("centerline needs at least two 3D control points")
        if self.base_radius <= 0:
            raise PhantomError("base_radius must be positive")
        if not 0 <= self.haustra_amplitude < 1:
            raise PhantomError("haustra_amplitude must lie in [0, 1)")
        if self.haustra_wavelength <= 0:
            raise PhantomError("haustra_wavelength must be positive")
        polyps = tuple(p if isinstance(p, Polyp) else Polyp(**p) for p in self.polyps)
        object.__setattr__(self, "polyps", polyps)
        object.__setattr__(self, "centerline", tuple(tuple(map(float, p)) for p in pts))
        for p in polyps:
            if not 0 < p.height < self.base_radius:
                raise PhantomError("polyp height must lie in (0, base_radius)")
            if p.width <= 0:
                raise PhantomError("polyp width must be positive")
        worst = self.base_radius * (1 - self.haustra_amplitude) - sum(p.height for p in polyps)
        if worst <= 0:
            raise PhantomError("tube self-intersects: minimum radius is not positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["centerline"] = [list(p) for p in self.centerline]
        d["polyps"] = [asdict(p) for p in self.polyps]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        d = dict(d)
        d["centerline"] = tuple(tuple(p) for p in d.get("centerline", cls.centerline))
        d["polyps"] = tuple(Polyp(**p) for p in d.get("polyps", ()))
        return cls(**d)


def default_phantom() -> PhantomSpec:
    """Gently curved demo colon segment with two polyps."""
    return PhantomSpec(
        centerline=((0.0, 0.0, 0.0), (0.0, 0.0, 80.0), (8.0, 0.0, 160.0), (20.0, 4.0, 240.0)),
        base_radius=15.0,
        haustra_amplitude=0.12,
        haustra_wavelength=22.0,
        polyps=(Polyp(s=95.0, theta=0.6, height=5.0, width=7.0),
                Polyp(s=170.0, theta=3.6, height=4.0, width=6.0)),
    )


@dataclass
class SurfaceQuery:
    sdf: np.ndarray
    s: np.ndarray
    theta: np.ndarray
    rho: np.ndarray
    radius: np.ndarray
    normal: np.ndarray
    seg: np.ndarray


@dataclass
class Phantom:
    """Implicit surface built from a :class:`PhantomSpec`."""

    spec: PhantomSpec
    vertices: np.ndarray = field(init=False, repr=False)
    tangents: np.ndarray = field(init=False, repr=False)
    normals: np.ndarray = field(init=False, repr=False)
    binormals: np.ndarray = field(init=False, repr=False)
    seg_start: np.ndarray = field(init=False, repr=False)
    seg_len: float = field(init=False)
    length: float = field(init=False)

    def __post_init__(self):
        self._build_polyline()
        self._tree = cKDTree(self.vertices)

    # -- centerline ----------------------------------------------------------
    def _build_polyline(self):
        ctrl = np.asarray(self.spec.centerline, float)
        chord = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(ctrl, axis=0), axis=1))])
        if len(ctrl) == 2:
            dense_u = np.linspace(0.0, chord[-1], 2)
            dense = ctrl.copy()
        else:
            spline = CubicSpline(chord, ctrl, axis=0)
            dense_u = np.linspace(0.0, chord[-1], max(2000, int(chord[-1] * 20)))
            dense = spline(dense_u)
        arc = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(dense, axis=0), axis=1))])
        length = float(arc[-1])
        m = max(1, int(math.ceil(length / self.spec.segment_length)))
        s_vert = np.linspace(0.0, length, m + 1)
        if len(ctrl) == 2:
            verts = ctrl[0] + (s_vert / length)[:, None] * (ctrl[1] - ctrl[0])
        else:
            verts = np.stack([np.interp(s_vert, arc, dense[:, i]) for i in range(3)], axis=1)
        seg = np.diff(verts, axis=0)
        lens = np.linalg.norm(seg, axis=1)
        # arclength is measured on the polyline itself
        self.seg_start = np.concatenate([[0.0], np.cumsum(lens)])[:-1]
        self.length = float(lens.sum())
        self.seg_len = float(lens.mean())
        self._seg_lens = lens
        self.vertices = verts
        self.tangents = seg / lens[:, None]
        self.normals, self.binormals = _transport_frames(self.tangents)
        vt = np.empty((len(verts), 3))
        vt[0], vt[-1] = self.tangents[0], self.tangents[-1]
        vt[1:-1] = self.tangents[:-1] + self.tangents[1:]
        self._vtan = vt / np.linalg.norm(vt, axis=1, keepdims=True)
        vn = np.empty((len(verts), 3))
        vn[0], vn[-1] = self.normals[0], self.normals[-1]
        vn[1:-1] = self.normals[:-1] + self.normals[1:]
        vn -= np.einsum("ij,ij->i", vn, self._vtan)[:, None] * self._vtan
        self._vnrm = vn / np.linalg.norm(vn, axis=1, keepdims=True)

    @property
    def n_segments(self) -> int:
        return len(self.tangents)

    def point_at(self, s) -> np.ndarray:
        s = np.asarray(s, float)
        k = np.clip(np.searchsorted(self.seg_start, s, side="right") - 1, 0, self.n_segments - 1)
        return self.vertices[k] + (s - self.seg_start[k])[..., None] * self.tangents[k]

    def frame_at(self, s) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        s = np.asarray(s, float)
        k = np.clip(np.searchsorted(self.seg_start, s, side="right") - 1, 0, self.n_segments - 1)
        return self.tangents[k], self.normals[k], self.binormals[k]

    # -- closest-segment search ---------------------------------------------
    def nearest_segment(self, p: np.ndarray) -> np.ndarray:
        _, idx = self._tree.query(np.asarray(p, float).reshape(-1, 3))
        return np.clip(idx, 0, self.n_segments - 1)

    def _project(self, p: np.ndarray, seg: np.ndarray):
        """Projection parameter of each point on segment ``seg``.

        The cutting plane through ``P_k + lam * (P_k+1 - P_k)`` has the
        linearly blended vertex tangent as normal, so the projection is
        continuous across vertices.
        """
        d0 = p - self.vertices[seg]
        delta = self.vertices[seg + 1] - self.vertices[seg]
        a = self._vtan[seg]
        db = self._vtan[seg + 1] - a
        a2 = -np.einsum("ij,ij->i", delta, db)
        a1 = np.einsum("ij,ij->i", d0, db) - np.einsum("ij,ij->i", delta, a)
        a0 = np.einsum("ij,ij->i", d0, a)
        disc = a1 * a1 - 4 * a2 * a0
        sq = np.sqrt(np.maximum(disc, 0.0))
        q = -0.5 * (a1 + np.where(a1 >= 0, sq, -sq))
        lin = -a0 / np.where(a1 != 0, a1, -1e-300)
        with np.errstate(divide="ignore", invalid="ignore"):
            lam = np.where((disc >= 0) & (q != 0), a0 / q, lin)
        return lam

    def _walk(self, p: np.ndarray, seg: np.ndarray):
        """Move each point's segment guess to the segment whose slab contains it."""
        seg = seg.copy()
        m = self.n_segments
        lam = self._project(p, seg)
        moving = np.ones(len(p), bool)
        for _ in range(m + 1):
            fwd = moving & (lam > 1.0) & (seg < m - 1)
            back = moving & (lam < 0.0) & (seg > 0)
            if not (fwd.any() or back.any()):
                break
            cand = seg + fwd.astype(int) - back.astype(int)
            cl = self._project(p, cand)
            # guards against ping-pong where adjacent slabs do not overlap exactly
            stuck = (fwd & (cl < 0.0)) | (back & (cl > 1.0))
            go = (fwd | back) & ~stuck
            seg[go] = cand[go]
            lam[go] = cl[go]
            lam[stuck & fwd] = 1.0
            lam[stuck & back] = 0.0
            moving = go
        return seg, lam

    # -- radius field --------------------------------------------------------
    def radius(self, s, theta):
        """Wall radius and its partial derivatives (R, dR/ds, dR/dtheta)."""
        sp = self.spec
        r0 = sp.base_radius
        w = 2 * math.pi / sp.haustra_wavelength
        s = np.asarray(s, float)
        theta = np.asarray(theta, float)
        r = r0 * (1 + sp.haustra_amplitude * np.sin(w * s))
        r_s = r0 * sp.haustra_amplitude * w * np.cos(w * s)
        r_t = np.zeros_like(r)
        for pol in sp.polyps:
            ds = s - pol.s
            dth = _wrap(theta - pol.theta)
            sig2 = pol.sigma ** 2
            e = pol.height * np.exp(-0.5 * (ds * ds + r0 * r0 * dth * dth) / sig2)
            r = r - e
            r_s = r_s + e * ds / sig2
            r_t = r_t + e * r0 * r0 * dth / sig2
        return r, r_s, r_t

    def label_at(self, s, theta) -> np.ndarray:
        s = np.asarray(s, float)
        out = np.full(s.shape, MUCOSA, dtype=np.uint8)
        r0 = self.spec.base_radius
        for pol in self.spec.polyps:
            arc = np.hypot(s - pol.s, r0 * _wrap(np.asarray(theta) - pol.theta))
            out[arc <= pol.width] = POLYP
        return out

    # -- queries -------------------------------------------------------------
    def query(self, p, seg=None) -> SurfaceQuery:
        p = np.asarray(p, float).reshape(-1, 3)
        if seg is None:
            seg = self.nearest_segment(p)
        seg, lam = self._walk(p, np.asarray(seg))
        m = self.n_segments
        lc = lam.copy()
        inner = ~(((seg == 0) & (lam < 0)) | ((seg == m - 1) & (lam > 1)))
        lc[inner] = np.clip(lam[inner], 0.0, 1.0)
        lens = self._seg_lens[seg]
        w1 = np.clip(lc, 0.0, 1.0)[:, None]
        tan = (1 - w1) * self._vtan[seg] + w1 * self._vtan[seg + 1]
        tan /= np.linalg.norm(tan, axis=1, keepdims=True)
        nrm = (1 - w1) * self._vnrm[seg] + w1 * self._vnrm[seg + 1]
        nrm -= np.einsum("ij,ij->i", nrm, tan)[:, None] * tan
        nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
        bnm = np.cross(tan, nrm)
        s = self.seg_start[seg] + lc * lens
        c = self.vertices[seg] + (lc * lens)[:, None] * self.tangents[seg]
        rv = p - c
        rho = np.linalg.norm(rv, axis=1)
        theta = np.mod(np.arctan2(np.einsum("ij,ij->i", rv, bnm), np.einsum("ij,ij->i", rv, nrm)),
                       2 * math.pi)
        safe = np.maximum(rho, 1e-12)
        e_r = np.where((rho > 1e-12)[:, None], rv / safe[:, None], nrm)
        e_t = np.cross(tan, e_r)
        r, r_s, r_t = self.radius(s, theta)
        rho_eff = np.maximum(rho, 0.5 * self.spec.base_radius)
        g_t = r_t / rho_eff
        grad = e_r - r_s[:, None] * tan - g_t[:, None] * e_t
        gnorm = np.sqrt(1.0 + r_s * r_s + g_t * g_t)
        sdf = (rho - r) / gnorm
        normal = grad / gnorm[:, None]
        return SurfaceQuery(sdf, s, theta, rho, r, normal, seg)

    def sdf(self, p) -> np.ndarray:
        p = np.asarray(p, float)
        return self.query(p.reshape(-1, 3)).sdf.reshape(p.shape[:-1])

    def label(self, p) -> np.ndarray:
        q = self.query(np.asarray(p, float).reshape(-1, 3))
        return self.label_at(q.s, q.theta)


def build_phantom(spec: PhantomSpec) -> Phantom:
    return Phantom(spec)


def _wrap(a):
    return (np.asarray(a) + math.pi) % (2 * math.pi) - math.pi


def _transport_frames(tangents: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Rotation-minimising (parallel transport) normals along the polyline."""
    t0 = tangents[0]
    ref = np.array([0.0, 0.0, 1.0])
    n0 = np.cross(t0, ref)
    if np.linalg.norm(n0) < 1e-6:
        n0 = np.cross(t0, np.array([1.0, 0.0, 0.0]))
    n0 /= np.linalg.norm(n0)
    normals = np.empty_like(tangents)
    normals[0] = n0
    for k in range(1, len(tangents)):
        a, b = tangents[k - 1], tangents[k]
        axis = np.cross(a, b)
        sn = np.linalg.norm(axis)
        n = normals[k - 1]
        if sn > 1e-12:
            axis /= sn
            cs = float(np.clip(np.dot(a, b), -1.0, 1.0))
            ang = math.atan2(sn, cs)
            n = (n * math.cos(ang) + np.cross(axis, n) * math.sin(ang)
                 + axis * np.dot(axis, n) * (1 - math.cos(ang)))
        n = n - np.dot(n, b) * b
        normals[k] = n / np.linalg.norm(n)
    binormals = np.cross(tangents, normals)
    return normals, binormals
