"""Independent reference implementations used to check the package.

These are written from the model definitions directly and deliberately avoid
importing the code under test (only plain data types are shared).
"""

from __future__ import annotations

import cmath
import math
from itertools import combinations

import numpy as np
from shapely.geometry import Polygon


def idm_oracle(s, v, dv, a_max, a_dd, v_d, delta, s0, T_g, cap=math.inf):
    star = s0 + v * T_g + (v * dv) / (2.0 * (a_max * a_dd) ** 0.5)
    interaction = 0.0 if s == math.inf else (star / s) * (star / s)
    raw = a_max * (1.0 - pow(v / v_d, delta) - interaction)
    return float(np.clip(raw, -cap, a_max))


def mobil_oracle(ego_after, ego_before, n_after, n_before, o_after, o_before, p, a_th, b_safe):
    safe = n_after >= -b_safe
    gain = (ego_after - ego_before) + p * ((n_after - n_before) + (o_after - o_before))
    return bool(safe and gain >= a_th)


def wrap_oracle(angle):
    # phase of the unit complex number lies in (-pi, pi]
    return cmath.phase(cmath.exp(1j * angle))


def lateral_oracle(phi_r, phi, v, l, K_h, v_floor):
    err = wrap_oracle(phi_r - phi)
    arg = K_h * err * l / (2.0 * max(v, v_floor))
    return math.asin(max(-1.0, min(1.0, arg)))


def bicycle_oracle(x, y, v, phi, l, a, delta, dt):
    beta = math.atan2(math.sin(delta), 2.0 * math.cos(delta))
    z = complex(x, y) + v * dt * cmath.exp(1j * (phi + beta))
    phi_next = wrap_oracle(phi + v / l * math.sin(beta) * dt)
    return z.real, z.imag, max(0.0, v + a * dt), phi_next


def band_oracle(delta):
    """Severity name for a TTCP difference, written as a lookup over half-open intervals."""
    table = [((-0.0, 2.0), "SeriousDanger"), ((2.0, 5.0), "GeneralDanger")]
    if delta <= 2.0:
        return "SeriousDanger"
    for (lo, hi), name in table[1:]:
        if lo < delta <= hi:
            return name
    if 5.0 < delta and delta < 8.0:
        return "SlightDanger"
    return "NoDanger"


def ttcp_oracle(d_i, v_i, d_j, v_j):
    def ttcp(d, v):
        if d == 0:
            return 0.0
        return math.inf if v == 0 else d / v

    t_i, t_j = ttcp(d_i, v_i), ttcp(d_j, v_j)
    if math.isinf(t_i) or math.isinf(t_j):
        return math.inf, "NoDanger"
    dlt = abs(t_i - t_j)
    return dlt, band_oracle(dlt)


# ---------------------------------------------------------------------------
# geometry


def _seg_intersection(p, p2, q, q2, eps=1e-12):
    """Intersection point of two closed segments, or None (collinear overlaps return None)."""
    r = (p2[0] - p[0], p2[1] - p[1])
    s = (q2[0] - q[0], q2[1] - q[1])
    den = r[0] * s[1] - r[1] * s[0]
    if abs(den) < eps:
        return None
    qp = (q[0] - p[0], q[1] - p[1])
    t = (qp[0] * s[1] - qp[1] * s[0]) / den
    u = (qp[0] * r[1] - qp[1] * r[0]) / den
    if -1e-9 <= t <= 1 + 1e-9 and -1e-9 <= u <= 1 + 1e-9:
        return (p[0] + t * r[0], p[1] + t * r[1])
    return None


def conflict_scan(lanes, tol=0.01):
    """Brute-force segment-pair scan: set of (lane_a, lane_b, kind, x, y) rounded to 1e-3."""
    def near(a, b):
        return math.hypot(a[0] - b[0], a[1] - b[1]) <= tol

    out = set()
    lanes = sorted(lanes, key=lambda l: l.id)
    for a, b in combinations(lanes, 2):
        pts = []
        for i in range(len(a.centerline) - 1):
            for j in range(len(b.centerline) - 1):
                hit = _seg_intersection(a.centerline[i], a.centerline[i + 1], b.centerline[j], b.centerline[j + 1])
                if hit is not None and not any(near(hit, q) for q in pts):
                    pts.append(hit)
        a0, a1, b0, b1 = a.centerline[0], a.centerline[-1], b.centerline[0], b.centerline[-1]
        for p in pts:
            if near(p, a1) and near(p, b1):
                kind, p = "merging", a1
            elif near(p, a0) and near(p, b0):
                kind, p = "rear-end-shared-lane", a0
            elif (near(p, a1) and near(p, b0)) or (near(p, a0) and near(p, b1)):
                continue
            else:
                kind = "crossing"
            out.add((a.id, b.id, kind, round(p[0], 3) + 0.0, round(p[1], 3) + 0.0))
    return out


def rect_polygon(x, y, heading, length, width):
    c, s = math.cos(heading), math.sin(heading)
    pts = []
    for dx, dy in ((length / 2, width / 2), (-length / 2, width / 2), (-length / 2, -width / 2), (length / 2, -width / 2)):
        pts.append((x + dx * c - dy * s, y + dx * s + dy * c))
    return Polygon(pts)


def overlap_oracle(a, b, min_area=1e-9):
    pa = rect_polygon(a.x, a.y, a.heading, a.length, a.width)
    pb = rect_polygon(b.x, b.y, b.heading, b.length, b.width)
    return pa.intersection(pb).area > min_area


# ---------------------------------------------------------------------------
# metrics and retrieval


def pet_oracle(rows, center, radius, same_lane_skip=True):
    """Brute-force PET values for one point from per-step containment flags."""
    times = sorted({r.t for r in rows})
    by_id = {}
    for r in rows:
        by_id.setdefault(r.id, {})[r.t] = r
    spans = []
    for vid, track in by_id.items():
        inside = [t for t in times if t in track and (track[t].x - center[0]) ** 2 + (track[t].y - center[1]) ** 2 <= radius**2]
        # split into runs of consecutive samples of this vehicle
        own = [t for t in times if t in track]
        runs, cur = [], []
        for t in own:
            if t in inside:
                cur.append(t)
            elif cur:
                runs.append(cur)
                cur = []
        if cur:
            runs.append(cur)
        for run in runs:
            spans.append((vid, run[0], run[-1], track[run[0]].lane_id, track[run[0]].is_cav))
    values = []
    for a in spans:
        for b in spans:
            if a[0] == b[0] or not (a[4] or b[4]):
                continue
            if same_lane_skip and a[3] is not None and a[3] == b[3]:
                continue
            gap = b[1] - a[2]
            if round(gap, 6) > 0:
                values.append(round(gap, 6))
    return sorted(values)


def cosine_rank_oracle(embeddings, query, k, decimals=12):
    """Indices of the top-k rows: similarity descending, later rows first on ties.

    Dot products are taken over the non-zero entries only, with plain Python floats.
    """
    q = {i: float(b) for i, b in enumerate(query) if b != 0.0}
    scored = []
    for idx, e in enumerate(embeddings):
        dot = sum(float(e[i]) * b for i, b in q.items())
        scored.append((-round(dot, decimals), -idx))
    scored.sort()
    return [-neg_idx for _, neg_idx in scored[:k]]
