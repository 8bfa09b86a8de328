"""Pure numpy implementations of the simulation hot kernels.

Signatures and results match :mod:`lanebench._ckernels`; this module is the
fallback when the compiled extension is unavailable.
"""
import numpy as np

NAME = "python"

EGO_BLUE = (0, 0, 255)
SOCIAL_GREEN = (0, 255, 0)
LINE_RED = (255, 0, 0)
SIDEWALK_GRAY = (128, 128, 128)


def idm_accel(speed, v0, gap, lead_speed, has_leader, a_max, b, s0, T, delta, b_hard):
    speed = np.asarray(speed, dtype=np.float64)
    has_leader = np.asarray(has_leader, dtype=bool)
    gap = np.asarray(gap, dtype=np.float64)
    free = 1.0 - (speed / v0) ** delta
    dyn = speed * T + speed * (speed - lead_speed) / (2.0 * np.sqrt(a_max * b))
    s_star = s0 + np.maximum(dyn, 0.0)
    safe_gap = np.where(gap > 0, gap, 1.0)
    inter = np.where(has_leader, (s_star / safe_gap) ** 2, 0.0)
    a = a_max * (free - inter)
    a = np.where(has_leader & (gap <= 0), -b_hard, a)
    return np.minimum(np.maximum(a, -b_hard), a_max)


def control_leaders(s, lane, lc_dir, lc_progress, length):
    """Nearest vehicle ahead, for car following; ``-1`` where none.

    A follower looks in its member lane (the target lane from half-way
    through its own change); a vehicle ahead counts in every lane it
    occupies, i.e. both lanes while it is changing.
    """
    n = len(s)
    lo = lane + np.minimum(lc_dir, 0)
    hi = lane + np.maximum(lc_dir, 0)
    own = np.where((lc_dir != 0) & (lc_progress >= 0.5), lane + lc_dir, lane)
    share = (own[:, None] >= lo[None, :]) & (own[:, None] <= hi[None, :])
    ahead = s[None, :] > s[:, None]
    dist = np.where(share & ahead, s[None, :] - s[:, None], np.inf)
    if n == 0:
        return np.empty(0, dtype=np.int64), np.empty(0)
    j = np.argmin(dist, axis=1)
    d = dist[np.arange(n), j]
    has = np.isfinite(d)
    leader = np.where(has, j, -1).astype(np.int64)
    gap = np.where(has, d - 0.5 * (length + length[j]), np.inf)
    return leader, gap


def idm_controls(s, speed, lane, lc_dir, lc_progress, length, v0, idm_mask, a_max, b, s0, T, delta,
                 b_hard):
    leader, gap = control_leaders(s, lane, lc_dir, lc_progress, length)
    has = leader >= 0
    lead_speed = np.where(has, speed[np.maximum(leader, 0)], 0.0)
    safe_v0 = np.where(idm_mask != 0, v0, 1.0)
    a = idm_accel(speed, safe_v0, gap, lead_speed, has, a_max, b, s0, T, delta, b_hard)
    return np.where(idm_mask != 0, a, 0.0)


def integrate(s, y, speed, accel, lane, lc_dir, lc_progress, dt, lc_duration, lane_width):
    v_new = speed + accel * dt
    stops = v_new < 0
    with np.errstate(divide="ignore", invalid="ignore"):
        stop_dist = np.where(stops, speed * speed / (-2.0 * np.where(stops, accel, -1.0)), 0.0)
    s_new = np.where(stops, s + stop_dist, s + speed * dt + 0.5 * accel * dt * dt)
    v_new = np.maximum(v_new, 0.0)
    acc = (v_new - speed) / dt

    changing = lc_dir != 0
    p_new = np.where(changing, np.minimum(lc_progress + dt / lc_duration, 1.0), 0.0)
    done = changing & (p_new >= 1.0 - 1e-9)
    lane_new = np.where(done, lane + lc_dir, lane)
    dir_new = np.where(done, 0, lc_dir)
    p_new = np.where(done, 0.0, p_new)
    y_new = np.where(changing, (lane_new + 0.5) * lane_width + dir_new * lane_width * p_new, y)
    return (s_new, y_new, v_new, acc, lane_new.astype(np.int64), dir_new.astype(np.int64),
            p_new)


def collision_pairs(s, y, length, width):
    ds = np.abs(s[:, None] - s[None, :])
    dy = np.abs(y[:, None] - y[None, :])
    hit = (ds < 0.5 * (length[:, None] + length[None, :])) & (dy < 0.5 * (width[:, None] + width[None, :]))
    i, j = np.nonzero(np.triu(hit, k=1))
    return np.stack([i, j], axis=1).astype(np.int64)


def rasterize(s, y, length, width, ego_index, lane_count, lane_width, rear, front, size):
    img = np.zeros((size, size, 3), dtype=np.uint8)
    row_scale = (front + rear) / size
    span = (lane_count + 2) * lane_width
    y_max = (lane_count + 1) * lane_width
    col_scale = span / size
    rows = front - (np.arange(size) + 0.5) * row_scale
    cols = y_max - (np.arange(size) + 0.5) * col_scale
    road_w = lane_count * lane_width
    img[:, (cols <= 0.0) | (cols >= road_w)] = SIDEWALK_GRAY
    for k in range(lane_count + 1):
        c = int((y_max - k * lane_width) / span * size)
        img[:, min(max(c, 0), size - 1)] = LINE_RED
    ego_s = s[ego_index]
    order = [k for k in range(len(s)) if k != ego_index] + [ego_index]
    for k in order:
        rmask = np.abs(rows - (s[k] - ego_s)) < 0.5 * length[k]
        if not rmask.any():
            continue
        cmask = np.abs(cols - y[k]) < 0.5 * width[k]
        colour = EGO_BLUE if k == ego_index else SOCIAL_GREEN
        img[np.ix_(rmask, cmask)] = colour
    return img
