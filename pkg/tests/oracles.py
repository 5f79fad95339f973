"""Independent reference implementations used as test oracles.

Everything here is plain Python over lists so that it shares no code path
with the numpy implementations under test.
"""
import math


def mean(xs):
    return math.fsum(xs) / len(xs)


def pstd(xs):
    m = mean(xs)
    return math.sqrt(math.fsum((x - m) ** 2 for x in xs) / len(xs))


def percentile(xs, q):
    """Linear interpolation between closest ranks (numpy's default method)."""
    s = sorted(xs)
    pos = (len(s) - 1) * q / 100.0
    lo = math.floor(pos)
    hi = min(lo + 1, len(s) - 1)
    return s[lo] + (pos - lo) * (s[hi] - s[lo])


def dop(track, end_frame, n=50):
    """8x7 list of lists for the ``n`` frames ending at ``end_frame``."""
    end = end_frame - int(track.frame[0])
    rows = range(end - n + 1, end + 1)
    y0, x0 = float(track.y[rows[0]]), float(track.x[rows[0]])
    features = [
        [float(track.y[i]) - y0 for i in rows],
        [float(track.x[i]) - x0 for i in rows],
        [float(track.vy[i]) for i in rows],
        [float(track.vx[i]) for i in rows],
        [float(track.ay[i]) for i in rows],
        [float(track.ax[i]) for i in rows],
        [float(track.space_headway[i]) for i in rows],
        [float(track.time_headway[i]) for i in rows],
    ]
    return [[mean(f), pstd(f), percentile(f, 50), percentile(f, 25), percentile(f, 75), min(f), max(f)]
            for f in features]


def factors(recording, ego_id, frame, roles, t_h=1.5):
    """Traffic factors straight from their definitions; ``roles`` maps role -> id or None."""
    def state(vid):
        if vid is None:
            return None
        t = recording.tracks.get(vid)
        if t is None or not (t.frame[0] <= frame <= t.frame[-1]):
            return None
        i = frame - int(t.frame[0])
        return float(t.x[i]), float(t.vx[i])

    ego = recording.tracks[ego_id]
    i = frame - int(ego.frame[0])
    xe, ve = float(ego.x[i]), float(ego.vx[i])
    v, d = {}, {}
    for role in ("P", "PL", "PR", "FL", "FR"):
        s = state(roles[role])
        v[role] = 0.0 if s is None else s[1]
        d[role] = 0.0 if s is None else abs(s[0] - xe)
    return [ve - v["P"], v["PL"] - v["P"], v["PR"] - v["P"], d["PL"] - d["P"], d["PR"] - d["P"],
            d["FL"], d["FR"], ve - v["FL"], ve - v["FR"], d["P"] - ve * t_h]


def conv2d_same(x, kernels, bias):
    """Naive six-loop same-padded cross-correlation; even kernels pad bottom/right."""
    c_in, h, w = len(x), len(x[0]), len(x[0][0])
    c_out, k = len(kernels), len(kernels[0][0])
    before = (k - 1) // 2
    out = [[[0.0] * w for _ in range(h)] for _ in range(c_out)]
    for o in range(c_out):
        for i in range(h):
            for j in range(w):
                acc = bias[o]
                for c in range(c_in):
                    for di in range(k):
                        for dj in range(k):
                            ii, jj = i + di - before, j + dj - before
                            if 0 <= ii < h and 0 <= jj < w:
                                acc += x[c][ii][jj] * kernels[o][c][di][dj]
                out[o][i][j] = acc
    return out
