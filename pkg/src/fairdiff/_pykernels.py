"""Pure numpy/Python versions of the compiled kernels (same signatures)."""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

# Moore neighbourhood, clockwise on screen (rows grow downward), starting west.
_DR = (0, -1, -1, -1, 0, 1, 1, 1)
_DC = (-1, -1, 0, 1, 1, 1, 0, -1)


def im2col(xp, kh, kw, stride):
    n, c, hp, wp = xp.shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    win = win[:, :, :ho, :wo]
    # (n, c, ho, wo, kh, kw) -> (n, c, kh, kw, ho, wo)
    return np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(n, c * kh * kw, ho * wo)


def col2im(cols, c, hp, wp, kh, kw, stride):
    n = cols.shape[0]
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    cols = cols.reshape(n, c, kh, kw, ho, wo)
    out = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[:, :, i, j]
    return out


def moore_trace(img):
    h, w = img.shape
    nz = np.flatnonzero(img)
    if nz.size == 0:
        return np.empty((0, 2), dtype=np.int64)
    sr, sc = divmod(int(nz[0]), w)

    def fg(r, c):
        return 0 <= r < h and 0 <= c < w and img[r, c] != 0

    pts = [(sr, sc)]
    back = 0
    cr, cc = sr, sc
    second = None
    for _ in range(4 * h * w + 8):
        found = -1
        for k in range(1, 9):
            d = (back + k) % 8
            nr, nc = cr + _DR[d], cc + _DC[d]
            if fg(nr, nc):
                found = d
                break
        if found < 0:
            break
        d = (found + 7) % 8
        tr, tc = cr + _DR[d], cc + _DC[d]
        back = next(k for k in range(8) if nr + _DR[k] == tr and nc + _DC[k] == tc)
        if (cr, cc) == (sr, sc) and second is not None and (nr, nc) == second:
            break
        if second is None:
            second = (nr, nc)
        cr, cc = nr, nc
        pts.append((cr, cc))
    if len(pts) > 1 and pts[-1] == pts[0]:
        pts.pop()
    return np.asarray(pts, dtype=np.int64)


def fill_polygon(vx, vy, height, width, edge_tol):
    vx = np.asarray(vx, dtype=np.float64)
    vy = np.asarray(vy, dtype=np.float64)
    out = np.zeros((height, width), dtype=np.uint8)
    if vx.size < 3:
        return out
    x0, y0 = vx, vy
    x1, y1 = np.roll(vx, -1), np.roll(vy, -1)
    cols = np.arange(width, dtype=np.float64)
    for r in range(height):
        y = float(r)
        hit = ((y0 <= y) & (y < y1)) | ((y1 <= y) & (y < y0))
        if hit.sum() < 2:
            continue
        xs = np.sort(x0[hit] + (y - y0[hit]) * (x1[hit] - x0[hit]) / (y1[hit] - y0[hit]))
        for a, b in zip(xs[0::2], xs[1::2]):
            out[r, (cols >= a) & (cols <= b)] = 1
    if edge_tol <= 0:
        return out
    rr, cc = np.mgrid[0:height, 0:width]
    px = cc.ravel().astype(np.float64)[:, None] - x0[None, :]
    py = rr.ravel().astype(np.float64)[:, None] - y0[None, :]
    dx = (x1 - x0)[None, :]
    dy = (y1 - y0)[None, :]
    L2 = dx * dx + dy * dy
    with np.errstate(invalid="ignore", divide="ignore"):
        t = np.where(L2 > 0, (px * dx + py * dy) / np.where(L2 > 0, L2, 1.0), 0.0)
    t = np.clip(t, 0.0, 1.0)
    d2 = (px - t * dx) ** 2 + (py - t * dy) ** 2
    near = (d2 <= edge_tol * edge_tol).any(axis=1).reshape(height, width)
    out[near] = 1
    return out
