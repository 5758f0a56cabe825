# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot loops: conv patch extraction, Moore tracing, polygon fill."""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, floor, ceil

cnp.import_array()

# Moore neighbourhood, clockwise on screen (rows grow downward), starting west.
cdef int DR[8]
cdef int DC[8]
DR[:] = [0, -1, -1, -1, 0, 1, 1, 1]
DC[:] = [-1, -1, 0, 1, 1, 1, 0, -1]


def im2col(const double[:, :, :, ::1] xp, int kh, int kw, int stride):
    cdef Py_ssize_t n = xp.shape[0], c = xp.shape[1]
    cdef Py_ssize_t hp = xp.shape[2], wp = xp.shape[3]
    cdef Py_ssize_t ho = (hp - kh) // stride + 1, wo = (wp - kw) // stride + 1
    out_arr = np.empty((n, c * kh * kw, ho * wo), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    cdef Py_ssize_t b, ch, i, j, oy, ox, row, col
    for b in range(n):
        for ch in range(c):
            for i in range(kh):
                for j in range(kw):
                    row = (ch * kh + i) * kw + j
                    for oy in range(ho):
                        col = oy * wo
                        for ox in range(wo):
                            out[b, row, col + ox] = xp[b, ch, oy * stride + i, ox * stride + j]
    return out_arr


def col2im(const double[:, :, ::1] cols, int c, int hp, int wp, int kh, int kw, int stride):
    cdef Py_ssize_t n = cols.shape[0]
    cdef Py_ssize_t ho = (hp - kh) // stride + 1, wo = (wp - kw) // stride + 1
    out_arr = np.zeros((n, c, hp, wp), dtype=np.float64)
    cdef double[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, ch, i, j, oy, ox, row, col
    for b in range(n):
        for ch in range(c):
            for i in range(kh):
                for j in range(kw):
                    row = (ch * kh + i) * kw + j
                    for oy in range(ho):
                        col = oy * wo
                        for ox in range(wo):
                            out[b, ch, oy * stride + i, ox * stride + j] += cols[b, row, col + ox]
    return out_arr


cdef inline bint _fg(const unsigned char[:, ::1] img, Py_ssize_t r, Py_ssize_t c):
    if r < 0 or c < 0 or r >= img.shape[0] or c >= img.shape[1]:
        return 0
    return img[r, c] != 0


def moore_trace(const unsigned char[:, ::1] img):
    cdef Py_ssize_t h = img.shape[0], w = img.shape[1]
    cdef Py_ssize_t r, c, sr = -1, sc = -1
    for r in range(h):
        for c in range(w):
            if img[r, c]:
                sr = r
                sc = c
                break
        if sr >= 0:
            break
    if sr < 0:
        return np.empty((0, 2), dtype=np.int64)

    pts = [(sr, sc)]
    cdef int back = 0  # entered from the west
    cdef int k, d, found
    cdef Py_ssize_t cr = sr, cc = sc, nr, nc
    cdef Py_ssize_t second_r = -1, second_c = -1
    cdef Py_ssize_t limit = 4 * h * w + 8
    cdef Py_ssize_t steps = 0
    while steps < limit:
        steps += 1
        found = -1
        for k in range(1, 9):
            d = (back + k) % 8
            nr = cr + DR[d]
            nc = cc + DC[d]
            if _fg(img, nr, nc):
                found = d
                break
        if found < 0:
            break  # isolated pixel
        # backtrack = neighbour examined just before the hit, expressed from the new pixel
        d = (found + 7) % 8
        back = _dir_from(nr, nc, cr + DR[d], cc + DC[d])
        if cr == sr and cc == sc and second_r >= 0 and nr == second_r and nc == second_c:
            break
        if second_r < 0:
            second_r = nr
            second_c = nc
        cr = nr
        cc = nc
        pts.append((cr, cc))
    if len(pts) > 1 and pts[len(pts) - 1] == pts[0]:
        pts.pop()
    return np.asarray(pts, dtype=np.int64)


cdef inline int _dir_from(Py_ssize_t r, Py_ssize_t c, Py_ssize_t tr, Py_ssize_t tc):
    cdef int k
    for k in range(8):
        if r + DR[k] == tr and c + DC[k] == tc:
            return k
    return 0


def fill_polygon(const double[::1] vx, const double[::1] vy, int height, int width, double edge_tol):
    cdef Py_ssize_t n = vx.shape[0]
    out_arr = np.zeros((height, width), dtype=np.uint8)
    cdef unsigned char[:, ::1] out = out_arr
    if n < 3:
        return out_arr
    xs_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] xs = xs_arr
    cdef Py_ssize_t r, i, j, m, c, c0, c1, r0, r1
    cdef double y, x0, y0, x1, y1, t, dx, dy, L2, px, py, dist2, tol2 = edge_tol * edge_tol
    # even-odd scanline fill at pixel centres
    for r in range(height):
        y = <double>r
        m = 0
        for i in range(n):
            j = (i + 1) % n
            y0 = vy[i]
            y1 = vy[j]
            if (y0 <= y < y1) or (y1 <= y < y0):
                xs[m] = vx[i] + (y - y0) * (vx[j] - vx[i]) / (y1 - y0)
                m += 1
        if m < 2:
            continue
        xs_arr[:m].sort()
        for i in range(0, m - 1, 2):
            c0 = <Py_ssize_t>ceil(xs[i])
            c1 = <Py_ssize_t>floor(xs[i + 1])
            if c0 < 0:
                c0 = 0
            if c1 > width - 1:
                c1 = width - 1
            for c in range(c0, c1 + 1):
                out[r, c] = 1
    if edge_tol <= 0:
        return out_arr
    # pixels whose centre lies within edge_tol of an edge
    for i in range(n):
        j = (i + 1) % n
        x0 = vx[i]
        y0 = vy[i]
        x1 = vx[j]
        y1 = vy[j]
        dx = x1 - x0
        dy = y1 - y0
        L2 = dx * dx + dy * dy
        r0 = <Py_ssize_t>floor(min(y0, y1) - edge_tol)
        r1 = <Py_ssize_t>ceil(max(y0, y1) + edge_tol)
        c0 = <Py_ssize_t>floor(min(x0, x1) - edge_tol)
        c1 = <Py_ssize_t>ceil(max(x0, x1) + edge_tol)
        if r0 < 0:
            r0 = 0
        if c0 < 0:
            c0 = 0
        if r1 > height - 1:
            r1 = height - 1
        if c1 > width - 1:
            c1 = width - 1
        for r in range(r0, r1 + 1):
            for c in range(c0, c1 + 1):
                if out[r, c]:
                    continue
                px = <double>c - x0
                py = <double>r - y0
                if L2 > 0:
                    t = (px * dx + py * dy) / L2
                    if t < 0:
                        t = 0
                    elif t > 1:
                        t = 1
                else:
                    t = 0
                px = px - t * dx
                py = py - t * dy
                dist2 = px * px + py * py
                if dist2 <= tol2:
                    out[r, c] = 1
    return out_arr
