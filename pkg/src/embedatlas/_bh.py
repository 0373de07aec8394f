"""Numba kernels for Barnes-Hut gradient evaluation.

The quadtree is stored as flat arrays: node 0 is the root, children are
created after their parents, so a reverse-order sweep visits children first.
Leaves are coincident-point bundles (position + count). All loops are
sequential so results are deterministic for fixed inputs.
"""

from __future__ import annotations

import numba
import numpy as np

MAX_DEPTH = 48


@numba.njit(cache=True)
def build_quadtree_arrays(points: np.ndarray, max_depth: int):
    n = points.shape[0]

    min_x = points[0, 0]
    max_x = points[0, 0]
    min_y = points[0, 1]
    max_y = points[0, 1]
    for i in range(n):
        x = points[i, 0]
        y = points[i, 1]
        if x < min_x:
            min_x = x
        if x > max_x:
            max_x = x
        if y < min_y:
            min_y = y
        if y > max_y:
            max_y = y
    span = max(max_x - min_x, max_y - min_y)
    root_half = span * 0.5 * (1.0 + 1e-9)
    if root_half == 0.0:
        root_half = 0.5
    root_cx = (min_x + max_x) * 0.5
    root_cy = (min_y + max_y) * 0.5

    cap = 4 * n + 64
    center_x = np.empty(cap, np.float64)
    center_y = np.empty(cap, np.float64)
    half = np.empty(cap, np.float64)
    children = np.full((cap, 4), -1, np.int64)
    is_leaf = np.zeros(cap, np.uint8)
    count = np.zeros(cap, np.int64)
    com_x = np.zeros(cap, np.float64)
    com_y = np.zeros(cap, np.float64)

    center_x[0] = root_cx
    center_y[0] = root_cy
    half[0] = root_half
    is_leaf[0] = 1
    count[0] = 1
    com_x[0] = points[0, 0]
    com_y[0] = points[0, 1]
    n_nodes = 1

    for i in range(1, n):
        px = points[i, 0]
        py = points[i, 1]
        node = 0
        depth = 0
        while True:
            if n_nodes + 2 > cap:
                new_cap = cap * 2
                center_x = _grow_f64(center_x, new_cap)
                center_y = _grow_f64(center_y, new_cap)
                half = _grow_f64(half, new_cap)
                children = _grow_children(children, new_cap)
                is_leaf = _grow_u8(is_leaf, new_cap)
                count = _grow_i64(count, new_cap)
                com_x = _grow_f64(com_x, new_cap)
                com_y = _grow_f64(com_y, new_cap)
                cap = new_cap
            if is_leaf[node] == 1:
                if (com_x[node] == px and com_y[node] == py) or depth >= max_depth:
                    count[node] += 1
                    break
                # push the resident bundle into a child, node becomes internal
                bx = com_x[node]
                by = com_y[node]
                bc = count[node]
                is_leaf[node] = 0
                count[node] = 0
                q = 0
                if bx >= center_x[node]:
                    q += 1
                if by >= center_y[node]:
                    q += 2
                child = n_nodes
                n_nodes += 1
                ch_half = half[node] * 0.5
                center_x[child] = center_x[node] + (ch_half if (q & 1) != 0 else -ch_half)
                center_y[child] = center_y[node] + (ch_half if (q & 2) != 0 else -ch_half)
                half[child] = ch_half
                is_leaf[child] = 1
                count[child] = bc
                com_x[child] = bx
                com_y[child] = by
                children[node, q] = child
                continue
            q = 0
            if px >= center_x[node]:
                q += 1
            if py >= center_y[node]:
                q += 2
            nxt = children[node, q]
            if nxt == -1:
                child = n_nodes
                n_nodes += 1
                ch_half = half[node] * 0.5
                center_x[child] = center_x[node] + (ch_half if (q & 1) != 0 else -ch_half)
                center_y[child] = center_y[node] + (ch_half if (q & 2) != 0 else -ch_half)
                half[child] = ch_half
                is_leaf[child] = 1
                count[child] = 1
                com_x[child] = px
                com_y[child] = py
                children[node, q] = child
                break
            node = nxt
            depth += 1

    # bottom-up: exact counts and centers of mass for internal cells
    for node in range(n_nodes - 1, -1, -1):
        if is_leaf[node] == 1:
            continue
        c = 0
        sx = 0.0
        sy = 0.0
        for q in range(4):
            ch = children[node, q]
            if ch >= 0:
                c += count[ch]
                sx += com_x[ch] * count[ch]
                sy += com_y[ch] * count[ch]
        count[node] = c
        com_x[node] = sx / c
        com_y[node] = sy / c

    return (
        center_x[:n_nodes],
        center_y[:n_nodes],
        half[:n_nodes],
        children[:n_nodes],
        is_leaf[:n_nodes],
        count[:n_nodes],
        com_x[:n_nodes],
        com_y[:n_nodes],
    )


@numba.njit(cache=True)
def _grow_f64(arr, new_cap):
    out = np.empty(new_cap, np.float64)
    out[: arr.shape[0]] = arr
    return out


@numba.njit(cache=True)
def _grow_i64(arr, new_cap):
    out = np.zeros(new_cap, np.int64)
    out[: arr.shape[0]] = arr
    return out


@numba.njit(cache=True)
def _grow_u8(arr, new_cap):
    out = np.zeros(new_cap, np.uint8)
    out[: arr.shape[0]] = arr
    return out


@numba.njit(cache=True)
def _grow_children(arr, new_cap):
    out = np.full((new_cap, 4), -1, np.int64)
    out[: arr.shape[0]] = arr
    return out


@numba.njit(cache=True)
def repulsion_pass(
    points, half, children, is_leaf, count, com_x, com_y, theta
):
    """Per-point repulsive force numerators and the Student-t normalization.

    A cell is summarized as a point mass when side/distance < theta; a bundle
    at distance zero is the point's own and contributes count-1 identity terms
    to the normalization with zero force.
    """
    n = points.shape[0]
    force = np.zeros((n, 2), np.float64)
    z_total = 0.0
    stack = np.empty(4 * MAX_DEPTH + 16, np.int64)
    theta2 = theta * theta
    for i in range(n):
        xi = points[i, 0]
        yi = points[i, 1]
        fx = 0.0
        fy = 0.0
        zi = 0.0
        sp = 1
        stack[0] = 0
        while sp > 0:
            sp -= 1
            node = stack[sp]
            dx = xi - com_x[node]
            dy = yi - com_y[node]
            d2 = dx * dx + dy * dy
            if is_leaf[node] == 1:
                if d2 == 0.0:
                    zi += count[node] - 1
                else:
                    q = 1.0 / (1.0 + d2)
                    cq = count[node] * q
                    zi += cq
                    fx += cq * q * dx
                    fy += cq * q * dy
            else:
                side = 2.0 * half[node]
                if side * side < theta2 * d2:
                    q = 1.0 / (1.0 + d2)
                    cq = count[node] * q
                    zi += cq
                    fx += cq * q * dx
                    fy += cq * q * dy
                else:
                    for c in range(4):
                        ch = children[node, c]
                        if ch >= 0:
                            stack[sp] = ch
                            sp += 1
        force[i, 0] = fx
        force[i, 1] = fy
        z_total += zi
    return force, z_total


@numba.njit(cache=True)
def attraction_pass(points, indptr, indices, data):
    """Attractive force: sum of p_ij * (1 + |y_i - y_j|^2)^-1 * (y_i - y_j)."""
    n = points.shape[0]
    force = np.zeros((n, 2), np.float64)
    for i in range(n):
        xi = points[i, 0]
        yi = points[i, 1]
        for ptr in range(indptr[i], indptr[i + 1]):
            j = indices[ptr]
            dx = xi - points[j, 0]
            dy = yi - points[j, 1]
            pq = data[ptr] / (1.0 + dx * dx + dy * dy)
            force[i, 0] += pq * dx
            force[i, 1] += pq * dy
    return force


@numba.njit(cache=True)
def student_t_total(points):
    """Exact Z = sum over ordered pairs k != l of (1 + |y_k - y_l|^2)^-1."""
    n = points.shape[0]
    total = 0.0
    for i in range(n):
        xi = points[i, 0]
        yi = points[i, 1]
        for j in range(i + 1, n):
            dx = xi - points[j, 0]
            dy = yi - points[j, 1]
            total += 1.0 / (1.0 + dx * dx + dy * dy)
    return 2.0 * total


@numba.njit(cache=True)
def kl_terms(points, indptr, indices, data, z, q_floor):
    """Sum of p log(p/q) over stored nonzero affinities, q floored."""
    n = points.shape[0]
    total = 0.0
    for i in range(n):
        xi = points[i, 0]
        yi = points[i, 1]
        for ptr in range(indptr[i], indptr[i + 1]):
            p = data[ptr]
            if p <= 0.0:
                continue
            j = indices[ptr]
            dx = xi - points[j, 0]
            dy = yi - points[j, 1]
            q = 1.0 / ((1.0 + dx * dx + dy * dy) * z)
            if q < q_floor:
                q = q_floor
            total += p * np.log(p / q)
    return total
