"""Compiled inner loops.

All kernels work on the neighbour table ``nbr`` of shape ``(n, 2d)`` with
``-1`` marking an ordinary edge to the sink.  Tree parent labels use ``-1``
for the special edge.  Height arrays may be float64 (continuous model) or
int64 (rational mode); the kernels are generic over that dtype.
"""

from __future__ import annotations

import numpy as np
from numba import njit

STATUS_OK = 0
STATUS_OVERFLOW = 1
STATUS_WALK_LIMIT = 2
STATUS_BAD_TREE = 3


@njit(cache=True)
def stabilize_fifo(h, nbr, diag, off, counts, limit):
    """Legal topplings from a FIFO queue until every site is below ``diag``.

    A dequeued site is toppled ``h // diag`` times at once, which is a legal
    sequence.  Returns ``(topplings, boundary_outflow_edges, status)``;
    outflow counts ordinary edge crossings to the sink (each carrying ``off``).
    """
    n = h.shape[0]
    ndir = nbr.shape[1]
    queue = np.empty(n, np.int64)
    inq = np.zeros(n, np.bool_)
    head = 0
    size = 0
    for i in range(n):
        if h[i] >= diag:
            queue[(head + size) % n] = i
            size += 1
            inq[i] = True
    steps = 0
    outflow = 0
    while size > 0:
        x = queue[head]
        head = (head + 1) % n
        size -= 1
        inq[x] = False
        k = np.int64(h[x] // diag)
        while k > 0 and h[x] - k * diag < 0:
            k -= 1
        if k == 0:
            k = 1
        h[x] -= k * diag
        counts[x] += k
        steps += k
        add = k * off
        for j in range(ndir):
            y = nbr[x, j]
            if y < 0:
                outflow += k
            else:
                if h[y] > limit - add:
                    return steps, outflow, STATUS_OVERFLOW
                h[y] += add
                if h[y] >= diag and not inq[y]:
                    queue[(head + size) % n] = y
                    size += 1
                    inq[y] = True
        if h[x] >= diag and not inq[x]:
            queue[(head + size) % n] = x
            size += 1
            inq[x] = True
    return steps, outflow, STATUS_OK


@njit(cache=True)
def burn(xi, nbr, t):
    """Burning recursion from ``W_0 = Lambda``; fills burn times (0 = unburnt).

    The sink has time 1, the first burnt sites time 2.  Returns whether
    every site burnt.
    """
    n = xi.shape[0]
    ndir = nbr.shape[1]
    inw = np.ones(n, np.bool_)
    removed = np.empty(n, np.int64)
    for i in range(n):
        t[i] = 0
    remaining = n
    time = 2
    while remaining > 0:
        m = 0
        for y in range(n):
            if inw[y]:
                thr = 0
                for k in range(ndir):
                    z = nbr[y, k]
                    if z >= 0 and inw[z]:
                        thr += 1
                if xi[y] >= thr:
                    removed[m] = y
                    m += 1
        if m == 0:
            break
        for i in range(m):
            inw[removed[i]] = False
            t[removed[i]] = time
        remaining -= m
        time += 1
    return remaining == 0


@njit(cache=True)
def config_to_labels(xi, t, nbr, labels):
    """Tree parent labels for an allowed configuration with burn times ``t``."""
    n = xi.shape[0]
    ndir = nbr.shape[1]
    for y in range(n):
        if xi[y] == ndir:
            labels[y] = -1
            continue
        ty = t[y]
        earlier = 0
        for k in range(ndir):
            z = nbr[y, k]
            tz = 1 if z < 0 else t[z]
            if tz < ty:
                earlier += 1
        j = xi[y] - (ndir - earlier)
        chosen = -1
        for k in range(ndir):
            z = nbr[y, k]
            tz = 1 if z < 0 else t[z]
            if tz == ty - 1:
                if j == 0:
                    chosen = k
                    break
                j -= 1
        if chosen < 0:
            return False
        labels[y] = chosen
    return True


@njit(cache=True)
def tree_depths(labels, nbr, depth):
    """Distance to the sink along parent edges, sink = 1.  False on a cycle."""
    n = labels.shape[0]
    stack = np.empty(n, np.int64)
    for i in range(n):
        depth[i] = 0
    for s in range(n):
        if depth[s] > 0:
            continue
        top = 0
        v = s
        base = 1
        while True:
            if depth[v] == -1:
                return False
            if depth[v] > 0:
                base = depth[v]
                break
            depth[v] = -1
            stack[top] = v
            top += 1
            k = labels[v]
            if k < 0:
                base = 1
                break
            u = nbr[v, k]
            if u < 0:
                base = 1
                break
            v = u
        while top > 0:
            top -= 1
            base += 1
            depth[stack[top]] = base
    return True


@njit(cache=True)
def labels_to_config(labels, nbr, xi, depth):
    """Inverse bijection.  Returns False if ``labels`` is not a tree."""
    if not tree_depths(labels, nbr, depth):
        return False
    n = labels.shape[0]
    ndir = nbr.shape[1]
    for y in range(n):
        lab = labels[y]
        if lab < 0:
            xi[y] = ndir
            continue
        ty = depth[y]
        earlier = 0
        rank = 0
        for k in range(ndir):
            z = nbr[y, k]
            tz = 1 if z < 0 else depth[z]
            if tz < ty:
                earlier += 1
            if tz == ty - 1 and k < lab:
                rank += 1
        xi[y] = ndir - earlier + rank
    return True


@njit(cache=True)
def wilson(nbr, gamma, order, rng, labels, intree, max_steps):
    """Wilson's algorithm with the last-exit (cycle popping) formulation.

    ``labels[v]`` is overwritten on every visit, so the retraced path is the
    chronological loop erasure of the walk.  Returns the total number of
    walk steps, or ``-1`` if one walk exceeds ``max_steps``.
    """
    n = nbr.shape[0]
    ndir = nbr.shape[1]
    total = ndir + gamma
    for i in range(n):
        intree[i] = False
    steps = 0
    for idx in range(order.shape[0]):
        start = order[idx]
        u = start
        walk = 0
        while u >= 0 and not intree[u]:
            r = rng.random() * total
            if r < ndir:
                k = int(r)
                if k >= ndir:
                    k = ndir - 1
                labels[u] = k
                u = nbr[u, k]
            else:
                labels[u] = -1
                u = -1
            walk += 1
            if walk > max_steps:
                return -1
        steps += walk
        u = start
        while u >= 0 and not intree[u]:
            intree[u] = True
            k = labels[u]
            u = -1 if k < 0 else nbr[u, k]
    return steps


@njit(cache=True, nogil=True)
def wilson_batch(nbr, gamma, order, rng, out, max_steps):
    """Fill ``out[s]`` with parent labels of independent trees."""
    n = nbr.shape[0]
    labels = np.empty(n, np.int64)
    intree = np.empty(n, np.bool_)
    for s in range(out.shape[0]):
        if wilson(nbr, gamma, order, rng, labels, intree, max_steps) < 0:
            return STATUS_WALK_LIMIT
        for i in range(n):
            out[s, i] = labels[i]
    return STATUS_OK


@njit(cache=True, nogil=True)
def nu_batch(nbr, gamma, order, rng, out, max_steps):
    """Discrete configurations from Wilson trees through the inverse bijection."""
    n = nbr.shape[0]
    labels = np.empty(n, np.int64)
    intree = np.empty(n, np.bool_)
    depth = np.empty(n, np.int64)
    xi = np.empty(n, np.int64)
    for s in range(out.shape[0]):
        if wilson(nbr, gamma, order, rng, labels, intree, max_steps) < 0:
            return STATUS_WALK_LIMIT
        labels_to_config(labels, nbr, xi, depth)
        for i in range(n):
            out[s, i] = xi[i]
    return STATUS_OK


@njit(cache=True)
def fill_cells(xi, ndir, gamma, rng, eta):
    """Uniform heights inside the cell of ``xi``."""
    for i in range(xi.shape[0]):
        if xi[i] == ndir:
            eta[i] = ndir + gamma * rng.random()
        else:
            eta[i] = xi[i] + rng.random()


@njit(cache=True, nogil=True)
def m_batch(nbr, gamma, order, rng, out, max_steps):
    n = nbr.shape[0]
    ndir = nbr.shape[1]
    labels = np.empty(n, np.int64)
    intree = np.empty(n, np.bool_)
    depth = np.empty(n, np.int64)
    xi = np.empty(n, np.int64)
    eta = np.empty(n, np.float64)
    for s in range(out.shape[0]):
        if wilson(nbr, gamma, order, rng, labels, intree, max_steps) < 0:
            return STATUS_WALK_LIMIT
        labels_to_config(labels, nbr, xi, depth)
        fill_cells(xi, ndir, gamma, rng, eta)
        for i in range(n):
            out[s, i] = eta[i]
    return STATUS_OK


@njit(cache=True, nogil=True)
def special_pair_counts(nbr, gamma, order, rng, count, partner, site_hits, pair_hits, max_steps):
    """Accumulate maximal-height indicator statistics over ``count`` trees.

    ``partner[o, x]`` is the second site of pair ``(x, x + offset_o)`` or -1
    if that pair is not tracked.  ``site_hits[x]`` counts samples with a
    special edge at ``x``; ``pair_hits[o, x]`` counts joint occurrences.
    """
    n = nbr.shape[0]
    n_off = partner.shape[0]
    labels = np.empty(n, np.int64)
    intree = np.empty(n, np.bool_)
    special = np.empty(n, np.int64)
    for s in range(count):
        if wilson(nbr, gamma, order, rng, labels, intree, max_steps) < 0:
            return STATUS_WALK_LIMIT
        m = 0
        for i in range(n):
            if labels[i] < 0:
                special[m] = i
                m += 1
                site_hits[i] += 1
        for a in range(m):
            x = special[a]
            for o in range(n_off):
                y = partner[o, x]
                if y >= 0 and labels[y] < 0:
                    pair_hits[o, x] += 1
    return STATUS_OK


@njit(cache=True)
def dhar_accumulate(nbr, gamma, order, rng, count, sources, total, total_sq, hits, max_steps):
    """Toppling-number statistics of single additions under the stationary law.

    For each sample and each ``sources[a]``, a unit is added to a fresh copy
    of the same configuration; ``total[a, y]`` sums topplings at ``y``,
    ``hits[a, y]`` counts samples where ``y`` toppled at all.
    """
    n = nbr.shape[0]
    ndir = nbr.shape[1]
    diag = ndir + gamma
    labels = np.empty(n, np.int64)
    intree = np.empty(n, np.bool_)
    depth = np.empty(n, np.int64)
    xi = np.empty(n, np.int64)
    eta = np.empty(n, np.float64)
    h = np.empty(n, np.float64)
    counts = np.empty(n, np.int64)
    for s in range(count):
        if wilson(nbr, gamma, order, rng, labels, intree, max_steps) < 0:
            return STATUS_WALK_LIMIT
        labels_to_config(labels, nbr, xi, depth)
        fill_cells(xi, ndir, gamma, rng, eta)
        for a in range(sources.shape[0]):
            x = sources[a]
            for i in range(n):
                h[i] = eta[i]
                counts[i] = 0
            h[x] += 1.0
            stabilize_fifo(h, nbr, diag, 1.0, counts, np.inf)
            for y in range(n):
                c = counts[y]
                if c > 0:
                    total[a, y] += c
                    total_sq[a, y] += c * c
                    hits[a, y] += 1
    return STATUS_OK


@njit(cache=True)
def evolve_batch(h0, nbr, gamma, cum_rates, t_max, rng, out):
    """Event-driven dynamics for each row of ``h0`` up to time ``t_max``.

    Exponential waiting times with total rate ``cum_rates[-1]``; the site is
    chosen by inverting the cumulative rate table.  Returns the number of
    additions performed across all replicas.
    """
    n = nbr.shape[0]
    diag = nbr.shape[1] + gamma
    total_rate = cum_rates[n - 1]
    counts = np.zeros(n, np.int64)
    h = np.empty(n, np.float64)
    events = 0
    for r in range(h0.shape[0]):
        for i in range(n):
            h[i] = h0[r, i]
        t = 0.0
        while True:
            t += -np.log(1.0 - rng.random()) / total_rate
            if t > t_max:
                break
            u = rng.random() * total_rate
            x = np.searchsorted(cum_rates, u, side="right")
            if x >= n:
                x = n - 1
            h[x] += 1.0
            stabilize_fifo(h, nbr, diag, 1.0, counts, np.inf)
            events += 1
        for i in range(n):
            out[r, i] = h[i]
    return events


@njit(cache=True)
def count_trees(nbr, gamma, weights_out):
    """Exhaustive enumeration of parent-label assignments that form trees.

    ``weights_out[j]`` receives the number of trees with ``j`` special edges.
    Independent of the bijection; used as the spanning-tree oracle.
    """
    n = nbr.shape[0]
    ndir = nbr.shape[1]
    base = ndir + 1
    labels = np.full(n, -1, np.int64)
    depth = np.empty(n, np.int64)
    while True:
        if tree_depths(labels, nbr, depth):
            j = 0
            for i in range(n):
                if labels[i] < 0:
                    j += 1
            weights_out[j] += 1
        # odometer over labels in {-1, 0, ..., ndir-1}
        i = 0
        while i < n:
            labels[i] += 1
            if labels[i] < ndir:
                break
            labels[i] = -1
            i += 1
        if i == n:
            break
    return base


@njit(cache=True)
def allowed_rows(nbr, fill, out):
    """Lexicographic scan of ``{0..2d}^n`` keeping allowed configurations.

    With ``fill=False`` only counts; otherwise writes rows into ``out``.
    """
    n = nbr.shape[0]
    top = nbr.shape[1]
    xi = np.zeros(n, np.int64)
    t = np.empty(n, np.int64)
    m = 0
    while True:
        if burn(xi, nbr, t):
            if fill:
                for i in range(n):
                    out[m, i] = xi[i]
            m += 1
        i = n - 1
        while i >= 0:
            xi[i] += 1
            if xi[i] <= top:
                break
            xi[i] = 0
            i -= 1
        if i < 0:
            break
    return m


@njit(cache=True)
def dhar_exact(nbr, n_q, k_q, total):
    """Exact mean toppling numbers in rational mode (``gamma = k_q / n_q``).

    Scans every integer configuration below the threshold ``2d n + k``; a
    configuration is recurrent iff ``v // n`` passes the burning test.  For
    each recurrent ``v`` and source ``x``, ``n`` quanta are added at ``x``
    and ``total[x, y]`` accumulates the topplings at ``y``.  Returns the
    number of recurrent configurations.
    """
    n = nbr.shape[0]
    thr = nbr.shape[1] * n_q + k_q
    v = np.zeros(n, np.int64)
    q = np.empty(n, np.int64)
    t = np.empty(n, np.int64)
    h = np.empty(n, np.int64)
    counts = np.empty(n, np.int64)
    limit = np.iinfo(np.int64).max
    m = 0
    while True:
        for i in range(n):
            q[i] = v[i] // n_q
        if burn(q, nbr, t):
            m += 1
            for x in range(n):
                for i in range(n):
                    h[i] = v[i]
                    counts[i] = 0
                h[x] += n_q
                stabilize_fifo(h, nbr, thr, n_q, counts, limit)
                for y in range(n):
                    total[x, y] += counts[y]
        i = n - 1
        while i >= 0:
            v[i] += 1
            if v[i] < thr:
                break
            v[i] = 0
            i -= 1
        if i < 0:
            break
    return m


@njit(cache=True)
def tree_rows(nbr, fill, out):
    """Parent-label vectors in ``{-1..2d-1}^n`` that form trees (odometer order)."""
    n = nbr.shape[0]
    ndir = nbr.shape[1]
    labels = np.full(n, -1, np.int64)
    depth = np.empty(n, np.int64)
    m = 0
    while True:
        if tree_depths(labels, nbr, depth):
            if fill:
                for i in range(n):
                    out[m, i] = labels[i]
            m += 1
        i = 0
        while i < n:
            labels[i] += 1
            if labels[i] < ndir:
                break
            labels[i] = -1
            i += 1
        if i == n:
            break
    return m


@njit(cache=True)
def configs_to_labels(rows, nbr, out):
    """Row-wise forward bijection; returns the number of rows that failed."""
    n = rows.shape[1]
    t = np.empty(n, np.int64)
    lab = np.empty(n, np.int64)
    bad = 0
    for r in range(rows.shape[0]):
        if not burn(rows[r], nbr, t) or not config_to_labels(rows[r], t, nbr, lab):
            bad += 1
            continue
        for i in range(n):
            out[r, i] = lab[i]
    return bad


@njit(cache=True)
def labels_to_configs(rows, nbr, out):
    """Row-wise inverse bijection; returns the number of rows that failed."""
    n = rows.shape[1]
    xi = np.empty(n, np.int64)
    depth = np.empty(n, np.int64)
    bad = 0
    for r in range(rows.shape[0]):
        if not labels_to_config(rows[r], nbr, xi, depth):
            bad += 1
            continue
        for i in range(n):
            out[r, i] = xi[i]
    return bad
