"""Compiled kernels for binary-label CART on flat node arrays.

Node arrays: ``feature`` (-1 marks a leaf), ``threshold``, ``left``, ``right``,
``n_samples`` and ``n_pos`` (training counts reaching the node).  Children are
always created after their parent, so a descending id sweep is a valid
post-order.
"""

import numpy as np
from numba import njit

_TOL = 1e-12


@njit(cache=True)
def _node_cost(pos, n):
    # n * gini(node)
    if n == 0:
        return 0.0
    return 2.0 * pos * (n - pos) / n


@njit(cache=True)
def build(X, y, min_samples_leaf, max_depth, feat_keys, n_feat_considered):
    n, P = X.shape
    cap = 2 * n + 1
    feature = np.full(cap, -1, dtype=np.int64)
    threshold = np.zeros(cap)
    left = np.full(cap, -1, dtype=np.int64)
    right = np.full(cap, -1, dtype=np.int64)
    n_samples = np.zeros(cap, dtype=np.int64)
    n_pos = np.zeros(cap, dtype=np.int64)

    samples = np.arange(n)
    buf = np.empty(n, dtype=np.int64)
    vals = np.empty(n)
    labs = np.empty(n, dtype=np.int64)

    # stack entries: node id, start, end, depth
    stack = np.empty((cap, 4), dtype=np.int64)
    sp = 0
    stack[0, 0] = 0
    stack[0, 1] = 0
    stack[0, 2] = n
    stack[0, 3] = 0
    sp = 1
    n_nodes = 1
    n_internal = 0

    while sp > 0:
        sp -= 1
        node = stack[sp, 0]
        start = stack[sp, 1]
        end = stack[sp, 2]
        depth = stack[sp, 3]
        m = end - start
        pos = 0
        for i in range(start, end):
            pos += y[samples[i]]
        n_samples[node] = m
        n_pos[node] = pos

        if pos == 0 or pos == m:
            continue
        if m < 2 * min_samples_leaf:
            continue
        if max_depth >= 0 and depth >= max_depth:
            continue

        parent_cost = _node_cost(pos, m)
        best_cost = np.inf
        best_f = -1
        best_thr = 0.0

        if n_feat_considered < P:
            order = np.argsort(feat_keys[n_internal % feat_keys.shape[0]])
            chosen = np.sort(order[:n_feat_considered])
        else:
            chosen = np.arange(P)

        for fi in range(chosen.shape[0]):
            f = chosen[fi]
            for i in range(m):
                vals[i] = X[samples[start + i], f]
            perm = np.argsort(vals[:m], kind="mergesort")
            for i in range(m):
                labs[i] = y[samples[start + perm[i]]]
            pl = 0
            for i in range(m - 1):
                pl += labs[i]
                nl = i + 1
                nr = m - nl
                a = vals[perm[i]]
                b = vals[perm[i + 1]]
                if not (a < b):
                    continue
                if nl < min_samples_leaf or nr < min_samples_leaf:
                    continue
                cost = _node_cost(pl, nl) + _node_cost(pos - pl, nr)
                if cost < best_cost - _TOL:
                    best_cost = cost
                    best_f = f
                    thr = 0.5 * (a + b)
                    if thr >= b:
                        thr = a
                    best_thr = thr

        if best_f < 0 or not (best_cost < parent_cost - _TOL):
            continue

        # stable partition of the node's samples
        nl = 0
        for i in range(start, end):
            s = samples[i]
            if X[s, best_f] <= best_thr:
                buf[nl] = s
                nl += 1
        k = nl
        for i in range(start, end):
            s = samples[i]
            if not (X[s, best_f] <= best_thr):
                buf[k] = s
                k += 1
        for i in range(m):
            samples[start + i] = buf[i]

        feature[node] = best_f
        threshold[node] = best_thr
        lid = n_nodes
        rid = n_nodes + 1
        n_nodes += 2
        n_internal += 1
        left[node] = lid
        right[node] = rid
        # right pushed first so the left subtree is expanded first
        stack[sp, 0] = rid
        stack[sp, 1] = start + nl
        stack[sp, 2] = end
        stack[sp, 3] = depth + 1
        sp += 1
        stack[sp, 0] = lid
        stack[sp, 1] = start
        stack[sp, 2] = start + nl
        stack[sp, 3] = depth + 1
        sp += 1

    return (
        feature[:n_nodes].copy(),
        threshold[:n_nodes].copy(),
        left[:n_nodes].copy(),
        right[:n_nodes].copy(),
        n_samples[:n_nodes].copy(),
        n_pos[:n_nodes].copy(),
    )


@njit(cache=True)
def leaf_of(feature, threshold, left, right, X):
    n = X.shape[0]
    out = np.empty(n, dtype=np.int64)
    depth = np.empty(n, dtype=np.int64)
    for i in range(n):
        node = 0
        d = 0
        while feature[node] >= 0:
            if X[i, feature[node]] <= threshold[node]:
                node = left[node]
            else:
                node = right[node]
            d += 1
        out[i] = node
        depth[i] = d
    return out, depth


@njit(cache=True)
def prune(feature, threshold, left, right, n_samples, n_pos, X_val, y_val):
    """Reduced-error pruning; returns a new (uncompacted) feature array."""
    n_nodes = feature.shape[0]
    feat = feature.copy()
    val_n = np.zeros(n_nodes, dtype=np.int64)
    val_pos = np.zeros(n_nodes, dtype=np.int64)
    for i in range(X_val.shape[0]):
        node = 0
        while True:
            val_n[node] += 1
            val_pos[node] += y_val[i]
            if feat[node] < 0:
                break
            if X_val[i, feat[node]] <= threshold[node]:
                node = left[node]
            else:
                node = right[node]

    leaf_err = np.empty(n_nodes, dtype=np.int64)
    for k in range(n_nodes):
        if 2 * n_pos[k] > n_samples[k]:
            leaf_err[k] = val_n[k] - val_pos[k]
        else:
            leaf_err[k] = val_pos[k]

    while True:
        pruned = 0
        sub_err = leaf_err.copy()
        for k in range(n_nodes - 1, -1, -1):
            if feat[k] < 0:
                continue
            sub_err[k] = sub_err[left[k]] + sub_err[right[k]]
            if leaf_err[k] <= sub_err[k]:
                feat[k] = -1
                sub_err[k] = leaf_err[k]
                pruned += 1
        if pruned == 0:
            break
    return feat


@njit(cache=True)
def compact(feature, threshold, left, right, n_samples, n_pos):
    """Renumber reachable nodes in pre-order (root, left subtree, right subtree)."""
    n_nodes = feature.shape[0]
    new_id = np.full(n_nodes, -1, dtype=np.int64)
    order = np.empty(n_nodes, dtype=np.int64)
    stack = np.empty(n_nodes + 1, dtype=np.int64)
    stack[0] = 0
    sp = 1
    k = 0
    while sp > 0:
        sp -= 1
        node = stack[sp]
        new_id[node] = k
        order[k] = node
        k += 1
        if feature[node] >= 0:
            stack[sp] = right[node]
            sp += 1
            stack[sp] = left[node]
            sp += 1
    f2 = np.empty(k, dtype=np.int64)
    t2 = np.empty(k)
    l2 = np.full(k, -1, dtype=np.int64)
    r2 = np.full(k, -1, dtype=np.int64)
    ns2 = np.empty(k, dtype=np.int64)
    np2 = np.empty(k, dtype=np.int64)
    for j in range(k):
        old = order[j]
        f2[j] = feature[old]
        ns2[j] = n_samples[old]
        np2[j] = n_pos[old]
        if feature[old] >= 0:
            t2[j] = threshold[old]
            l2[j] = new_id[left[old]]
            r2[j] = new_id[right[old]]
        else:
            t2[j] = 0.0
    return f2, t2, l2, r2, ns2, np2
