"""Pure numpy implementation of the split-search and scoring kernels.

Used when the compiled extension is unavailable (or ``SPIDEFECT_PURE_PYTHON=1``).
Results are bit-identical to the compiled kernels: every running sum is a
sequential left-to-right accumulation (``np.cumsum`` / ``np.bincount``), in the
same order the compiled loops use.
"""
import numpy as np


def node_sums(node_of, g, h, n_nodes):
    active = node_of >= 0
    nd = node_of[active]
    G = np.bincount(nd, weights=g[active], minlength=n_nodes).astype(np.float64)
    H = np.bincount(nd, weights=h[active], minlength=n_nodes).astype(np.float64)
    return G[:n_nodes], H[:n_nodes]


def gather_sorted(order, g, h):
    return g[order], h[order]


def route(node_of, X, split_feature, split_threshold, to_left, to_right):
    idx = np.flatnonzero(node_of >= 0)
    slot = node_of[idx]
    splitting = split_feature[slot] >= 0
    moved = np.full(len(idx), -1, dtype=node_of.dtype)
    rs, ss = idx[splitting], slot[splitting]
    go_left = X[rs, split_feature[ss]] < split_threshold[ss]
    moved[splitting] = np.where(go_left, to_left[ss], to_right[ss])
    node_of[idx] = moved


def _midpoints(a, b):
    m = 0.5 * (a + b)
    return np.where(m <= a, b, m)


def find_splits(order, sorted_vals, sorted_g, sorted_h, node_of, node_g, node_h, feature_mask, lam,
                gamma, min_child_hessian):
    m = len(node_g)
    best_feature = np.full(m, -1, dtype=np.int64)
    best_threshold = np.zeros(m)
    best_gain = np.zeros(m)
    parent = node_g * node_g / (node_h + lam)
    # stable grouping by node keeps ascending-value order inside each node
    for f in range(order.shape[0]):
        if not feature_mask[f]:
            continue
        nd = node_of[order[f]]
        active = nd >= 0
        vals = sorted_vals[f][active]
        fg = sorted_g[f][active]
        fh = sorted_h[f][active]
        nd = nd[active]
        perm = np.argsort(nd, kind="stable")
        vals, fg, fh, nd = vals[perm], fg[perm], fh[perm], nd[perm]
        bounds = np.flatnonzero(np.diff(nd)) + 1
        starts = np.concatenate(([0], bounds))
        ends = np.concatenate((bounds, [len(nd)]))
        for lo, hi in zip(starts, ends):
            if hi - lo < 2:
                continue
            s = nd[lo]
            v = vals[lo:hi]
            cut = np.flatnonzero(v[1:] > v[:-1])
            if len(cut) == 0:
                continue
            a = np.cumsum(fg[lo:hi])[cut]
            b = np.cumsum(fh[lo:hi])[cut]
            gr = node_g[s] - a
            hr = node_h[s] - b
            ok = (b >= min_child_hessian) & (hr >= min_child_hessian)
            if not ok.any():
                continue
            gain = 0.5 * (a * a / (b + lam) + gr * gr / (hr + lam) - parent[s]) - gamma
            gain = np.where(ok, gain, -np.inf)
            j = int(np.argmax(gain))
            if gain[j] > best_gain[s]:
                best_gain[s] = gain[j]
                best_feature[s] = f
                best_threshold[s] = _midpoints(v[cut[j]], v[cut[j] + 1])
    return best_feature, best_threshold, best_gain


def predict_sum(X, feature, threshold, left, right, value, roots):
    n = X.shape[0]
    acc = np.zeros(n)
    rows = np.arange(n)
    for root in roots:
        node = np.full(n, root, dtype=np.int64)
        live = feature[node] >= 0
        while live.any():
            idx = rows[live]
            cur = node[idx]
            go_left = X[idx, feature[cur]] < threshold[cur]
            node[idx] = np.where(go_left, left[cur], right[cur])
            live[idx] = feature[node[idx]] >= 0
        acc += value[node]
    return acc
