"""Inner loops of the sampling tree.

Two interchangeable backends are kept side by side:

* numba ``@njit`` scalar loops (default when numba imports cleanly), and
* pure numpy code vectorised across samples.

Set ``RFSOFTMAX_DISABLE_NUMBA=1`` before import to force the numpy path.
Both backends consume the same pre-drawn uniforms, so for a given seed they
return identical samples (up to floating point ties in the dot products).

Tree layout (shared by both backends): ``node_sums`` has shape ``(2 * cap, F)``
with the root at row 1, children of ``k`` at ``2k`` and ``2k + 1`` and leaf
``i`` at row ``cap + i``.  ``counts[k]`` is the number of real (non-padding)
classes below node ``k``.  The sampling mass of a node is
``max(node_sums[k] @ query, eps * counts[k])``, or 0 for an all-padding node.
"""

import os

import numpy as np

try:
    from numba import njit

    NUMBA_AVAILABLE = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    NUMBA_AVAILABLE = False

    def njit(*args, **kwargs):
        if len(args) == 1 and callable(args[0]):
            return args[0]
        return lambda func: func


def _env_disabled():
    return os.environ.get("RFSOFTMAX_DISABLE_NUMBA", "").strip().lower() in {"1", "true", "yes", "on"}


USE_NUMBA = NUMBA_AVAILABLE and not _env_disabled()
BACKEND = "numba" if USE_NUMBA else "numpy"


# ---------------------------------------------------------------------------
# numba backend
# ---------------------------------------------------------------------------


@njit(cache=True, fastmath=True)
def _node_mass(node_sums, counts, query, eps, node):
    c = counts[node]
    if c == 0:
        return 0.0
    acc = 0.0
    for f in range(query.shape[0]):
        acc += node_sums[node, f] * query[f]
    floor = eps * c
    if acc < floor:
        return floor
    return acc


MEMO_TABLE_SIZE = 4096


@njit(cache=True)
def sample_leaves_numba(node_sums, counts, query, eps, uniforms):
    """Descend once per row of ``uniforms``.

    Returns leaf offsets (-1 on a dead node) and the probability of each
    returned leaf, i.e. the product of the descent ratios taken.

    Samples move down level by level.  On levels with at most
    ``MEMO_TABLE_SIZE`` nodes the child masses of a node are computed once
    and shared by every sample passing through it; for a handful of draws
    per query this removes most of the work near the root.
    """
    k, depth = uniforms.shape
    nodes = np.ones(k, dtype=np.int64)
    probs = np.ones(k)
    dead = np.zeros(k, dtype=np.bool_)
    table = np.full(min(1 << depth, MEMO_TABLE_SIZE), -1, dtype=np.int64)
    slot_offset = np.empty(k, dtype=np.int64)
    slot_ml = np.empty(k)
    slot_mr = np.empty(k)
    for level in range(depth):
        first = 1 << level
        memo = first <= table.shape[0]
        used = 0
        for s in range(k):
            if dead[s]:
                continue
            node = nodes[s]
            left = 2 * node
            slot = table[node - first] if memo else -1
            if slot >= 0:
                ml = slot_ml[slot]
                mr = slot_mr[slot]
            else:
                ml = _node_mass(node_sums, counts, query, eps, left)
                mr = _node_mass(node_sums, counts, query, eps, left + 1)
                if memo:
                    table[node - first] = used
                    slot_offset[used] = node - first
                    slot_ml[used] = ml
                    slot_mr[used] = mr
                    used += 1
            total = ml + mr
            if total <= 0.0:
                dead[s] = True
                continue
            if uniforms[s, level] * total < ml:
                nodes[s] = left
                probs[s] *= ml / total
            else:
                nodes[s] = left + 1
                probs[s] *= mr / total
        for j in range(used):
            table[slot_offset[j]] = -1
    out = np.empty(k, dtype=np.int64)
    base = 1 << depth
    for s in range(k):
        if dead[s]:
            out[s] = -1
            probs[s] = 0.0
        else:
            out[s] = nodes[s] - base
    return out, probs


@njit(cache=True)
def path_probability_numba(node_sums, counts, query, eps, leaf, depth):
    node = (1 << depth) + leaf
    prob = 1.0
    while node > 1:
        parent = node >> 1
        left = 2 * parent
        ml = _node_mass(node_sums, counts, query, eps, left)
        mr = _node_mass(node_sums, counts, query, eps, left + 1)
        total = ml + mr
        if total <= 0.0:
            return 0.0
        if node == left:
            prob *= ml / total
        else:
            prob *= mr / total
        node = parent
    return prob


@njit(cache=True)
def path_probabilities_numba(node_sums, counts, query, eps, leaves, depth):
    out = np.empty(leaves.shape[0])
    for k in range(leaves.shape[0]):
        out[k] = path_probability_numba(node_sums, counts, query, eps, leaves[k], depth)
    return out


@njit(cache=True)
def update_path_numba(node_sums, node, delta):
    while node >= 1:
        for f in range(delta.shape[0]):
            node_sums[node, f] += delta[f]
        node >>= 1


@njit(cache=True)
def update_paths_numba(node_sums, nodes, deltas):
    for k in range(nodes.shape[0]):
        update_path_numba(node_sums, nodes[k], deltas[k])


# ---------------------------------------------------------------------------
# numpy backend
# ---------------------------------------------------------------------------


def _node_masses_numpy(node_sums, counts, query, eps, nodes):
    raw = node_sums[nodes] @ query
    c = counts[nodes]
    return np.where(c > 0, np.maximum(raw, eps * c), 0.0)


def sample_leaves_numpy(node_sums, counts, query, eps, uniforms):
    k, depth = uniforms.shape
    nodes = np.ones(k, dtype=np.int64)
    probs = np.ones(k)
    dead = np.zeros(k, dtype=bool)
    for level in range(depth):
        left = 2 * nodes
        ml = _node_masses_numpy(node_sums, counts, query, eps, left)
        mr = _node_masses_numpy(node_sums, counts, query, eps, left + 1)
        total = ml + mr
        dead |= total <= 0.0
        go_right = uniforms[:, level] * total >= ml
        nodes = left + go_right
        with np.errstate(invalid="ignore", divide="ignore"):
            probs *= np.where(go_right, mr, ml) / total
    out = nodes - (1 << depth)
    out[dead] = -1
    probs[dead] = 0.0
    return out, probs


def path_probability_numpy(node_sums, counts, query, eps, leaf, depth):
    node = (1 << depth) + int(leaf)
    ancestors = node >> np.arange(depth)  # the node itself up to depth 1
    parents_left = (ancestors >> 1) << 1
    ml = _node_masses_numpy(node_sums, counts, query, eps, parents_left)
    mr = _node_masses_numpy(node_sums, counts, query, eps, parents_left + 1)
    total = ml + mr
    if np.any(total <= 0.0):
        return 0.0
    chosen = np.where(ancestors == parents_left, ml, mr)
    return float(np.prod(chosen / total))


def path_probabilities_numpy(node_sums, counts, query, eps, leaves, depth):
    return np.array([path_probability_numpy(node_sums, counts, query, eps, leaf, depth) for leaf in leaves])


def update_path_numpy(node_sums, node, delta):
    depth = int(node).bit_length()
    ancestors = int(node) >> np.arange(depth)
    node_sums[ancestors] += delta


def update_paths_numpy(node_sums, nodes, deltas):
    for node, delta in zip(nodes, deltas):
        update_path_numpy(node_sums, node, delta)


if USE_NUMBA:
    sample_leaves = sample_leaves_numba
    path_probability = path_probability_numba
    path_probabilities = path_probabilities_numba
    update_path = update_path_numba
    update_paths = update_paths_numba
else:
    sample_leaves = sample_leaves_numpy
    path_probability = path_probability_numpy
    path_probabilities = path_probabilities_numpy
    update_path = update_path_numpy
    update_paths = update_paths_numpy
