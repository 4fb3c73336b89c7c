"""Reference (numpy) implementations of the hot kernels.

``_kernels.pyx`` mirrors every function here with identical signatures and
results; ``ventalloc.kernels`` picks one at import time.
"""

import numpy as np

VACANT, NORMAL, SURVIVED, DEAD = 0, 1, 2, 3
EV_NONE, EV_CLEARED, EV_SURVIVED, EV_DEAD_VENT, EV_DEAD_DENIED = 0, 1, 2, 3, 4


def advance_beds(status, cursor, vent, ever, lengths, dead, action, death_u, death_prob):
    """Advance every bed by one day, in place.

    Returns ``(events, first_vent)``: a per-bed event code and a flag for
    patients ventilated for the first time in this admission.
    """
    n = len(status)
    events = np.zeros(n, dtype=np.int8)
    first_vent = np.zeros(n, dtype=np.uint8)

    marker = (status == SURVIVED) | (status == DEAD)
    events[marker] = EV_CLEARED
    status[marker] = VACANT
    vent[marker] = 0
    ever[marker] = 0

    normal = ~marker & (status == NORMAL)
    on = normal & (action != 0)
    off = normal & (action == 0)

    first_vent[on & (ever == 0)] = 1
    ever[on] = 1
    vent[on] = 1
    nxt = cursor + 1
    done = on & (nxt >= lengths)
    cursor[on & ~done] += 1
    cursor[done] = lengths[done] - 1
    died = done & (dead != 0)
    lived = done & (dead == 0)
    status[died] = DEAD
    status[lived] = SURVIVED
    events[died] = EV_DEAD_VENT
    events[lived] = EV_SURVIVED

    vent[off] = 0
    if death_prob >= 1.0:
        denied = off
    elif death_prob <= 0.0:
        denied = np.zeros(n, dtype=bool)
    else:
        denied = off & (death_u < death_prob)
    status[denied] = DEAD
    events[denied] = EV_DEAD_DENIED
    return events, first_vent


def greedy_select(d, valid, locked, capacity, force_fill):
    """Constrained argmax of an additive joint Q, row by row.

    Locked rows are always on; the remaining ``capacity - #locked`` slots go to
    the unlocked valid rows with the largest ``d`` (ties to the lower index),
    skipping non-positive ``d`` unless ``force_fill``. Raises ValueError when a
    row has more locks than capacity.
    """
    b, m = d.shape
    valid = np.asarray(valid, dtype=bool)
    locked = np.asarray(locked, dtype=bool)
    out = np.zeros((b, m), dtype=np.uint8)
    for r in range(b):
        lk = valid[r] & locked[r]
        out[r, lk] = 1
        slots = capacity - int(lk.sum())
        if slots < 0:
            raise ValueError(f"row {r}: {int(lk.sum())} locked beds exceed capacity {capacity}")
        if slots == 0:
            continue
        cand = np.flatnonzero(valid[r] & ~locked[r])
        if len(cand) == 0:
            continue
        order = cand[np.argsort(-d[r, cand], kind="stable")][:slots]
        if not force_fill:
            order = order[d[r, order] > 0]
        out[r, order] = 1
    return out


def gather_tokens(features, offsets, patient, cursor, status, vent, fair):
    """Build a compacted, padded token batch from stored ward snapshots.

    Only Normal beds become tokens, in bed order. Returns ``(tokens, mask,
    bed_index)`` with shapes (B, M, F), (B, M) and (B, M); ``bed_index`` is -1
    on padding.
    """
    b, n = status.shape
    k = features.shape[1]
    n_fair = 0 if fair is None else fair.shape[1]
    normal = status == NORMAL
    counts = normal.sum(axis=1)
    m = max(int(counts.max()) if b else 0, 1)
    order = np.argsort(~normal, axis=1, kind="stable")[:, :m]
    mask = np.take_along_axis(normal, order, axis=1)
    bed_index = np.where(mask, order, -1)
    pid = np.take_along_axis(patient, order, axis=1)
    cur = np.take_along_axis(cursor, order, axis=1)
    rows = np.where(mask, offsets[np.where(mask, pid, 0)] + cur, 0)
    tokens = np.zeros((b, m, k + 1 + n_fair))
    tokens[:, :, :k] = features[rows]
    tokens[:, :, k] = np.take_along_axis(vent, order, axis=1)
    if n_fair:
        tokens[:, :, k + 1:] = fair[:, None, :]
    tokens[~mask] = 0.0
    return tokens, mask, bed_index
