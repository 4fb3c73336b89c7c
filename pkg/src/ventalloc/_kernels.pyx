# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled twins of ``_kernels_py``; same signatures, same results."""

import numpy as np
cimport numpy as cnp

cnp.import_array()

cdef enum:
    VACANT = 0
    NORMAL = 1
    SURVIVED = 2
    DEAD = 3
    EV_CLEARED = 1
    EV_SURVIVED = 2
    EV_DEAD_VENT = 3
    EV_DEAD_DENIED = 4


def advance_beds(cnp.int8_t[::1] status, cnp.int64_t[::1] cursor, cnp.uint8_t[::1] vent,
                 cnp.uint8_t[::1] ever, const cnp.int64_t[::1] lengths, const cnp.uint8_t[::1] dead,
                 const cnp.uint8_t[::1] action, death_u, double death_prob):
    cdef Py_ssize_t n = status.shape[0]
    cdef Py_ssize_t i
    cdef const double[::1] u
    cdef bint use_u = 0.0 < death_prob < 1.0
    if use_u:
        u = death_u
    events_arr = np.zeros(n, dtype=np.int8)
    first_arr = np.zeros(n, dtype=np.uint8)
    cdef cnp.int8_t[::1] events = events_arr
    cdef cnp.uint8_t[::1] first_vent = first_arr
    cdef cnp.int8_t s
    cdef bint dies
    for i in range(n):
        s = status[i]
        if s == SURVIVED or s == DEAD:
            status[i] = VACANT
            vent[i] = 0
            ever[i] = 0
            events[i] = EV_CLEARED
        elif s == NORMAL:
            if action[i] != 0:
                if ever[i] == 0:
                    first_vent[i] = 1
                ever[i] = 1
                vent[i] = 1
                if cursor[i] + 1 >= lengths[i]:
                    cursor[i] = lengths[i] - 1
                    if dead[i] != 0:
                        status[i] = DEAD
                        events[i] = EV_DEAD_VENT
                    else:
                        status[i] = SURVIVED
                        events[i] = EV_SURVIVED
                else:
                    cursor[i] += 1
            else:
                vent[i] = 0
                if death_prob >= 1.0:
                    dies = True
                elif death_prob <= 0.0:
                    dies = False
                else:
                    dies = u[i] < death_prob
                if dies:
                    status[i] = DEAD
                    events[i] = EV_DEAD_DENIED
    return events_arr, first_arr


def greedy_select(const double[:, ::1] d, valid_in, locked_in, long capacity, bint force_fill):
    cdef const cnp.uint8_t[:, ::1] valid = np.ascontiguousarray(valid_in, dtype=np.uint8)
    cdef const cnp.uint8_t[:, ::1] locked = np.ascontiguousarray(locked_in, dtype=np.uint8)
    cdef Py_ssize_t b = d.shape[0]
    cdef Py_ssize_t m = d.shape[1]
    out_arr = np.zeros((b, m), dtype=np.uint8)
    cdef cnp.uint8_t[:, ::1] out = out_arr
    cdef Py_ssize_t r, i, best
    cdef long n_locked, slots, taken
    cdef double best_d
    for r in range(b):
        n_locked = 0
        for i in range(m):
            if valid[r, i] and locked[r, i]:
                out[r, i] = 1
                n_locked += 1
        slots = capacity - n_locked
        if slots < 0:
            raise ValueError(f"row {r}: {n_locked} locked beds exceed capacity {capacity}")
        taken = 0
        while taken < slots:
            best = -1
            best_d = 0.0
            for i in range(m):
                if valid[r, i] and not locked[r, i] and out[r, i] == 0:
                    if best < 0 or d[r, i] > best_d:
                        best = i
                        best_d = d[r, i]
            if best < 0:
                break
            if not force_fill and best_d <= 0.0:
                break
            out[r, best] = 1
            taken += 1
    return out_arr


def gather_tokens(const double[:, ::1] features, const cnp.int64_t[::1] offsets, patient_in, cursor_in,
                  status_in, vent_in, fair_in):
    cdef const cnp.int64_t[:, ::1] patient = np.ascontiguousarray(patient_in, dtype=np.int64)
    cdef const cnp.int64_t[:, ::1] cursor = np.ascontiguousarray(cursor_in, dtype=np.int64)
    cdef const cnp.int8_t[:, ::1] status = np.ascontiguousarray(status_in, dtype=np.int8)
    cdef const cnp.uint8_t[:, ::1] vent = np.ascontiguousarray(vent_in, dtype=np.uint8)
    cdef Py_ssize_t b = status.shape[0]
    cdef Py_ssize_t n = status.shape[1]
    cdef Py_ssize_t k = features.shape[1]
    cdef Py_ssize_t n_fair = 0
    cdef const double[:, ::1] fair
    if fair_in is not None:
        fair = np.ascontiguousarray(fair_in, dtype=np.float64)
        n_fair = fair.shape[1]
    cdef Py_ssize_t r, i, j, t, m = 1, c
    cdef cnp.int64_t row
    for r in range(b):
        c = 0
        for i in range(n):
            if status[r, i] == NORMAL:
                c += 1
        if c > m:
            m = c
    tokens_arr = np.zeros((b, m, k + 1 + n_fair), dtype=np.float64)
    mask_arr = np.zeros((b, m), dtype=bool)
    bed_arr = np.full((b, m), -1, dtype=np.int64)
    cdef double[:, :, ::1] tokens = tokens_arr
    cdef cnp.uint8_t[:, ::1] mask = mask_arr.view(np.uint8)
    cdef cnp.int64_t[:, ::1] bed = bed_arr
    for r in range(b):
        t = 0
        for i in range(n):
            if status[r, i] != NORMAL:
                continue
            row = offsets[patient[r, i]] + cursor[r, i]
            for j in range(k):
                tokens[r, t, j] = features[row, j]
            tokens[r, t, k] = vent[r, i]
            for j in range(n_fair):
                tokens[r, t, k + 1 + j] = fair[r, j]
            mask[r, t] = 1
            bed[r, t] = i
            t += 1
    return tokens_arr, mask_arr, bed_arr
