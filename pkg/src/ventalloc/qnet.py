"""Q-networks over ward states, in plain numpy with hand-written backprop.

``TransformerQNet`` maps the Normal beds of a ward (one token each) to a
2-vector per bed; the joint Q of an action is the sum of the selected
entries, so the constrained argmax reduces to a top-k on ``T[:, 1] - T[:, 0]``.
``ClassicalQNet`` is the enumerated-action baseline: a dense network with one
output per bitmask of at most ``C`` ventilated beds.

Both models share one interface used by the trainer: ``encode`` a batch of
ward snapshots, ``q_out`` it, ``select`` greedy actions, ``joint`` the Q of
given actions, and ``loss_grad`` for a Huber regression step. Parameters live
in a single flat float64 vector; ``views`` exposes named reshaped slices.
"""

from __future__ import annotations

import base64
import json
import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from . import kernels
from .errors import CapabilityError, ConfigurationError, ContractError, NumericError, ParseError, ShapeError
from .mdp import DEAD, NORMAL, SURVIVED, SimState
from .protocols import Protocol

LN_EPS = 1e-5
MASK_NEG = -1e9
GELU_C = math.sqrt(2.0 / math.pi)
CLASSICAL_MAX_BEDS = 18
MODEL_FORMAT = "ventalloc-qnet"
MODEL_VERSION = 1


# ---------------------------------------------------------------------------
# shared pieces


def cached_floats(cache) -> int:
    """Total number of array elements held in a forward cache."""
    if isinstance(cache, np.ndarray):
        return cache.size
    if isinstance(cache, dict):
        return sum(cached_floats(v) for v in cache.values())
    if isinstance(cache, (list, tuple)):
        return sum(cached_floats(v) for v in cache)
    return 0


def huber(diff, delta: float = 1.0):
    """Elementwise Huber loss and its derivative."""
    a = np.abs(diff)
    quad = a <= delta
    loss = np.where(quad, 0.5 * diff * diff, delta * (a - 0.5 * delta))
    grad = np.where(quad, diff, delta * np.sign(diff))
    return loss, grad


def _gelu(z):
    t = np.tanh(GELU_C * (z + 0.044715 * (z * z * z)))  # z**3 is far slower
    return 0.5 * z * (1.0 + t), t


def _gelu_grad(z, t):
    return 0.5 * (1.0 + t) + 0.5 * z * (1.0 - t * t) * GELU_C * (1.0 + 3 * 0.044715 * z * z)


def _ln(x, g, b):
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(-1, keepdims=True) + LN_EPS)
    xh = xc * rstd
    return xh * g + b, (xh, rstd)


def _ln_back(dy, g, cache):
    xh, rstd = cache
    dxh = dy * g
    dx = rstd * (dxh - dxh.mean(-1, keepdims=True) - xh * (dxh * xh).mean(-1, keepdims=True))
    d = dy.shape[-1]
    return dx, (dy * xh).reshape(-1, d).sum(0), dy.reshape(-1, d).sum(0)


def _dense_back(x, dy, w):
    """Gradients of ``y = x @ w + b`` for any leading batch shape."""
    i, o = w.shape
    dw = x.reshape(-1, i).T @ dy.reshape(-1, o)
    return dy @ w.T, dw, dy.reshape(-1, o).sum(0)


class _Layout:
    def __init__(self, entries):
        self.entries = []  # (name, shape, start, stop, fan_in, kind)
        pos = 0
        for name, shape, fan_in, kind in entries:
            size = int(np.prod(shape))
            self.entries.append((name, tuple(shape), pos, pos + size, fan_in, kind))
            pos += size
        self.size = pos

    def views(self, flat):
        if flat.shape != (self.size,):
            raise ShapeError(f"parameter vector has shape {flat.shape}, expected ({self.size},)")
        return {name: flat[a:b].reshape(shape) for name, shape, a, b, _, _ in self.entries}

    def init(self, seed):
        rng = np.random.default_rng(seed)
        flat = np.zeros(self.size)
        for _, _, a, b, fan_in, kind in self.entries:
            if kind == "w":
                bound = 1.0 / math.sqrt(fan_in)
                flat[a:b] = rng.uniform(-bound, bound, size=b - a)
            elif kind == "g":
                flat[a:b] = 1.0
        return flat


@dataclass
class TokenBatch:
    """Normal-bed tokens of B ward snapshots, padded to a common length."""

    tokens: np.ndarray  # (B, M, F)
    mask: np.ndarray  # (B, M) bool
    bed_index: np.ndarray  # (B, M), -1 on padding
    locked: np.ndarray  # (B, M) bool, previous-day ventilation
    n_beds: int

    @property
    def batch_size(self) -> int:
        return self.tokens.shape[0]

    def token_actions(self, bed_actions) -> np.ndarray:
        a = np.take_along_axis(np.asarray(bed_actions), np.where(self.mask, self.bed_index, 0), axis=1)
        return (a != 0) & self.mask

    def bed_actions(self, token_sel) -> np.ndarray:
        out = np.zeros((self.batch_size, self.n_beds), dtype=np.uint8)
        r, t = np.nonzero((token_sel != 0) & self.mask)
        out[r, self.bed_index[r, t]] = 1
        return out


def _fair_features(counters):
    c = np.asarray(counters, dtype=np.float64)
    tot = c.sum(axis=1, keepdims=True)
    return np.divide(c, tot, out=np.zeros_like(c), where=tot > 0)


def _snapshot_arrays(states):
    return (
        np.stack([s.status for s in states]),
        np.stack([s.patient for s in states]),
        np.stack([s.cursor for s in states]),
        np.stack([s.vent for s in states]),
        np.stack([np.concatenate([s.counters.n, s.counters.m]) for s in states]),
    )


def _check_capacity_locks(locked, capacity, withdrawal_on):
    if withdrawal_on and np.any(locked.sum(axis=1) > capacity):
        raise ContractError("committed ventilators exceed capacity")


# ---------------------------------------------------------------------------
# transformer


@dataclass
class QNetConfig:
    embed_dim: int = 64
    num_heads: int = 4
    hidden_dim: int = 128
    num_layers: int = 2
    k: int = 38
    n_groups: int = 4
    fairness_features_on: bool = True
    max_tokens: int | None = None
    attention: bool = True
    force_fill: bool = False
    precision: str = "float64"  # compute dtype; parameters are always stored as float64

    def __post_init__(self):
        if self.precision not in ("float64", "float32"):
            raise ConfigurationError("precision must be float64 or float32")
        if self.embed_dim % self.num_heads:
            raise ConfigurationError("embed_dim must be divisible by num_heads")
        if self.max_tokens is not None and self.max_tokens < 1:
            raise ConfigurationError("max_tokens must be >= 1")
        if min(self.embed_dim, self.hidden_dim, self.k) < 1 or self.num_layers < 0:
            raise ConfigurationError("dimensions must be positive")

    @property
    def token_dim(self) -> int:
        return self.k + 1 + (2 * self.n_groups if self.fairness_features_on else 0)

    def full_scale(self) -> "QNetConfig":
        return replace(self, embed_dim=1024, num_heads=16, hidden_dim=1024)


class TransformerQNet:
    kind = "transformer"

    def __init__(self, config: QNetConfig):
        self.config = config
        c = config
        d, f, h = c.embed_dim, c.token_dim, c.hidden_dim
        entries = [("w_in", (f, d), f, "w"), ("b_in", (d,), 0, "b")]
        for i in range(c.num_layers):
            p = f"l{i}."
            if c.attention:
                entries += [(p + "ln1_g", (d,), 0, "g"), (p + "ln1_b", (d,), 0, "b")]
                for n in ("q", "k", "v", "o"):
                    entries += [(p + "w" + n, (d, d), d, "w"), (p + "b" + n, (d,), 0, "b")]
            entries += [
                (p + "ln2_g", (d,), 0, "g"), (p + "ln2_b", (d,), 0, "b"),
                (p + "w1", (d, h), d, "w"), (p + "b1", (h,), 0, "b"),
                (p + "w2", (h, d), h, "w"), (p + "b2", (d,), 0, "b"),
            ]
        entries += [("lnf_g", (d,), 0, "g"), ("lnf_b", (d,), 0, "b"), ("w_out", (d, 2), d, "w"), ("b_out", (2,), 0, "b")]
        self.layout = _Layout(entries)

    # -- parameters ---------------------------------------------------------
    @property
    def n_params(self) -> int:
        return self.layout.size

    def init_params(self, seed: int = 0) -> np.ndarray:
        return self.layout.init(seed)

    def views(self, flat):
        return self.layout.views(flat)

    def activation_count(self, m: int) -> int:
        """Floats cached for backprop by one forward pass over ``m`` tokens."""
        c = self.config
        d, h = c.embed_dim, c.hidden_dim
        per_layer = 2 * m * d + 3 * m * h + m  # layer norm (xhat, 1/std), z, gelu, tanh
        if c.attention:
            per_layer += 6 * m * d + m + c.num_heads * m * m  # norm, q, k, v, merged heads; probabilities
        return c.token_dim * m + m * d + c.num_layers * per_layer + 2 * m * d + m

    # -- forward / backward ---------------------------------------------------
    def _check_tokens(self, x):
        if x.ndim != 3 or x.shape[2] != self.config.token_dim:
            raise ShapeError(f"tokens have shape {x.shape}, expected (B, M, {self.config.token_dim})")
        if self.config.max_tokens is not None and x.shape[1] > self.config.max_tokens:
            raise ShapeError(f"{x.shape[1]} tokens exceed max_tokens {self.config.max_tokens}")
        if not np.all(np.isfinite(x)):
            raise NumericError("non-finite values in the state matrix")

    def _typed_views(self, params):
        P = self.views(params)
        if self.config.precision == "float64":
            return P
        return {name: v.astype(self.config.precision) for name, v in P.items()}

    def forward_cached(self, params, x, mask=None):
        c = self.config
        P = self._typed_views(params)
        x = np.asarray(x, dtype=c.precision)
        self._check_tokens(x)
        b, m, _ = x.shape
        if mask is None:
            mask = np.ones((b, m), dtype=bool)
        nh, d = c.num_heads, c.embed_dim
        dh = d // nh
        scale = 1.0 / math.sqrt(dh)
        bias = np.where(mask, 0.0, MASK_NEG).astype(c.precision)[:, None, None, :]
        cache = {"x": x}
        h = x @ P["w_in"] + P["b_in"]
        cache["h0"] = h
        layers = []
        for i in range(c.num_layers):
            p = f"l{i}."
            lc = {}
            if c.attention:
                u, lc["ln1"] = _ln(h, P[p + "ln1_g"], P[p + "ln1_b"])
                q = (u @ P[p + "wq"] + P[p + "bq"]).reshape(b, m, nh, dh).transpose(0, 2, 1, 3)
                k = (u @ P[p + "wk"] + P[p + "bk"]).reshape(b, m, nh, dh).transpose(0, 2, 1, 3)
                v = (u @ P[p + "wv"] + P[p + "bv"]).reshape(b, m, nh, dh).transpose(0, 2, 1, 3)
                s = q @ k.transpose(0, 1, 3, 2)
                s *= scale
                s += bias
                s -= s.max(-1, keepdims=True)
                a = np.exp(s)
                a /= a.sum(-1, keepdims=True)
                oc = (a @ v).transpose(0, 2, 1, 3).reshape(b, m, d)
                h = h + oc @ P[p + "wo"] + P[p + "bo"]
                lc.update(u=u, q=q, k=k, v=v, a=a, oc=oc)
            u2, lc["ln2"] = _ln(h, P[p + "ln2_g"], P[p + "ln2_b"])
            z = u2 @ P[p + "w1"] + P[p + "b1"]
            g, t = _gelu(z)
            h = h + g @ P[p + "w2"] + P[p + "b2"]
            lc.update(u2=u2, z=z, g=g, t=t)
            layers.append(lc)
        hf, cache["lnf"] = _ln(h, P["lnf_g"], P["lnf_b"])
        out = hf @ P["w_out"] + P["b_out"]
        cache.update(layers=layers, hf=hf, mask=mask, shape=(b, m))
        return out, cache

    def backward(self, params, cache, dout) -> np.ndarray:
        c = self.config
        P = self._typed_views(params)
        dout = np.asarray(dout, dtype=c.precision)
        grad = np.zeros_like(params)
        G = self.views(grad)
        b, m = cache["shape"]
        nh, d = c.num_heads, c.embed_dim
        dh = d // nh
        scale = 1.0 / math.sqrt(dh)

        dhf, G["w_out"][...], G["b_out"][...] = _dense_back(cache["hf"], dout, P["w_out"])
        dh_, G["lnf_g"][...], G["lnf_b"][...] = _ln_back(dhf, P["lnf_g"], cache["lnf"])
        for i in reversed(range(c.num_layers)):
            p = f"l{i}."
            lc = cache["layers"][i]
            dg, G[p + "w2"][...], G[p + "b2"][...] = _dense_back(lc["g"], dh_, P[p + "w2"])
            dz = dg * _gelu_grad(lc["z"], lc["t"])
            du2, G[p + "w1"][...], G[p + "b1"][...] = _dense_back(lc["u2"], dz, P[p + "w1"])
            dx, G[p + "ln2_g"][...], G[p + "ln2_b"][...] = _ln_back(du2, P[p + "ln2_g"], lc["ln2"])
            dh_ = dh_ + dx
            if c.attention:
                doc, G[p + "wo"][...], G[p + "bo"][...] = _dense_back(lc["oc"], dh_, P[p + "wo"])
                do = doc.reshape(b, m, nh, dh).transpose(0, 2, 1, 3)
                a, q, k, v = lc["a"], lc["q"], lc["k"], lc["v"]
                da = do @ v.transpose(0, 1, 3, 2)
                dv = a.transpose(0, 1, 3, 2) @ do
                ds = a * (da - (da * a).sum(-1, keepdims=True)) * scale
                dq = ds @ k
                dk = ds.transpose(0, 1, 3, 2) @ q
                du = np.zeros_like(lc["u"])
                for name, dproj in (("q", dq), ("k", dk), ("v", dv)):
                    dflat = dproj.transpose(0, 2, 1, 3).reshape(b, m, d)
                    dpart, G[p + "w" + name][...], G[p + "b" + name][...] = _dense_back(lc["u"], dflat, P[p + "w" + name])
                    du += dpart
                dx, G[p + "ln1_g"][...], G[p + "ln1_b"][...] = _ln_back(du, P[p + "ln1_g"], lc["ln1"])
                dh_ = dh_ + dx
        _, G["w_in"][...], G["b_in"][...] = _dense_back(cache["x"], dh_, P["w_in"])
        return grad

    def forward(self, params, x, mask=None) -> np.ndarray:
        """T(s): (M, F) -> (M, 2), or batched (B, M, F) -> (B, M, 2)."""
        x = np.asarray(x)
        single = x.ndim == 2
        if single:
            x = x[None]
        out, _ = self.forward_cached(params, x, mask)
        return out[0] if single else out

    def joint_q(self, params, x, action) -> float:
        out = self.forward(params, x)
        a = np.asarray(action)
        if a.shape != (out.shape[0],):
            raise ShapeError(f"action has shape {a.shape}, expected ({out.shape[0]},)")
        return float(out[np.arange(len(a)), (a != 0).astype(np.int64)].sum())

    # -- ward interface -------------------------------------------------------
    def encode(self, cohort, status, patient, cursor, vent, counters) -> TokenBatch:
        fair = _fair_features(counters) if self.config.fairness_features_on else None
        if fair is not None and fair.shape[1] != 2 * self.config.n_groups:
            raise ShapeError("counter width does not match n_groups")
        tokens, mask, bed = kernels.gather_tokens(
            cohort.features, cohort.offsets, patient, cursor, np.ascontiguousarray(status, dtype=np.int8),
            np.ascontiguousarray(vent, dtype=np.uint8), fair,
        )
        locked = mask & (tokens[:, :, self.config.k] == 1.0)
        return TokenBatch(tokens, mask, bed, locked, status.shape[1])

    def encode_states(self, states) -> TokenBatch:
        return self.encode(states[0].cohort, *_snapshot_arrays(states))

    def state_matrix(self, state: SimState) -> np.ndarray:
        """Token matrix of one ward (Normal beds in bed order)."""
        enc = self.encode_states([state])
        return enc.tokens[0, : int(enc.mask[0].sum())]

    def q_out(self, params, enc: TokenBatch) -> np.ndarray:
        out, _ = self.forward_cached(params, enc.tokens, enc.mask)
        return out

    def select(self, out, enc: TokenBatch, capacity, withdrawal_on, force_fill=None) -> np.ndarray:
        ff = self.config.force_fill if force_fill is None else force_fill
        locked = enc.locked if withdrawal_on else np.zeros_like(enc.mask)
        _check_capacity_locks(locked, capacity, withdrawal_on)
        d = np.ascontiguousarray(out[..., 1] - out[..., 0], dtype=np.float64)
        sel = kernels.greedy_select(d, enc.mask, locked, int(capacity), bool(ff))
        return enc.bed_actions(sel)

    def joint(self, out, enc: TokenBatch, bed_actions) -> np.ndarray:
        ta = enc.token_actions(bed_actions)
        picked = np.where(ta, out[..., 1], out[..., 0])
        return (picked * enc.mask).sum(axis=1, dtype=np.float64)

    def loss_grad(self, params, enc: TokenBatch, bed_actions, targets, delta: float = 1.0):
        out, cache = self.forward_cached(params, enc.tokens, enc.mask)
        ta = enc.token_actions(bed_actions)
        q = (np.where(ta, out[..., 1], out[..., 0]) * enc.mask).sum(axis=1)
        loss_v, dl = huber(q - np.asarray(targets, dtype=np.float64), delta)
        dq = dl / len(q)
        dout = np.zeros_like(out)
        w = dq[:, None] * enc.mask
        dout[..., 1] = np.where(ta, w, 0.0)
        dout[..., 0] = np.where(ta, 0.0, w)
        return float(loss_v.mean()), self.backward(params, cache, dout), q

    def greedy_action(self, params, state: SimState, capacity, withdrawal_on, force_fill=None) -> np.ndarray:
        enc = self.encode_states([state])
        return self.select(self.q_out(params, enc), enc, capacity, withdrawal_on, force_fill)[0]

    def to_dict(self) -> dict:
        return asdict(self.config)


def brute_force_argmax(t, locked, capacity, withdrawal_on=True):
    """Exhaustive argmax of sum_i t[i, a_i] over feasible 0/1 actions.

    Returns ``(action, value)``; the first maximizer in bitmask order wins.
    """
    t = np.asarray(t, dtype=np.float64)
    m = len(t)
    locked = np.asarray(locked, dtype=bool)
    bits = ((np.arange(1 << m)[:, None] >> np.arange(m)) & 1).astype(np.uint8)
    ok = bits.sum(axis=1) <= capacity
    if withdrawal_on:
        ok &= ~np.any(locked & (bits == 0), axis=1)
    if not ok.any():
        raise ContractError("no feasible action")
    values = np.where(bits == 1, t[:, 1], t[:, 0]).sum(axis=1)
    values[~ok] = -np.inf
    j = int(np.argmax(values))
    return bits[j], float(values[j])


# ---------------------------------------------------------------------------
# classical enumerated-action head


@dataclass
class ClassicalConfig:
    n_beds: int
    capacity: int
    hidden: tuple = (128, 128)
    k: int = 38
    n_groups: int = 4
    fairness_features_on: bool = True

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.n_beds > CLASSICAL_MAX_BEDS:
            raise CapabilityError(
                f"classical head enumerates 2^N actions; N={self.n_beds} exceeds the supported {CLASSICAL_MAX_BEDS}"
            )
        if not 0 <= self.capacity <= self.n_beds:
            raise ConfigurationError("capacity must lie in [0, n_beds]")

    @property
    def input_dim(self) -> int:
        return self.n_beds * (self.k + 1) + (2 * self.n_groups if self.fairness_features_on else 0)


def action_table(n_beds: int, capacity: int):
    """Bitmasks with popcount <= capacity (ascending) and the inverse lookup."""
    all_masks = np.arange(1 << n_beds, dtype=np.int64)
    pop = np.zeros_like(all_masks)
    for i in range(n_beds):
        pop += (all_masks >> i) & 1
    masks = all_masks[pop <= capacity]
    lookup = np.full(1 << n_beds, -1, dtype=np.int64)
    lookup[masks] = np.arange(len(masks))
    return masks, lookup


@dataclass
class ClassicalBatch:
    x: np.ndarray  # (B, input_dim)
    normal: np.ndarray  # (B, N) bool
    locked: np.ndarray  # (B, N) bool

    @property
    def batch_size(self) -> int:
        return self.x.shape[0]


class ClassicalQNet:
    kind = "classical"

    def __init__(self, config: ClassicalConfig):
        self.config = config
        self.masks, self.lookup = action_table(config.n_beds, config.capacity)
        self.bits = ((self.masks[:, None] >> np.arange(config.n_beds)) & 1).astype(np.uint8)
        dims = (config.input_dim,) + config.hidden + (len(self.masks),)
        entries = []
        for i in range(len(dims) - 1):
            entries += [(f"w{i}", (dims[i], dims[i + 1]), dims[i], "w"), (f"b{i}", (dims[i + 1],), 0, "b")]
        self.dims = dims
        self.layout = _Layout(entries)

    @property
    def n_actions(self) -> int:
        return len(self.masks)

    @property
    def n_params(self) -> int:
        return self.layout.size

    def init_params(self, seed: int = 0) -> np.ndarray:
        return self.layout.init(seed)

    def views(self, flat):
        return self.layout.views(flat)

    def activation_count(self) -> int:
        return int(sum(2 * h for h in self.config.hidden) + self.n_actions)

    def encode(self, cohort, status, patient, cursor, vent, counters) -> ClassicalBatch:
        cfg = self.config
        status = np.asarray(status)
        b, n = status.shape
        if n != cfg.n_beds:
            raise ShapeError(f"ward has {n} beds, model expects {cfg.n_beds}")
        normal = status == NORMAL
        x = np.zeros((b, n, cfg.k + 1))
        rows = np.where(normal, cohort.offsets[np.where(normal, patient, 0)] + cursor, 0)
        x[:, :, : cfg.k] = np.where(normal[..., None], cohort.features[rows], 0.0)
        x[status == SURVIVED, : cfg.k] = 1.0
        x[status == DEAD, : cfg.k] = -1.0
        x[:, :, cfg.k] = vent
        flat = x.reshape(b, -1)
        if cfg.fairness_features_on:
            flat = np.concatenate([flat, _fair_features(counters)], axis=1)
        return ClassicalBatch(flat, normal, normal & (np.asarray(vent) == 1))

    def encode_states(self, states) -> ClassicalBatch:
        return self.encode(states[0].cohort, *_snapshot_arrays(states))

    def forward_cached(self, params, x):
        P = self.views(params)
        acts = [x]
        h = x
        n_layers = len(self.dims) - 1
        pre = []
        for i in range(n_layers):
            z = h @ P[f"w{i}"] + P[f"b{i}"]
            if i < n_layers - 1:
                g, t = _gelu(z)
                pre.append((z, t))
                h = g
                acts.append(h)
            else:
                h = z
        return h, (acts, pre)

    def backward(self, params, cache, dout):
        P = self.views(params)
        grad = np.zeros_like(params)
        G = self.views(grad)
        acts, pre = cache
        dh = dout
        for i in reversed(range(len(self.dims) - 1)):
            dx, G[f"w{i}"][...], G[f"b{i}"][...] = _dense_back(acts[i], dh, P[f"w{i}"])
            if i > 0:
                z, t = pre[i - 1]
                dh = dx * _gelu_grad(z, t)
        return grad

    def q_out(self, params, enc: ClassicalBatch) -> np.ndarray:
        out, _ = self.forward_cached(params, enc.x)
        return out

    def feasible(self, enc: ClassicalBatch, withdrawal_on) -> np.ndarray:
        weights = 1 << np.arange(self.config.n_beds, dtype=np.int64)
        normal_int = enc.normal.astype(np.int64) @ weights
        ok = (self.masks[None, :] & ~normal_int[:, None]) == 0
        if withdrawal_on:
            locked_int = enc.locked.astype(np.int64) @ weights
            ok &= (locked_int[:, None] & ~self.masks[None, :]) == 0
        return ok

    def select(self, out, enc: ClassicalBatch, capacity, withdrawal_on, force_fill=None) -> np.ndarray:
        if capacity != self.config.capacity:
            raise ContractError(f"classical head was built for capacity {self.config.capacity}, got {capacity}")
        _check_capacity_locks(enc.locked, capacity, withdrawal_on)
        q = np.where(self.feasible(enc, withdrawal_on), out, -np.inf)
        return self.bits[np.argmax(q, axis=1)].copy()

    def _indices(self, bed_actions):
        weights = 1 << np.arange(self.config.n_beds, dtype=np.int64)
        idx = self.lookup[np.asarray(bed_actions, dtype=np.int64) @ weights]
        if np.any(idx < 0):
            raise ContractError("action exceeds the capacity the classical head enumerates")
        return idx

    def joint(self, out, enc, bed_actions) -> np.ndarray:
        idx = self._indices(bed_actions)
        return out[np.arange(len(idx)), idx]

    def loss_grad(self, params, enc: ClassicalBatch, bed_actions, targets, delta: float = 1.0):
        out, cache = self.forward_cached(params, enc.x)
        idx = self._indices(bed_actions)
        q = out[np.arange(len(idx)), idx]
        loss_v, dl = huber(q - np.asarray(targets, dtype=np.float64), delta)
        dout = np.zeros_like(out)
        dout[np.arange(len(idx)), idx] = dl / len(q)
        return float(loss_v.mean()), self.backward(params, cache, dout), q

    def greedy_action(self, params, state: SimState, capacity, withdrawal_on, force_fill=None) -> np.ndarray:
        enc = self.encode_states([state])
        return self.select(self.q_out(params, enc), enc, capacity, withdrawal_on)[0]

    def to_dict(self) -> dict:
        return asdict(self.config)


# ---------------------------------------------------------------------------
# gradient check


def grad_check(model, params, enc, bed_actions, targets, h: float = 1e-4, grad_fn=None, floor: float = 1e-6) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``grad_fn(params) -> grad`` replaces the analytic gradient (used to inject
    faults). Relative error is ``|g - n| / max(|g|, |n|, floor)``.
    """
    params = np.array(params, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)

    def loss_at(p):
        out = model.q_out(p, enc)
        q = model.joint(out, enc, bed_actions)
        return float(huber(q - targets)[0].mean())

    g = grad_fn(params) if grad_fn is not None else model.loss_grad(params, enc, bed_actions, targets)[1]
    num = np.empty_like(params)
    for i in range(len(params)):
        old = params[i]
        params[i] = old + h
        up = loss_at(params)
        params[i] = old - h
        down = loss_at(params)
        params[i] = old
        num[i] = (up - down) / (2 * h)
    denom = np.maximum(np.maximum(np.abs(g), np.abs(num)), floor)
    return float(np.max(np.abs(g - num) / denom))


def matrix_batch(x, locked=None) -> TokenBatch:
    """Wrap a single (M, F) state matrix as a batch whose beds are its rows."""
    x = np.asarray(x, dtype=np.float64)
    m = x.shape[0]
    lk = np.zeros(m, dtype=bool) if locked is None else np.asarray(locked, dtype=bool)
    return TokenBatch(x[None], np.ones((1, m), dtype=bool), np.arange(m)[None], lk[None], m)


# ---------------------------------------------------------------------------
# serialization and the learned protocol


def build_model(kind: str, config: dict):
    if kind == "transformer":
        return TransformerQNet(QNetConfig(**config))
    if kind == "classical":
        return ClassicalQNet(ClassicalConfig(**config))
    raise ParseError(f"unknown model kind {kind!r}")


def save_model(path, model, params, metadata=None) -> Path:
    """JSON container: config, base64 little-endian float64 parameters, metadata."""
    params = np.asarray(params, dtype="<f8")
    if params.shape != (model.n_params,):
        raise ShapeError("parameter vector does not match the model")
    doc = {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "kind": model.kind,
        "config": model.to_dict(),
        "n_params": int(model.n_params),
        "params": base64.b64encode(params.tobytes()).decode("ascii"),
        "metadata": metadata or {},
    }
    path = Path(path)
    path.write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    return path


def load_model(path):
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ParseError(f"cannot read model file {path}: {exc}") from exc
    if doc.get("format") != MODEL_FORMAT:
        raise ParseError(f"{path} is not a model file")
    if doc.get("version") != MODEL_VERSION:
        raise ParseError(f"unsupported model version {doc.get('version')}")
    cfg = dict(doc["config"])
    if "hidden" in cfg:
        cfg["hidden"] = tuple(cfg["hidden"])
    model = build_model(doc["kind"], cfg)
    params = np.frombuffer(base64.b64decode(doc["params"]), dtype="<f8").astype(np.float64)
    if params.shape != (model.n_params,):
        raise ParseError("parameter count does not match the stored config")
    return model, params, doc.get("metadata", {})


class LearnedProtocol(Protocol):
    """Greedy policy of a trained Q-network."""

    def __init__(self, model, params, name="learned", force_fill=None):
        self.model = model
        self.params = params
        self.name = name
        self.force_fill = force_fill

    def act(self, state, capacity, withdrawal_on, rng):
        return self.model.greedy_action(self.params, state, capacity, withdrawal_on, self.force_fill)
