"""Linear-cost attention with a write phase and a read phase.

The mechanism never forms a token-by-token score matrix.  A *write* pass
compresses the sequence into fixed-size summaries:

* ``hebb_keys``  (m, d): sum of outer products phi(k_t) v_t / m, the
  content pathway;
* ``hebb_pos``   (m, d): the same accumulation driven by a learned
  positional summary instead of the keys;
* ``presyn``     (1, m): (sum_t phi(k_t)) ** alpha, a compressive record
  of total key mass.

A *read* pass then queries the summaries: each output row is
``phi(q_n) (H . P_n) + x_n`` where ``H`` is the summed pathway matrix and
``P_n = 1 / (phi(q_n) presyn^T)`` normalizes per token.  All intermediates
are (n, m), (n, d) or (m, d); cost grows linearly with token count.

The positional summary R is built from a distance-decay profile
``exp(-|i - j| * pos_scale)`` mixed through two learned projections sized
to a fixed capacity ``n_max``.  Token positions are their row indices, so
memory tokens appended after the sequence occupy the positions right after
it.  Building R is the one quadratic-size computation; its value is cached
per token count when no tape is recording, so repeated inference pays only
the linear part.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import autodiff as ad
from .autodiff import ValueNode, active_tape
from .errors import CapacityError, InvalidArgumentError, ShapeError

phi = ad.elu_plus_one
"""Strictly positive feature map applied to keys, queries, and positions."""


@dataclass
class AttentionParams:
    """Projections plus mechanism hyperparameters for one attention block.

    ``w_query``/``w_key`` are (d, m), ``w_value`` is (d, d), the positional
    pair is (n_max, n_max) and (n_max, m).  With several heads the m and d
    axes are split evenly and ``w_out`` (d, d) recombines the heads.
    """

    w_query: ValueNode
    w_key: ValueNode
    w_value: ValueNode
    pos_mix: ValueNode
    pos_read: ValueNode
    w_out: ValueNode | None = None
    alpha: float = 0.25
    pos_scale: float = 2.0
    n_heads: int = 1
    _pos_cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        d, m = self.w_query.shape
        if self.w_key.shape != (d, m):
            raise ShapeError(f"w_key {self.w_key.shape} must match w_query {(d, m)}")
        if self.w_value.shape != (d, d):
            raise ShapeError(f"w_value must be ({d}, {d}), got {self.w_value.shape}")
        n_max = self.pos_mix.shape[0]
        if self.pos_mix.shape != (n_max, n_max):
            raise ShapeError(f"pos_mix must be square, got {self.pos_mix.shape}")
        if self.pos_read.shape != (n_max, m):
            raise ShapeError(
                f"pos_read must be ({n_max}, {m}), got {self.pos_read.shape}"
            )
        if not (0.0 < self.alpha <= 1.0):
            raise InvalidArgumentError(f"alpha must be in (0, 1], got {self.alpha}")
        if self.pos_scale < 0:
            raise InvalidArgumentError("pos_scale must be non-negative")
        if self.n_heads < 1:
            raise InvalidArgumentError("n_heads must be at least 1")
        if m % self.n_heads or d % self.n_heads:
            raise InvalidArgumentError(
                f"n_heads={self.n_heads} must divide m={m} and d={d}"
            )
        if self.n_heads > 1:
            if self.w_out is None:
                raise InvalidArgumentError("multi-head attention needs w_out")
            if self.w_out.shape != (d, d):
                raise ShapeError(f"w_out must be ({d}, {d}), got {self.w_out.shape}")

    @property
    def d_model(self) -> int:
        return self.w_query.shape[0]

    @property
    def m_hidden(self) -> int:
        return self.w_query.shape[1]

    @property
    def n_max(self) -> int:
        return self.pos_mix.shape[0]

    def leaves(self) -> list[ValueNode]:
        out = [self.w_query, self.w_key, self.w_value, self.pos_mix, self.pos_read]
        if self.w_out is not None:
            out.append(self.w_out)
        return out


def init_attention_arrays(
    d: int, m: int, n_max: int, rng: np.random.Generator, n_heads: int = 1
) -> dict[str, np.ndarray]:
    """Fresh projection matrices: uniform(+-1/sqrt(fan_in))."""

    def uniform(rows, cols, fan):
        bound = 1.0 / np.sqrt(fan)
        return rng.uniform(-bound, bound, size=(rows, cols))

    arrays = {
        "w_query": uniform(d, m, d),
        "w_key": uniform(d, m, d),
        "w_value": uniform(d, d, d),
        "pos_mix": uniform(n_max, n_max, n_max),
        "pos_read": uniform(n_max, m, n_max),
    }
    if n_heads > 1:
        arrays["w_out"] = uniform(d, d, d)
    return arrays


def make_attention_params(
    arrays: dict[str, np.ndarray],
    alpha: float = 0.25,
    pos_scale: float = 2.0,
    n_heads: int = 1,
) -> AttentionParams:
    """Wrap plain arrays as trainable leaves (handy for standalone use)."""
    return AttentionParams(
        w_query=ad.leaf(arrays["w_query"]),
        w_key=ad.leaf(arrays["w_key"]),
        w_value=ad.leaf(arrays["w_value"]),
        pos_mix=ad.leaf(arrays["pos_mix"]),
        pos_read=ad.leaf(arrays["pos_read"]),
        w_out=ad.leaf(arrays["w_out"]) if "w_out" in arrays else None,
        alpha=alpha,
        pos_scale=pos_scale,
        n_heads=n_heads,
    )


@lru_cache(maxsize=64)
def _decay_profile(n_tokens: int, pos_scale: float) -> np.ndarray:
    """exp(-|i - j| * pos_scale) over positions 0..n_tokens-1 (read-only)."""
    idx = np.arange(n_tokens, dtype=np.float64)
    r = np.exp(-np.abs(idx[:, None] - idx[None, :]) * pos_scale)
    r.setflags(write=False)
    return r


def positional_matrix(n_tokens: int, params: AttentionParams) -> ValueNode:
    """The (n_tokens, m) positional summary R.

    Differentiable through ``pos_mix``/``pos_read`` when a tape is active;
    otherwise the value is cached per token count so inference and
    benchmarking pay the quadratic construction only once.
    """
    if n_tokens < 1:
        raise InvalidArgumentError("n_tokens must be at least 1")
    if n_tokens > params.n_max:
        raise CapacityError(
            f"{n_tokens} tokens exceed this block's capacity of {params.n_max}"
        )
    taping = active_tape() is not None
    if not taping and n_tokens in params._pos_cache:
        return ad.constant(params._pos_cache[n_tokens])
    profile = ad.constant(_decay_profile(n_tokens, params.pos_scale))
    if n_tokens == params.n_max:
        mix, read = params.pos_mix, params.pos_read
    else:
        mix = ad.slice_cols(ad.slice_rows(params.pos_mix, 0, n_tokens), 0, n_tokens)
        read = ad.slice_rows(params.pos_read, 0, n_tokens)
    mixed = ad.matmul(ad.matmul(mix, profile), ad.transpose(mix))
    out = ad.matmul(mixed, read)
    if not taping:
        params._pos_cache[n_tokens] = out.value
    return out


@dataclass
class WriteState:
    """Fixed-size sequence summaries produced by the write pass.

    ``key_totals`` is the raw (1, m) key mass kept alongside its
    alpha-compressed form so the plain-normalizer ablation can reuse it.
    """

    hebb_keys: ValueNode
    hebb_pos: ValueNode
    presyn: ValueNode
    key_totals: ValueNode


def _mask_tile(mask, n_rows: int, n_cols: int) -> ValueNode:
    mask = np.asarray(mask, dtype=np.float64).reshape(-1)
    if mask.shape[0] != n_rows:
        raise ShapeError(f"mask has {mask.shape[0]} entries for {n_rows} rows")
    if not mask.any():
        raise InvalidArgumentError("mask excludes every row; nothing to write")
    return ad.constant(np.repeat(mask[:, None], n_cols, axis=1))


def _write_core(phi_k: ValueNode, phi_r: ValueNode, v: ValueNode, alpha: float) -> WriteState:
    m_width = phi_k.shape[1]
    inv_m = 1.0 / m_width
    hebb_keys = ad.scalar_mul(ad.matmul(ad.transpose(phi_k), v), inv_m)
    hebb_pos = ad.scalar_mul(ad.matmul(ad.transpose(phi_r), v), inv_m)
    key_totals = ad.col_sum(phi_k)
    presyn = ad.power(key_totals, alpha)
    return WriteState(hebb_keys, hebb_pos, presyn, key_totals)


def write_mode(
    x: ValueNode,
    params: AttentionParams,
    mask=None,
    pos: ValueNode | None = None,
) -> WriteState:
    """Compress the token matrix into head-width summaries (single head).

    ``mask`` marks valid rows with 1; masked rows contribute nothing to any
    summary.  ``pos`` overrides the positional summary (used by tests and
    by callers that precompute it).
    """
    n, d = x.shape
    if d != params.d_model:
        raise ShapeError(f"x has width {d}, parameters expect {params.d_model}")
    k = ad.matmul(x, params.w_key)
    v = ad.matmul(x, params.w_value)
    r = pos if pos is not None else positional_matrix(n, params)
    if r.shape != (n, params.m_hidden):
        raise ShapeError(f"positional summary {r.shape} != {(n, params.m_hidden)}")
    phi_k = phi(k)
    phi_r = phi(r)
    if mask is not None:
        tile = _mask_tile(mask, n, params.m_hidden)
        phi_k = ad.hadamard(phi_k, tile)
        phi_r = ad.hadamard(phi_r, tile)
    return _write_core(phi_k, phi_r, v, params.alpha)


def _read_core(
    phi_q: ValueNode,
    write: WriteState,
    use_H_astro: bool,
    use_P: bool,
) -> ValueNode:
    if use_P:
        norm_input = ad.matmul(phi_q, ad.transpose(write.presyn))
    else:
        m_width = write.key_totals.shape[1]
        norm_input = ad.scalar_mul(
            ad.matmul(phi_q, ad.transpose(write.key_totals)), 1.0 / m_width
        )
    feedback = ad.reciprocal(norm_input)
    h = ad.add(write.hebb_keys, write.hebb_pos) if use_H_astro else write.hebb_keys
    y = ad.matmul(phi_q, h)
    return ad.hadamard(y, ad.broadcast_col(feedback, h.shape[1]))


def read_mode(x: ValueNode, write: WriteState, params: AttentionParams) -> ValueNode:
    """Query the summaries and add the residual (single head, both paths)."""
    q = ad.matmul(x, params.w_query)
    return ad.add(_read_core(phi(q), write, use_H_astro=True, use_P=True), x)


def astro_attention(
    x: ValueNode,
    params: AttentionParams,
    use_H_astro: bool = True,
    use_P: bool = True,
    mask=None,
) -> ValueNode:
    """Full attention block: write, read, optional heads and ablations.

    With ``use_H_astro=False`` the positional pathway is dropped; with
    ``use_P=False`` the per-token normalizer falls back to the plain
    linear-attention denominator phi(q) (sum phi(k))^T / m, which makes the
    double ablation equal textbook linear attention plus the residual.
    """
    n, d = x.shape
    if d != params.d_model:
        raise ShapeError(f"x has width {d}, parameters expect {params.d_model}")
    if params.n_heads == 1:
        write = write_mode(x, params, mask=mask)
        q = ad.matmul(x, params.w_query)
        return ad.add(_read_core(phi(q), write, use_H_astro, use_P), x)

    m_h = params.m_hidden // params.n_heads
    d_h = d // params.n_heads
    k = ad.matmul(x, params.w_key)
    q = ad.matmul(x, params.w_query)
    v = ad.matmul(x, params.w_value)
    r = positional_matrix(n, params)
    tile_m = _mask_tile(mask, n, m_h) if mask is not None else None
    head_outputs = []
    for h in range(params.n_heads):
        phi_k = phi(ad.slice_cols(k, h * m_h, (h + 1) * m_h))
        phi_r = phi(ad.slice_cols(r, h * m_h, (h + 1) * m_h))
        if tile_m is not None:
            phi_k = ad.hadamard(phi_k, tile_m)
            phi_r = ad.hadamard(phi_r, tile_m)
        v_h = ad.slice_cols(v, h * d_h, (h + 1) * d_h)
        write = _write_core(phi_k, phi_r, v_h, params.alpha)
        phi_q = phi(ad.slice_cols(q, h * m_h, (h + 1) * m_h))
        head_outputs.append(_read_core(phi_q, write, use_H_astro, use_P))
    combined = head_outputs[0]
    for other in head_outputs[1:]:
        combined = ad.concat_cols(combined, other)
    return ad.add(ad.matmul(combined, params.w_out), x)
