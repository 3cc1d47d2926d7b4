"""Model assembly: one recurrent layer applied across depth, plus decoding.

The layer mixes three attention modules over a shared residual stream:

  * sequence attention (SA): causal grouped-query attention over tokens,
  * depth attention (DA): attention over the depth history of each token,
    run with the sequence folded into the batch axis,
  * expert attention (EA): a sparse mixture of SwiGLU experts whose routing
    logits are computed like depth-attention scores.

Compositions per depth step (each module normalizes its own input):
  sequential          y = x + DA(x); y = y + SA(y); y = y + EA(y)
  partial_parallel    y = x + DA(x) + SA(x); y = y + EA(y)
  full_parallel       y = x + DA(x) + SA(x) + EA(x)

For the depth-recurrent variants the step returns RMSNorm(y) so the stream
keeps a fixed scale at every depth entry; the layered variant returns y
unchanged (plain pre-norm residuals). Depth-recurrent variants also route
their fused QKV and output projections through top-1 linear expert banks
with one score per attention module shared by both banks.

Caching: SA keeps one K/V cache per depth that grows with emitted tokens;
DA keeps a per-token cache across depths that is dropped whenever a new
token is emitted, so its size never exceeds the depth count.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .attention import (
    AttentionSpec,
    RopeSpec,
    grouped_query_attention,
    rms_norm,
    rope_apply,
    rope_depth_apply,
)
from .config import ModelConfig
from .errors import ContractError, InputError
from .params import ParameterStore, init_parameters
from .routing import (
    LinearExpertBank,
    RouterState,
    bank_apply,
    depth_router_logits,
    fold_shared,
    select_topk,
    update_balance,
)
from .telemetry import TelemetryLog
from .tensor import Tensor


class SeqCache:
    """K/V for one depth over emitted tokens: [b, kv_heads, tokens, d]."""

    def __init__(self, limit: int):
        self.limit = limit
        self.k = None
        self.v = None

    @property
    def length(self) -> int:
        return 0 if self.k is None else self.k.shape[2]

    def append(self, k: Tensor, v: Tensor):
        if self.length + k.shape[2] > self.limit:
            raise ContractError(
                f"sequence cache overflow: {self.length} + {k.shape[2]} > {self.limit}")
        if self.k is None:
            self.k, self.v = k, v
        else:
            self.k = T.concat([self.k, k], axis=2)
            self.v = T.concat([self.v, v], axis=2)
        return self.k, self.v


class DepthCache:
    """K/V for the current token batch across depths: [rows, kv_heads, l, d].

    Holds at most `limit` (= depth count) entries; `reset` drops them when a
    token is emitted. `high_water` records the largest entry count ever
    held, which stays bounded by the depth count no matter how long the
    generated sequence gets.
    """

    def __init__(self, limit: int):
        self.limit = limit
        self.ks: list = []
        self.vs: list = []
        self.high_water = 0

    def __len__(self) -> int:
        return len(self.ks)

    def append(self, k: Tensor, v: Tensor):
        if len(self.ks) >= self.limit:
            raise ContractError(f"depth cache overflow: limit {self.limit}")
        self.ks.append(k)
        self.vs.append(v)
        self.high_water = max(self.high_water, len(self.ks))
        return (self.ks[0], self.vs[0]) if len(self.ks) == 1 else (
            T.concat(self.ks, axis=2), T.concat(self.vs, axis=2))

    def reset(self):
        self.ks = []
        self.vs = []


class CacheSet:
    """All decode-time state: one SeqCache per depth, one shared DepthCache.

    The depth cache exists only when the model has a depth-attention
    module; other variants never allocate it.
    """

    def __init__(self, cfg: ModelConfig):
        self.seq = [SeqCache(cfg.context_length) for _ in range(cfg.depth)]
        self.depth = DepthCache(cfg.depth) if cfg.has_da else None

    @property
    def tokens_cached(self) -> int:
        return self.seq[0].length


class DreamerModel:
    """Configuration plus parameters plus per-router balancing state."""

    def __init__(self, cfg: ModelConfig, params: ParameterStore | None = None,
                 seed: int = 0, telemetry: TelemetryLog | None = None):
        cfg.validate()
        self.cfg = cfg
        self.params = params if params is not None else init_parameters(cfg, seed)
        self.telemetry = telemetry

        self.sa_spec = AttentionSpec(cfg.sa_query_heads, cfg.sa_kv_heads,
                                     cfg.sa_head_dim, causal=True)
        self.sa_rope = RopeSpec(cfg.sa_head_dim, cfg.sa_rope_base)
        if cfg.has_da:
            self.da_spec = AttentionSpec(cfg.da_query_heads, cfg.da_kv_heads,
                                         cfg.da_head_dim, causal=True)
            self.da_rope = RopeSpec(cfg.da_head_dim, cfg.da_rope_base,
                                    depth_mode=True, max_depth=cfg.depth)
        self.router_rope = RopeSpec(cfg.ea_qk_dim, cfg.da_rope_base,
                                    depth_mode=True, max_depth=cfg.depth)

        self.routers: dict[str, RouterState] = {}
        self.banks: dict[str, LinearExpertBank] = {}
        for i in range(cfg.param_sets):
            p = cfg.set_name(i)
            self.routers[f"{p}.ea"] = RouterState(
                f"{p}.ea", cfg.ea_num_experts, cfg.ea_active_experts,
                cfg.ea_bias_update_rate, normalize=True,
                bias=self.params[f"{p}.ea.router.bias"].data)
            if cfg.layered:
                continue
            for mod in ("sa", "da") if cfg.has_da else ("sa",):
                self.routers[f"{p}.{mod}"] = RouterState(
                    f"{p}.{mod}", cfg.attn_experts, 1,
                    cfg.attn_moe_bias_update_rate, normalize=False,
                    bias=self.params[f"{p}.{mod}.router.bias"].data)
                for which in ("qkv", "out"):
                    name = f"{p}.{mod}.{which}_bank"
                    self.banks[name] = LinearExpertBank(
                        self.params[f"{name}.experts"],
                        self.params[f"{name}.shared"])

    def new_caches(self) -> CacheSet:
        return CacheSet(self.cfg)

    def update_balancing(self):
        for state in self.routers.values():
            update_balance(state)

    def fold_banks(self):
        """Bake shared experts into the routable banks (inference only)."""
        for bank in self.banks.values():
            fold_shared(bank)

    # -- routed projections ---------------------------------------------------

    def _route(self, flat: Tensor, module: str, depth: int):
        """Tied top-1 selection for one attention module's two banks."""
        state = self.routers[module]
        logits = depth_router_logits(
            flat, self.params[f"{module}.router.query.weight"],
            self.params[f"{module}.router.keys"], depth, self.router_rope)
        idx, gates = select_topk(logits, state)
        if self.telemetry is not None:
            self.telemetry.add_routing(module, depth, idx, gates.data)
        return idx[:, 0], gates.reshape(idx.shape[0])

    def _project(self, flat: Tensor, module: str, which: str, selection):
        if selection is None:
            return T.matmul(flat, self.params[f"{module}.{which}.weight"])
        idx, gates = selection
        return bank_apply(flat, idx, gates, self.banks[f"{module}.{which}_bank"])

    def _split_heads(self, qkv: Tensor, prefix: str, query_heads: int,
                     kv_heads: int, head_dim: int):
        """[n, qkv_dim] -> normed q [n, qh, d], normed k, raw v [n, kvh, d]."""
        n = qkv.shape[0]
        qd = query_heads * head_dim
        kd = kv_heads * head_dim
        q = qkv[:, :qd].reshape(n, query_heads, head_dim)
        k = qkv[:, qd:qd + kd].reshape(n, kv_heads, head_dim)
        v = qkv[:, qd + kd:].reshape(n, kv_heads, head_dim)
        q = rms_norm(q, self.params[f"{prefix}.q_norm.gain"], self.cfg.rms_eps)
        k = rms_norm(k, self.params[f"{prefix}.k_norm.gain"], self.cfg.rms_eps)
        return q, k, v

    # -- the three attention modules -------------------------------------------

    def sa_forward(self, x: Tensor, p: str, depth: int,
                   seq_cache: SeqCache | None = None) -> Tensor:
        """Causal grouped-query attention over token positions."""
        cfg = self.cfg
        b, s, h = x.shape
        offset = seq_cache.length if seq_cache is not None else 0
        normed = rms_norm(x, self.params[f"{p}.sa.in_norm.gain"], cfg.rms_eps)
        flat = normed.reshape(b * s, h)
        selection = None if cfg.layered else self._route(flat, f"{p}.sa", depth)
        qkv = self._project(flat, f"{p}.sa", "qkv", selection)

        q, k, v = self._split_heads(qkv, f"{p}.sa", cfg.sa_query_heads,
                                    cfg.sa_kv_heads, cfg.sa_head_dim)
        q = q.reshape(b, s, cfg.sa_query_heads, cfg.sa_head_dim).transpose((0, 2, 1, 3))
        k = k.reshape(b, s, cfg.sa_kv_heads, cfg.sa_head_dim).transpose((0, 2, 1, 3))
        v = v.reshape(b, s, cfg.sa_kv_heads, cfg.sa_head_dim).transpose((0, 2, 1, 3))
        positions = np.arange(offset, offset + s)
        q = rope_apply(q, positions, self.sa_rope)
        k = rope_apply(k, positions, self.sa_rope)
        if seq_cache is not None:
            k, v = seq_cache.append(k, v)

        out = grouped_query_attention(q, k, v, self.sa_spec, pos_offset=offset)
        merged = out.transpose((0, 2, 1, 3)).reshape(b * s, cfg.sa_out_dim)
        y = self._project(merged, f"{p}.sa", "out", selection)
        return y.reshape(b, s, h)

    def da_forward(self, x: Tensor, p: str, depth: int,
                   depth_cache: DepthCache) -> Tensor:
        """Attention over each token's own depth history (sequence as batch)."""
        cfg = self.cfg
        if depth >= cfg.depth:
            raise ContractError(f"depth {depth} outside [0, {cfg.depth})")
        b, s, h = x.shape
        rows = b * s
        normed = rms_norm(x, self.params[f"{p}.da.in_norm.gain"], cfg.rms_eps)
        flat = normed.reshape(rows, h)
        selection = None if cfg.layered else self._route(flat, f"{p}.da", depth)
        qkv = self._project(flat, f"{p}.da", "qkv", selection)

        q, k, v = self._split_heads(qkv, f"{p}.da", cfg.da_query_heads,
                                    cfg.da_kv_heads, cfg.da_head_dim)
        q = rope_depth_apply(q, depth, self.da_rope)
        k = rope_depth_apply(k, depth, self.da_rope)
        q = q.reshape(rows, cfg.da_query_heads, 1, cfg.da_head_dim)
        k = k.reshape(rows, cfg.da_kv_heads, 1, cfg.da_head_dim)
        v = v.reshape(rows, cfg.da_kv_heads, 1, cfg.da_head_dim)
        k, v = depth_cache.append(k, v)

        out, weights = grouped_query_attention(q, k, v, self.da_spec,
                                               pos_offset=depth,
                                               return_weights=True)
        if self.telemetry is not None:
            scores = weights.data.mean(axis=(0, 1, 2)).astype(np.float64)
            self.telemetry.add_depth_scores(depth, rows, scores)
        merged = out.reshape(rows, cfg.da_out_dim)
        y = self._project(merged, f"{p}.da", "out", selection)
        return y.reshape(b, s, h)

    def ea_forward(self, x: Tensor, p: str, depth: int) -> Tensor:
        """Sparse mixture of SwiGLU experts with depth-encoded routing."""
        cfg = self.cfg
        b, s, h = x.shape
        rows = b * s
        normed = rms_norm(x, self.params[f"{p}.ea.in_norm.gain"], cfg.rms_eps)
        flat = normed.reshape(rows, h)
        state = self.routers[f"{p}.ea"]
        logits = depth_router_logits(
            flat, self.params[f"{p}.ea.router.query.weight"],
            self.params[f"{p}.ea.router.keys"], depth, self.router_rope)
        idx, gates = select_topk(logits, state)
        if self.telemetry is not None:
            self.telemetry.add_routing(f"{p}.ea", depth, idx, gates.data)

        # Each active expert runs over all rows and is masked by a gate
        # column that is zero off its own rows; see bank_apply for why the
        # shapes must not depend on the routing outcome.
        top_k = state.top_k
        pair_rows = np.repeat(np.arange(rows), top_k)
        pair_experts = idx.reshape(-1)
        flat_gates = gates.reshape(rows * top_k, 1)
        gate_w = self.params[f"{p}.ea.experts.gate"]
        up_w = self.params[f"{p}.ea.experts.up"]
        down_w = self.params[f"{p}.ea.experts.down"]

        out = None
        for e in np.unique(pair_experts):
            pairs = np.nonzero(pair_experts == e)[0]
            mask = T.scatter_rows(T.take_rows(flat_gates, pairs),
                                  pair_rows[pairs], rows)
            hidden = T.silu(T.matmul(flat, gate_w[int(e)])) * T.matmul(flat, up_w[int(e)])
            ye = T.matmul(hidden, down_w[int(e)]) * mask
            out = ye if out is None else out + ye
        return out.reshape(b, s, h)

    # -- one depth step and the full stack --------------------------------------

    def dreamer_step(self, x: Tensor, depth: int,
                     seq_cache: SeqCache | None = None,
                     depth_cache: DepthCache | None = None) -> Tensor:
        cfg = self.cfg
        if not 0 <= depth < cfg.depth:
            raise ContractError(f"depth {depth} outside [0, {cfg.depth})")
        if cfg.has_da and depth_cache is None:
            raise ContractError("depth-attention variant needs a depth cache")
        p = cfg.set_name(depth)

        def sa(u):
            return self.sa_forward(u, p, depth, seq_cache)

        def da(u):
            return self.da_forward(u, p, depth, depth_cache)

        def ea(u):
            return self.ea_forward(u, p, depth)

        if cfg.composition == "sequential":
            y = x + da(x) if cfg.has_da else x
            y = y + sa(y)
            y = y + ea(y)
        elif cfg.composition == "partial_parallel":
            y = x + da(x) + sa(x) if cfg.has_da else x + sa(x)
            y = y + ea(y)
        else:  # full_parallel
            y = x + da(x) + sa(x) + ea(x) if cfg.has_da else x + sa(x) + ea(x)

        if cfg.layered:
            return y
        return rms_norm(y, self.params["layer.stream_norm.gain"], cfg.rms_eps)

    def embed(self, tokens: np.ndarray) -> Tensor:
        tokens = np.asarray(tokens)
        if tokens.ndim != 2:
            raise InputError(f"tokens must be [batch, seq], got shape {tokens.shape}")
        if not np.issubdtype(tokens.dtype, np.integer):
            raise InputError(f"tokens must be integers, got dtype {tokens.dtype}")
        if tokens.size == 0:
            raise InputError("empty token batch")
        if tokens.min() < 0 or tokens.max() >= self.cfg.vocab_size:
            raise InputError(
                f"token ids must be in [0, {self.cfg.vocab_size}), got "
                f"[{tokens.min()}, {tokens.max()}]")
        return T.embedding(self.params["embed.weight"], tokens)

    def model_forward(self, tokens: np.ndarray,
                      caches: CacheSet | None = None) -> Tensor:
        """Token ids [b, s] -> logits [b, s, vocab].

        Without caches this is the training forward over a full sequence.
        With caches it is one incremental step: SA caches grow by s
        entries per depth and the depth cache is dropped first (it only
        ever describes the freshest tokens).
        """
        cfg = self.cfg
        x = self.embed(tokens)
        b, s, h = x.shape
        if caches is not None:
            depth_cache = caches.depth
            if depth_cache is not None:
                depth_cache.reset()
        else:
            if s > cfg.context_length:
                raise InputError(
                    f"sequence length {s} exceeds context {cfg.context_length}")
            depth_cache = DepthCache(cfg.depth) if cfg.has_da else None

        for depth in range(cfg.depth):
            seq_cache = caches.seq[depth] if caches is not None else None
            x = self.dreamer_step(x, depth, seq_cache, depth_cache)

        x = rms_norm(x, self.params["final_norm.gain"], cfg.rms_eps)
        head = self.params["embed.weight" if cfg.tie_embeddings else "head.weight"]
        flat = x.reshape(b * s, h)
        logits = T.matmul(flat, T.transpose(head, (1, 0)))
        return logits.reshape(b, s, cfg.vocab_size)

    def decode(self, prompt: np.ndarray, n_new: int) -> np.ndarray:
        """Greedy continuation; ties go to the lowest token id."""
        prompt = np.asarray(prompt)
        if prompt.ndim == 1:
            prompt = prompt[None, :]
        if prompt.ndim != 2 or prompt.shape[1] == 0:
            raise InputError(f"prompt must be [batch, seq], got shape {prompt.shape}")
        if n_new < 0:
            raise InputError(f"n_new must be >= 0, got {n_new}")
        total = prompt.shape[1] + n_new
        if total > self.cfg.context_length:
            raise InputError(
                f"prompt + n_new = {total} exceeds context {self.cfg.context_length}")
        out = prompt.astype(np.int64).copy()
        if n_new == 0:
            return out
        with T.no_grad():
            caches = self.new_caches()
            logits = self.model_forward(out, caches)
            for step in range(n_new):
                nxt = np.argmax(logits.data[:, -1, :], axis=-1).astype(np.int64)
                out = np.concatenate([out, nxt[:, None]], axis=1)
                if step + 1 < n_new:
                    logits = self.model_forward(nxt[:, None], caches)
        return out
