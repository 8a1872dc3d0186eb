"""Transformer building blocks and the three encoder variants.

Covers the full-sentence bidirectional encoder (teacher), the per-step
recompute encoder (wait-k baseline), the causal left-to-right encoder whose
prefix states never change (incremental student), and the decoder whose last
layer cross-attends to causal states augmented with a projected running mean
of the consumed input embeddings.

All model forwards are batch-first; single-sentence helpers wrap batch 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .waitk import WaitKSchedule, ScheduleError, build_masks


class LengthError(ValueError):
    """Input longer than the configured maximum sequence length."""


@dataclass
class ModelConfig:
    """Shared dimensioning for teacher, student and baseline variants."""

    n_layers: int = 2
    d_model: int = 32
    n_heads: int = 2
    d_ff: int = 64
    src_vocab: int = 32
    tgt_vocab: int = 32
    max_len: int = 64
    k: int = 3

    def __post_init__(self):
        for name in ("n_layers", "d_model", "n_heads", "d_ff",
                     "src_vocab", "tgt_vocab", "max_len", "k"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.d_model % self.n_heads != 0:
            raise ValueError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}"
            )

    @property
    def d_k(self):
        return self.d_model // self.n_heads

    def to_dict(self):
        return {
            "n_layers": self.n_layers,
            "d_model": self.d_model,
            "n_heads": self.n_heads,
            "d_ff": self.d_ff,
            "src_vocab": self.src_vocab,
            "tgt_vocab": self.tgt_vocab,
            "max_len": self.max_len,
            "k": self.k,
        }


@dataclass
class EncoderOutput:
    """Final-layer encoder states for one sentence."""

    states: Tensor
    n: int


def sinusoidal_positions(max_len, d_model):
    """Fixed sine/cosine position table, one row per absolute position."""
    pos = np.arange(max_len, dtype=np.float64)[:, None]
    dim = np.arange(0, d_model, 2, dtype=np.float64)
    div = np.exp(dim * (-math.log(10000.0) / d_model))
    table = np.zeros((max_len, d_model))
    table[:, 0::2] = np.sin(pos * div)
    table[:, 1::2] = np.cos(pos * div[: (d_model + 1) // 2])
    return table


def uniform_init(rng, shape, bound):
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


class Linear:
    def __init__(self, rng, n_out, n_in, bound, bias=True):
        self.w = uniform_init(rng, (n_out, n_in), bound)
        self.b = Tensor(np.zeros(n_out), requires_grad=True) if bias else None

    def __call__(self, x):
        return T.linear(x, self.w, self.b)

    def parameters(self):
        return [self.w] if self.b is None else [self.w, self.b]


class LayerNorm:
    def __init__(self, d):
        self.gain = Tensor(np.ones(d), requires_grad=True)
        self.bias = Tensor(np.zeros(d), requires_grad=True)

    def __call__(self, x):
        return T.layer_norm(x, self.gain, self.bias)

    def parameters(self):
        return [self.gain, self.bias]


def _split_heads(x, n_heads):
    # [..., t, d] -> [..., heads, t, d_k]
    *lead, t, d = x.shape
    x = T.reshape(x, (*lead, t, n_heads, d // n_heads))
    nd = len(lead) + 3
    axes = tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1)
    return T.transpose(x, axes)


def _merge_heads(x):
    # [..., heads, t, d_k] -> [..., t, heads*d_k]
    *lead, h, t, dk = x.shape
    nd = len(lead) + 3
    axes = tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1)
    x = T.transpose(x, axes)
    return T.reshape(x, (*lead, t, h * dk))


class MultiHeadAttention:
    """Scaled dot-product attention with head split/merge and output proj."""

    def __init__(self, rng, cfg):
        bound = 1.0 / math.sqrt(cfg.d_model)
        self.n_heads = cfg.n_heads
        self.scale = 1.0 / math.sqrt(cfg.d_k)
        self.wq = Linear(rng, cfg.d_model, cfg.d_model, bound)
        self.wk = Linear(rng, cfg.d_model, cfg.d_model, bound)
        self.wv = Linear(rng, cfg.d_model, cfg.d_model, bound)
        self.wo = Linear(rng, cfg.d_model, cfg.d_model, bound)

    def __call__(self, queries, memory, mask=None):
        """Attend queries [..., tq, d] over a shared memory [..., tk, d].

        mask broadcasts to the score shape [..., heads, tq, tk]; True keeps.
        """
        qh = _split_heads(self.wq(queries), self.n_heads)
        kh = _split_heads(self.wk(memory), self.n_heads)
        vh = _split_heads(self.wv(memory), self.n_heads)
        scores = T.scale(T.matmul(qh, T.transpose_last(kh)), self.scale)
        att = T.masked_softmax(scores, mask)
        return self.wo(_merge_heads(T.matmul(att, vh)))

    def attend_rows(self, queries, row_memory, mask=None):
        """Attention where every query row has its own memory.

        queries [b, t, d], row_memory [b, t, n, d]; row i attends only over
        row_memory[:, i]. mask broadcasts to [b, heads, t, 1, n].
        """
        b, t, d = queries.shape
        n = row_memory.shape[-2]
        h, dk = self.n_heads, d // self.n_heads
        q = _split_heads(self.wq(queries), h)                  # [b, h, t, dk]
        q = T.reshape(q, (b, h, t, 1, dk))
        k = T.reshape(self.wk(row_memory), (b, t, n, h, dk))
        k = T.transpose(k, (0, 3, 1, 2, 4))                    # [b, h, t, n, dk]
        v = T.reshape(self.wv(row_memory), (b, t, n, h, dk))
        v = T.transpose(v, (0, 3, 1, 2, 4))
        scores = T.scale(T.matmul(q, T.transpose_last(k)), self.scale)
        att = T.masked_softmax(scores, mask)                   # [b, h, t, 1, n]
        out = T.reshape(T.matmul(att, v), (b, h, t, dk))
        return self.wo(_merge_heads(out))

    def parameters(self):
        return (self.wq.parameters() + self.wk.parameters()
                + self.wv.parameters() + self.wo.parameters())


class FeedForward:
    def __init__(self, rng, cfg):
        bound = 1.0 / math.sqrt(cfg.d_model)
        self.w1 = Linear(rng, cfg.d_ff, cfg.d_model, bound)
        self.w2 = Linear(rng, cfg.d_model, cfg.d_ff, bound)

    def __call__(self, x):
        return self.w2(T.relu(self.w1(x)))

    def parameters(self):
        return self.w1.parameters() + self.w2.parameters()


class EncoderLayer:
    """Pre-norm self-attention block followed by a pre-norm feed-forward."""

    def __init__(self, rng, cfg):
        self.ln1 = LayerNorm(cfg.d_model)
        self.attn = MultiHeadAttention(rng, cfg)
        self.ln2 = LayerNorm(cfg.d_model)
        self.ff = FeedForward(rng, cfg)

    def __call__(self, x, mask=None):
        h = self.ln1(x)
        x = T.add(x, self.attn(h, h, mask))
        return T.add(x, self.ff(self.ln2(x)))

    def parameters(self):
        return (self.ln1.parameters() + self.attn.parameters()
                + self.ln2.parameters() + self.ff.parameters())


class Encoder:
    def __init__(self, rng, cfg, vocab):
        bound = 1.0 / math.sqrt(cfg.d_model)
        self.cfg = cfg
        self.embed = uniform_init(rng, (vocab, cfg.d_model), bound)
        self.pe = sinusoidal_positions(cfg.max_len, cfg.d_model)
        self.emb_scale = math.sqrt(cfg.d_model)
        self.layers = [EncoderLayer(rng, cfg) for _ in range(cfg.n_layers)]
        self.final_ln = LayerNorm(cfg.d_model)

    def embed_positions(self, ids):
        n = ids.shape[-1]
        if n > self.cfg.max_len:
            raise LengthError(
                f"sequence length {n} exceeds maximum {self.cfg.max_len}"
            )
        e = T.scale(T.embedding(self.embed, ids), self.emb_scale)
        return T.add(e, Tensor(self.pe[:n]))

    def forward(self, ids, causal, mask=None):
        """Encode ids [b, n]; returns (states [b, n, d], inputs [b, n, d]).

        The second output is the scaled, position-augmented embedding that
        entered the stack (the quantity the averaging bridge consumes).
        """
        e = self.embed_positions(ids)
        if causal and mask is None:
            n = ids.shape[-1]
            mask = np.tril(np.ones((n, n), dtype=bool))
        x = e
        for layer in self.layers:
            x = layer(x, mask)
        return self.final_ln(x), e

    def parameters(self):
        params = [self.embed]
        for layer in self.layers:
            params += layer.parameters()
        return params + self.final_ln.parameters()


class DecoderLayer:
    def __init__(self, rng, cfg):
        self.ln1 = LayerNorm(cfg.d_model)
        self.self_attn = MultiHeadAttention(rng, cfg)
        self.ln2 = LayerNorm(cfg.d_model)
        self.cross_attn = MultiHeadAttention(rng, cfg)
        self.ln3 = LayerNorm(cfg.d_model)
        self.ff = FeedForward(rng, cfg)

    def __call__(self, x, memory, self_mask, cross_mask=None, row_memory=None,
                 row_mask=None):
        h = self.ln1(x)
        x = T.add(x, self.self_attn(h, h, self_mask))
        h = self.ln2(x)
        if row_memory is not None:
            x = T.add(x, self.cross_attn.attend_rows(h, row_memory, row_mask))
        else:
            x = T.add(x, self.cross_attn(h, memory, cross_mask))
        return T.add(x, self.ff(self.ln3(x)))

    def parameters(self):
        return (self.ln1.parameters() + self.self_attn.parameters()
                + self.ln2.parameters() + self.cross_attn.parameters()
                + self.ln3.parameters() + self.ff.parameters())


class Decoder:
    """Causal decoder; optionally feeds per-row memory to its last layer."""

    def __init__(self, rng, cfg):
        bound = 1.0 / math.sqrt(cfg.d_model)
        self.cfg = cfg
        self.embed = uniform_init(rng, (cfg.tgt_vocab, cfg.d_model), bound)
        self.pe = sinusoidal_positions(cfg.max_len, cfg.d_model)
        self.emb_scale = math.sqrt(cfg.d_model)
        self.layers = [DecoderLayer(rng, cfg) for _ in range(cfg.n_layers)]
        self.final_ln = LayerNorm(cfg.d_model)
        self.out = Linear(rng, cfg.tgt_vocab, cfg.d_model, bound)

    def forward(self, ids, memory, cross_mask=None, row_memory=None,
                row_mask=None):
        t = ids.shape[-1]
        if t > self.cfg.max_len:
            raise LengthError(
                f"target length {t} exceeds maximum {self.cfg.max_len}"
            )
        x = T.add(
            T.scale(T.embedding(self.embed, ids), self.emb_scale),
            Tensor(self.pe[:t]),
        )
        self_mask = np.tril(np.ones((t, t), dtype=bool))
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            if row_memory is not None and i == last:
                x = layer(x, memory, self_mask, row_memory=row_memory,
                          row_mask=row_mask)
            else:
                x = layer(x, memory, self_mask, cross_mask)
        return self.out(self.final_ln(x))

    def parameters(self):
        params = [self.embed]
        for layer in self.layers:
            params += layer.parameters()
        return params + self.final_ln.parameters() + self.out.parameters()


# ----------------------------------------------------------------------
# Incremental hidden states (causal states plus averaged-input bridge)


class IncrementalStates:
    """Causal encoder states z plus the per-prefix bridge rows f.

    f[i] is a linear map of the mean of the first i+1 encoder inputs. The
    combined state for a prefix of length g is f[g-1] + z[j] for j < g and
    the zero vector beyond, materialized on demand.
    """

    def __init__(self, z, f):
        self.z = z            # Tensor [n, d]
        self.f = f            # Tensor [n, d]
        self.n = z.shape[0]

    def h_slice(self, i):
        """Rows f_i + z_1..z_i for a prefix of i consumed tokens."""
        if not 1 <= i <= self.n:
            raise ScheduleError(f"prefix length {i} outside 1..{self.n}")
        f_row = T.tslice(self.f, (slice(i - 1, i), slice(None)))
        z_rows = T.tslice(self.z, (slice(0, i), slice(None)))
        return T.add(z_rows, f_row)

    def full_h(self):
        """Dense [n, n, d] tensor; entry [i, j] is zero for j > i."""
        n, d = self.z.shape
        f3 = T.reshape(self.f, (n, 1, d))
        z3 = T.reshape(self.z, (1, n, d))
        keep = np.tril(np.ones((n, n)))[:, :, None]
        return T.mul(T.add(f3, z3), Tensor(keep))


def average_embedding_states(inputs, states, weight):
    """Build IncrementalStates from encoder inputs and causal states.

    inputs and states are [n, d] tensors for one sentence; weight is the
    trainable [d, d] bridge matrix applied to each running mean.
    """
    if inputs.shape != states.shape:
        raise T.DimensionError(
            f"inputs {inputs.shape} and states {states.shape} differ"
        )
    means = T.masked_cumulative_mean(inputs)
    f = T.matmul(means, T.transpose_last(weight))
    return IncrementalStates(states, f)


# ----------------------------------------------------------------------
# Whole models


class TeacherModel:
    """Full-sentence transformer: bidirectional encoder, plain decoder."""

    def __init__(self, cfg, seed=0):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.encoder = Encoder(rng, cfg, cfg.src_vocab)
        self.decoder = Decoder(rng, cfg)

    def forward(self, src_ids, tgt_ids):
        """Teacher-forced pass over batches [b, n] and [b, t].

        Returns (logits [b, t, vocab], encoder states [b, n, d]).
        """
        z, _ = self.encoder.forward(np.asarray(src_ids), causal=False)
        logits = self.decoder.forward(np.asarray(tgt_ids), z)
        return logits, z

    def encode(self, ids):
        """Full-sentence encoding of one sentence."""
        z, _ = self.encoder.forward(np.asarray(ids)[None, :], causal=False)
        out = T.tslice(z, (0,))
        if not np.isfinite(out.values).all():
            raise FloatingPointError("non-finite encoder states")
        return EncoderOutput(out, len(ids))

    def parameters(self):
        return self.encoder.parameters() + self.decoder.parameters()

    def named_parameters(self):
        return _name_params(
            encoder=self.encoder, decoder=self.decoder)


class IncrementalModel:
    """Causal encoder plus a decoder bridged by averaged input embeddings."""

    def __init__(self, cfg, seed=0):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.encoder = Encoder(rng, cfg, cfg.src_vocab)
        self.decoder = Decoder(rng, cfg)
        bound = 1.0 / math.sqrt(cfg.d_model)
        self.bridge_w = uniform_init(rng, (cfg.d_model, cfg.d_model), bound)

    def forward(self, src_ids, tgt_ids, k=None):
        """Teacher-forced wait-k pass; all steps batched via mask matrices.

        Returns (logits [b, t, vocab], causal encoder states [b, n, d]).
        """
        src_ids = np.asarray(src_ids)
        tgt_ids = np.asarray(tgt_ids)
        k = self.cfg.k if k is None else k
        b, n = src_ids.shape
        t = tgt_ids.shape[-1]
        schedule = WaitKSchedule(k, n)
        _, cross = build_masks(schedule, t)

        z, e = self.encoder.forward(src_ids, causal=True)
        means = T.masked_cumulative_mean(e)
        f = T.matmul(means, T.transpose_last(self.bridge_w))   # [b, n, d]
        g_idx = np.array([schedule.read_count(s) - 1 for s in range(1, t + 1)])
        f_rows = T.gather_rows(f, g_idx, axis=1)               # [b, t, d]
        rows = T.add(
            T.reshape(f_rows, (b, t, 1, self.cfg.d_model)),
            T.reshape(z, (b, 1, n, self.cfg.d_model)),
        )
        rows = T.mul(rows, Tensor(cross.astype(float)[None, :, :, None]))
        logits = self.decoder.forward(
            tgt_ids, z,
            cross_mask=cross,
            row_memory=rows,
            row_mask=cross[None, None, :, None, :],
        )
        return logits, z

    def encode(self, ids):
        """Causal encoding of one sentence."""
        z, _ = self.encoder.forward(np.asarray(ids)[None, :], causal=True)
        out = T.tslice(z, (0,))
        if not np.isfinite(out.values).all():
            raise FloatingPointError("non-finite encoder states")
        return EncoderOutput(out, len(ids))

    def incremental_states(self, ids):
        """One-shot causal encoding packaged with the averaging bridge."""
        z, e = self.encoder.forward(np.asarray(ids)[None, :], causal=True)
        return average_embedding_states(
            T.tslice(e, (0,)), T.tslice(z, (0,)), self.bridge_w)

    def decode_step(self, prefix_ids, states, g_t, k=None):
        """Next-token logits for one sentence given a decoder prefix.

        states covers the consumed source (IncrementalStates); row s of the
        rebuilt prefix uses the wait-k coverage for step s, and the current
        step uses g_t consumed tokens.
        """
        k = self.cfg.k if k is None else k
        c = states.n
        if not 1 <= g_t <= c:
            raise ScheduleError(f"g_t {g_t} outside 1..{c}")
        prefix = np.asarray(prefix_ids)
        t = prefix.shape[-1]
        gs = [min(k + s - 1, g_t) for s in range(1, t + 1)]
        gs[-1] = g_t
        cross = np.zeros((t, c), dtype=bool)
        for s, g in enumerate(gs):
            cross[s, :g] = True
        f_rows = T.gather_rows(states.f, np.array(gs) - 1, axis=0)
        rows = T.add(
            T.reshape(f_rows, (1, t, 1, self.cfg.d_model)),
            T.reshape(states.z, (1, 1, c, self.cfg.d_model)),
        )
        rows = T.mul(rows, Tensor(cross.astype(float)[None, :, :, None]))
        z_b = T.reshape(states.z, (1, c, self.cfg.d_model))
        logits = self.decoder.forward(
            prefix[None, :], z_b,
            cross_mask=cross,
            row_memory=rows,
            row_mask=cross[None, None, :, None, :],
        )
        return T.tslice(logits, (0, t - 1))

    def start_stream(self):
        return StreamingEncoder(self)

    def parameters(self):
        return (self.encoder.parameters() + self.decoder.parameters()
                + [self.bridge_w])

    def named_parameters(self):
        named = _name_params(encoder=self.encoder, decoder=self.decoder)
        named["bridge_w"] = self.bridge_w
        return named


class StreamingEncoder:
    """Key/value-cached causal encoder consuming one token at a time.

    Appending a token never changes earlier states; concatenating the
    returned rows reproduces the batch encoding of the same prefix.
    """

    def __init__(self, model):
        self.model = model
        cfg = model.cfg
        self.count = 0
        self.running_sum = np.zeros(cfg.d_model)
        self._keys = [None] * cfg.n_layers    # per layer [heads, c, d_k]
        self._vals = [None] * cfg.n_layers
        self._z_rows = []
        self._f_rows = []

    def push(self, token_id):
        """Consume one source token; returns its encoder state row [d]."""
        cfg = self.model.cfg
        enc = self.model.encoder
        pos = self.count
        if pos >= cfg.max_len:
            raise LengthError(
                f"stream length {pos + 1} exceeds maximum {cfg.max_len}"
            )
        with T.no_grad():
            ids = np.array([[token_id]])
            e = T.add(
                T.scale(T.embedding(enc.embed, ids), enc.emb_scale),
                Tensor(enc.pe[pos:pos + 1]),
            )                                                  # [1, 1, d]
            x = e
            for i, layer in enumerate(self.model.encoder.layers):
                h = layer.ln1(x)
                att = layer.attn
                q = _split_heads(att.wq(h), att.n_heads)       # [1, h, 1, dk]
                k_new = _split_heads(att.wk(h), att.n_heads)
                v_new = _split_heads(att.wv(h), att.n_heads)
                if self._keys[i] is None:
                    k_all = k_new.values[0]
                    v_all = v_new.values[0]
                else:
                    k_all = np.concatenate([self._keys[i], k_new.values[0]], axis=1)
                    v_all = np.concatenate([self._vals[i], v_new.values[0]], axis=1)
                self._keys[i] = k_all
                self._vals[i] = v_all
                scores = T.scale(
                    T.matmul(q, T.transpose_last(Tensor(k_all[None]))),
                    att.scale,
                )
                weights = T.masked_softmax(scores)             # [1, h, 1, c]
                ctx = T.matmul(weights, Tensor(v_all[None]))
                x = T.add(x, att.wo(_merge_heads(ctx)))
                x = T.add(x, layer.ff(layer.ln2(x)))
            z_row = enc.final_ln(x)                            # [1, 1, d]

            self.running_sum = self.running_sum + e.values[0, 0]
            self.count += 1
            mean = Tensor((self.running_sum / self.count)[None, :])
            f_row = T.matmul(mean, T.transpose_last(self.model.bridge_w))
        self._z_rows.append(z_row.values[0, 0])
        self._f_rows.append(f_row.values[0])
        return self._z_rows[-1]

    def mean_embedding(self):
        """Running mean of the consumed, position-augmented inputs."""
        if self.count == 0:
            raise ScheduleError("no tokens consumed")
        return self.running_sum / self.count

    @property
    def states(self):
        """IncrementalStates view over everything consumed so far."""
        return IncrementalStates(
            Tensor(np.array(self._z_rows)),
            Tensor(np.array(self._f_rows)),
        )


def _name_params(**groups):
    named = {}
    for prefix, module in groups.items():
        stack = [(prefix, module)]
        for name, mod in stack:
            if isinstance(mod, Tensor):
                named[name] = mod
                continue
            if isinstance(mod, list):
                for i, item in enumerate(mod):
                    stack.append((f"{name}.{i}", item))
                continue
            for attr in ("embed", "w", "b", "gain", "bias", "layers", "ln1",
                         "ln2", "ln3", "attn", "self_attn", "cross_attn",
                         "ff", "wq", "wk", "wv", "wo", "w1", "w2",
                         "final_ln", "out"):
                child = getattr(mod, attr, None)
                if child is not None:
                    stack.append((f"{name}.{attr}", child))
    return named


# ----------------------------------------------------------------------
# Encoder-variant surfaces


def encode_bidirectional(encoder, ids):
    """Full self-attention encoding of one sentence."""
    z, _ = encoder.forward(np.asarray(ids)[None, :], causal=False)
    out = T.tslice(z, (0,))
    if not np.isfinite(out.values).all():
        raise FloatingPointError("non-finite encoder states")
    return EncoderOutput(out, len(ids))


def encode_unidirectional(encoder, ids):
    """Causal encoding; position i attends to positions <= i only."""
    z, _ = encoder.forward(np.asarray(ids)[None, :], causal=True)
    out = T.tslice(z, (0,))
    if not np.isfinite(out.values).all():
        raise FloatingPointError("non-finite encoder states")
    return EncoderOutput(out, len(ids))


def encode_waitk_recompute(encoder, ids, schedule, t_steps):
    """Baseline encoder: re-encode the consumed prefix as it grows.

    Runs one full-width masked bidirectional pass per distinct prefix
    length in the schedule (a fresh recompute every time a source token is
    read), and reuses the previous pass while the prefix is unchanged.
    Returns [t_steps, n, d] with rows past the prefix zeroed.
    """
    if t_steps < 1:
        raise ScheduleError(f"t_steps must be >= 1, got {t_steps}")
    ids = np.asarray(ids)
    n = ids.shape[-1]
    out = np.zeros((t_steps, n, encoder.cfg.d_model))
    prev_g = None
    current = None
    for t in range(1, t_steps + 1):
        g = schedule.read_count(t)
        if g != prev_g:
            mask = np.zeros((n, n), dtype=bool)
            mask[:g, :g] = True
            z, _ = encoder.forward(ids[None, :], causal=False, mask=mask)
            current = np.zeros((n, encoder.cfg.d_model))
            current[:g] = z.values[0, :g]
            prev_g = g
        out[t - 1] = current
    return Tensor(out)
