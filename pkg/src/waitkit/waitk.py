"""Wait-k read/write scheduling, mask construction, streaming greedy
decoding, and the Average Lagging latency metric.

The schedule reads k source tokens up front, then alternates one write with
one read; after the source runs out, writes continue unconstrained until an
end-of-sequence token or a length cap.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .tensor import no_grad

BOS_ID = 1
EOS_ID = 2


class ScheduleError(ValueError):
    """A step or prefix length outside the schedule's domain."""


@dataclass
class WaitKSchedule:
    """Read counts for a wait-k policy over a source of known length."""

    k: int
    n: int

    def __post_init__(self):
        if self.k < 1:
            raise ScheduleError(f"k must be positive, got {self.k}")
        if self.n < 1:
            raise ScheduleError(f"source length must be positive, got {self.n}")

    def read_count(self, t):
        """Number of source tokens consumed when emitting target token t."""
        if t < 1:
            raise ScheduleError(f"step index must be >= 1, got {t}")
        return min(self.k + t - 1, self.n)


@dataclass
class DecodeTrace:
    """Realized read/write record of one decode.

    g_values[i] is the consumed-source count when the i-th target token was
    emitted; the end-of-sequence token is not part of the trace.
    """

    g_values: list
    src_len: int
    tokens: list

    def __post_init__(self):
        if len(self.g_values) != len(self.tokens):
            raise ValueError("one read count per emitted token required")
        if any(b < a for a, b in zip(self.g_values, self.g_values[1:])):
            raise ValueError("read counts must be non-decreasing")

    @property
    def tgt_len(self):
        return len(self.tokens)

    @property
    def truncated(self):
        """True when decoding ended before the source was fully read."""
        return self.src_len not in self.g_values

    def to_json_line(self):
        return json.dumps(
            {
                "g": list(map(int, self.g_values)),
                "src_len": int(self.src_len),
                "tgt_len": int(self.tgt_len),
                "tokens": list(map(int, self.tokens)),
            },
            separators=(",", ":"),
        )

    @classmethod
    def from_json_line(cls, line):
        rec = json.loads(line)
        return cls(rec["g"], rec["src_len"], rec["tokens"])


def build_masks(schedule, t_steps):
    """Boolean masks for single-pass batched wait-k training.

    Returns (causal [n, n], cross [t_steps, n]): the causal mask lets source
    position i see positions <= i; cross row t exposes the first read_count(t)
    source positions to the decoder.
    """
    if t_steps < 1:
        raise ScheduleError(f"t_steps must be >= 1, got {t_steps}")
    n = schedule.n
    causal = np.tril(np.ones((n, n), dtype=bool))
    cross = np.zeros((t_steps, n), dtype=bool)
    for t in range(1, t_steps + 1):
        cross[t - 1, : schedule.read_count(t)] = True
    return causal, cross


def streaming_decode(model, source, k, max_len=None, bos_id=BOS_ID,
                     eos_id=EOS_ID, on_emit=None):
    """Greedy wait-k decode over a source token stream.

    source may be any iterable of token ids; tokens are pulled lazily, so
    the decoder never touches a position the schedule has not read. Once the
    stream is exhausted, decoding continues on the full consumed source until
    eos or the cap (max_len, default 2 * src_len + 5). on_emit, when given,
    is called with each token the moment it is emitted.

    Returns (emitted token ids, DecodeTrace); eos is not part of either.
    """
    if max_len is not None and max_len < 1:
        raise ScheduleError(f"max_len must be >= 1, got {max_len}")
    stream = iter(source)
    encoder_state = model.start_stream()
    consumed = 0
    exhausted = False

    def read_one():
        nonlocal consumed, exhausted
        try:
            token = next(stream)
        except StopIteration:
            exhausted = True
            return
        encoder_state.push(token)
        consumed += 1

    tokens = []
    g_values = []
    with no_grad():
        t = 1
        while True:
            while not exhausted and consumed < k + t - 1:
                read_one()
            if consumed == 0:
                raise ScheduleError("cannot decode an empty source")
            g_t = min(k + t - 1, consumed)
            prefix = [bos_id] + tokens
            logits = model.decode_step(prefix, encoder_state.states, g_t, k)
            next_id = int(np.argmax(logits.values))
            if next_id == eos_id:
                break
            tokens.append(next_id)
            g_values.append(g_t)
            if on_emit is not None:
                on_emit(next_id)
            cap = max_len if max_len is not None else (
                2 * consumed + 5 if exhausted else None
            )
            if cap is not None and len(tokens) >= cap:
                break
            t += 1
    return tokens, DecodeTrace(g_values, consumed, tokens)


def average_lagging(trace):
    """Average Lagging of a decode trace, in source-token units.

    Averages g(i) minus the ideal diagonal (i-1) / (|y|/|x|) over steps
    until the source is fully read; a trace that never reads the full
    source is averaged over all its steps instead (see trace.truncated).
    """
    if trace.tgt_len == 0:
        raise ScheduleError("trace has no emissions")
    if trace.truncated:
        tau = trace.tgt_len
    else:
        tau = trace.g_values.index(trace.src_len) + 1
    rate = trace.tgt_len / trace.src_len
    total = 0.0
    for i in range(1, tau + 1):
        total += trace.g_values[i - 1] - (i - 1) / rate
    return total / tau
