"""Pre-norm transformer block shared by the image and text towers."""

import math

import numpy as np

from . import numerics as nx


def init_block(store, prefix, d, mlp_hidden, group):
    store.ones(f"{prefix}.ln1.g", (d,), group)
    store.zeros(f"{prefix}.ln1.b", (d,), group)
    for w in ("q", "k", "v", "o"):
        store.normal(f"{prefix}.attn.{w}.w", (d, d), group)
        # a key bias shifts each query's scores uniformly, which softmax ignores
        if w != "k":
            store.zeros(f"{prefix}.attn.{w}.b", (d,), group)
    store.ones(f"{prefix}.ln2.g", (d,), group)
    store.zeros(f"{prefix}.ln2.b", (d,), group)
    store.normal(f"{prefix}.mlp.fc1.w", (d, mlp_hidden), group)
    store.zeros(f"{prefix}.mlp.fc1.b", (mlp_hidden,), group)
    store.normal(f"{prefix}.mlp.fc2.w", (mlp_hidden, d), group)
    store.zeros(f"{prefix}.mlp.fc2.b", (d,), group)


def _heads(x, h):
    B, T, d = x.shape
    return x.reshape(B, T, h, d // h).transpose(0, 2, 1, 3).reshape(B * h, T, d // h)


def attention(x, store, prefix, num_heads, key_bias=None, trace=None):
    """Multi-head self-attention on ``x`` of shape (B, T, d).

    ``key_bias`` is an additive (B, T) array (0 or -inf) masking keys.
    When ``trace`` is a list the per-head probabilities are appended to it.
    """
    B, T, d = x.shape
    p = lambda n: store[f"{prefix}.attn.{n}"]  # noqa: E731
    q = _heads(nx.linear(x, p("q.w"), p("q.b")), num_heads)
    k = _heads(nx.linear(x, p("k.w")), num_heads)
    v = _heads(nx.linear(x, p("v.w"), p("v.b")), num_heads)
    scores = nx.scale(nx.matmul(q, k.transpose(0, 2, 1)), 1.0 / math.sqrt(d // num_heads))
    if key_bias is not None:
        bias = np.repeat(np.asarray(key_bias, dtype=np.float64), num_heads, axis=0)[:, None, :]
        scores = nx.add_const(scores, bias)
    probs = nx.softmax(scores)
    if trace is not None:
        trace.append(probs.data.reshape(B, num_heads, T, T))
    ctx = nx.matmul(probs, v).reshape(B, num_heads, T, d // num_heads)
    ctx = ctx.transpose(0, 2, 1, 3).reshape(B, T, d)
    return nx.linear(ctx, p("o.w"), p("o.b"))


def block(x, store, prefix, num_heads, key_bias=None, trace=None):
    """LN -> MHSA -> residual -> LN -> MLP -> residual."""
    g = lambda n: store[f"{prefix}.{n}"]  # noqa: E731
    h = nx.layer_norm(x, g("ln1.g"), g("ln1.b"))
    x = nx.add(x, attention(h, store, prefix, num_heads, key_bias, trace))
    h = nx.layer_norm(x, g("ln2.g"), g("ln2.b"))
    h = nx.gelu(nx.linear(h, g("mlp.fc1.w"), g("mlp.fc1.b")))
    return nx.add(x, nx.linear(h, g("mlp.fc2.w"), g("mlp.fc2.b")))
