"""Confidence-conditioned graph attention (C2GA) and the fusion variants.

One fusion module sits after every encoder block of the global branch and
rewrites only the CLS token, using the expert branch's tokens at the same
level and per-patch camouflage confidences pooled from the mask.

Node layout for both graphs: ``[global tokens 0..N, expert tokens 0..N]``,
so node 0 (the global CLS) is the only aggregation destination.
"""

import numpy as np

from . import numerics as nx
from .errors import ConfigError, StructuralError
from .cod import SoftMask

COS_EPS = 1e-12


def patch_confidence(mask, P):
    """Max-pool a (H, W) or (B, H, W) mask over P x P patches.

    Returns (N+1,) or (B, N+1) with slot 0 (CLS) left as NaN; the graph
    builders fill it.
    """
    m = mask.values if isinstance(mask, SoftMask) else np.asarray(mask, dtype=np.float64)
    single = m.ndim == 2
    if single:
        m = m[None]
    B, H, W = m.shape
    if H % P or W % P:
        raise ConfigError(f"patch size {P} does not divide mask {H}x{W}")
    pooled = m.reshape(B, H // P, P, W // P, P).max(axis=(2, 4)).reshape(B, -1)
    conf = np.concatenate([np.full((B, 1), np.nan), pooled], axis=1)
    return conf[0] if single else conf


def build_fg_confidences(pc):
    """Foreground graph: both CLS slots 1, patch slots copied to both sides."""
    pc = np.asarray(pc, dtype=np.float64)
    side = pc.copy()
    side[..., 0] = 1.0
    return np.concatenate([side, side], axis=-1)


def build_bg_confidences(pc):
    """Background graph: global side uses 1 - conf (CLS 1), expert side all 0."""
    pc = np.asarray(pc, dtype=np.float64)
    g = 1.0 - pc
    g[..., 0] = 1.0
    return np.concatenate([g, np.zeros_like(pc)], axis=-1)


def project_subspaces(tokens, w, b):
    """Shared linear map d -> d split into (obj, env) halves of width d/2."""
    d = tokens.shape[-1]
    if d % 2:
        raise ConfigError(f"subspace split needs even width, got {d}")
    z = nx.linear(tokens, w, b)
    ds = d // 2
    return z[..., :ds], z[..., ds:]


def cls_aggregate(nodes, conf, normalize=False):
    """Aggregate node features into node 0 with confidence-weighted cosine edges.

    ``W_0j = conf_0 * conf_j * cos(v_0, v_j)`` (self-edge included, no
    softmax); returns ``sum_j W_0j v_j``. ``nodes`` is (M, ds) or (B, M, ds)
    and ``conf`` (M,) or (B, M). Zero-norm nodes contribute cosine 0.
    """
    single = nodes.ndim == 2
    if single:
        nodes = nodes.reshape(1, *nodes.shape)
        conf = np.asarray(conf, dtype=np.float64)[None]
    conf = np.asarray(conf, dtype=np.float64)
    B, M, _ = nodes.shape
    if conf.shape != (B, M):
        raise StructuralError(f"confidence shape {conf.shape} does not match nodes {nodes.shape}")
    unit = nx.l2_normalize(nodes, eps=COS_EPS)
    cos = nx.matmul(unit[:, 0:1, :], unit.transpose(0, 2, 1))  # (B, 1, M)
    weights = nx.mul_const(cos, (conf[:, :1] * conf)[:, None, :])
    out = nx.matmul(weights, nodes).reshape(B, nodes.shape[-1])
    if normalize:
        out = nx.scale(out, 1.0 / M)
    return out.reshape(nodes.shape[-1]) if single else out


def adf_fuse(A0, E0, G0, w, b):
    """Adaptive gating: ``sigmoid(f([A0, E0, G0]))`` weights each stacked feature, then sum."""
    stacked = nx.concat([A0, E0, G0], axis=-1)
    gates = nx.sigmoid(nx.linear(stacked, w, b))
    gated = nx.mul(gates, stacked)
    lead = stacked.shape[:-1]
    d = A0.shape[-1]
    return gated.reshape(lead + (3, d)).sum(axis=len(lead))


def _replace_cls(G, F0):
    B, T, d = G.shape
    return nx.concat([F0.reshape(B, 1, d), G[:, 1:, :]], axis=1)


def c2ga_step(G, E, conf_fg, conf_bg, store, prefix, normalize=False):
    """Fuse expert tokens ``E`` into the CLS of global tokens ``G`` (both (B, N+1, d))."""
    if G.shape != E.shape:
        raise StructuralError(f"global {G.shape} and expert {E.shape} sequences differ")
    p = lambda n: store[f"{prefix}.{n}"]  # noqa: E731
    g_obj, g_env = project_subspaces(G, p("proj.w"), p("proj.b"))
    e_obj, e_env = project_subspaces(E, p("proj.w"), p("proj.b"))
    a_obj = cls_aggregate(nx.concat([g_obj, e_obj], axis=1), conf_fg, normalize)
    a_env = cls_aggregate(nx.concat([g_env, e_env], axis=1), conf_bg, normalize)
    A0 = nx.linear(nx.concat([a_obj, a_env], axis=-1), p("out.w"), p("out.b"))
    F0 = adf_fuse(A0, E[:, 0, :], G[:, 0, :], p("gate.w"), p("gate.b"))
    return _replace_cls(G, F0)


def init_c2ga(store, prefix, d, group="fusion"):
    store.normal(f"{prefix}.proj.w", (d, d), group)
    store.zeros(f"{prefix}.proj.b", (d,), group)
    store.normal(f"{prefix}.out.w", (d, d), group)
    store.zeros(f"{prefix}.out.b", (d,), group)
    store.normal(f"{prefix}.gate.w", (3 * d, 3 * d), group)
    store.zeros(f"{prefix}.gate.b", (3 * d,), group)


class Confidence:
    """Per-sample graph confidences derived from one batch of masks."""

    def __init__(self, pc):
        self.patch = np.asarray(pc, dtype=np.float64)
        self.fg = build_fg_confidences(self.patch)
        self.bg = build_bg_confidences(self.patch)

    @classmethod
    def from_masks(cls, masks, P):
        return cls(patch_confidence(masks, P))

    def take(self, idx):
        return Confidence(self.patch[idx])


class Fusion:
    """Per-block fusion of expert tokens into the global CLS token."""

    name = "none"
    uses_confidence = False

    def __init__(self, store, num_blocks, d, prefix="fusion"):
        self.store = store
        self.num_blocks = num_blocks
        self.d = d
        self.prefix = prefix
        for l in range(num_blocks):
            self.init_block(f"{prefix}.block{l}")

    def init_block(self, prefix):
        pass

    def step(self, G, E, confidence, l):
        raise NotImplementedError


class C2GAFusion(Fusion):
    name = "c2ga"
    uses_confidence = True

    def __init__(self, store, num_blocks, d, prefix="fusion", normalize=False):
        self.normalize = normalize
        super().__init__(store, num_blocks, d, prefix)

    def init_block(self, prefix):
        init_c2ga(self.store, prefix, self.d)

    def graph_confidences(self, confidence):
        return confidence.fg, confidence.bg

    def step(self, G, E, confidence, l):
        fg, bg = self.graph_confidences(confidence)
        return c2ga_step(G, E, fg, bg, self.store, f"{self.prefix}.block{l}", self.normalize)


class VanillaGraphFusion(C2GAFusion):
    """B3: the same graph machinery with every node confidence set to 1."""

    name = "graph"
    uses_confidence = False

    def graph_confidences(self, confidence):
        ones = np.ones_like(confidence.fg)
        return ones, ones


class AddFusion(Fusion):
    """B1: global CLS plus expert CLS."""

    name = "add"

    def step(self, G, E, confidence, l):
        return _replace_cls(G, nx.add(G[:, 0, :], E[:, 0, :]))


class LinearFusion(Fusion):
    """B2: linear layer over the concatenated CLS pair."""

    name = "linear"

    def init_block(self, prefix):
        self.store.normal(f"{prefix}.w", (2 * self.d, self.d), "fusion")
        self.store.zeros(f"{prefix}.b", (self.d,), "fusion")

    def step(self, G, E, confidence, l):
        p = f"{self.prefix}.block{l}"
        cat = nx.concat([G[:, 0, :], E[:, 0, :]], axis=-1)
        return _replace_cls(G, nx.linear(cat, self.store[f"{p}.w"], self.store[f"{p}.b"]))


FUSIONS = {
    "c2ga": C2GAFusion,
    "graph": VanillaGraphFusion,
    "add": AddFusion,
    "linear": LinearFusion,
}
