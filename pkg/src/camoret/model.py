"""CECNet assembly: shared-weight dual-branch image tower, text tower, heads."""

from dataclasses import asdict, dataclass, field

import numpy as np

from . import numerics as nx
from .c2ga import FUSIONS, Confidence, C2GAFusion
from .cod import apply_mask
from .errors import ConfigError
from .params import ParamStore
from .text import TextConfig, TextEncoder
from .vit import EncoderConfig, ViTEncoder, encode, patchify

FUSION_CHOICES = ("none",) + tuple(FUSIONS)


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    text: TextConfig = field(default_factory=TextConfig)
    fusion: str = "c2ga"
    aggregate_normalize: bool = False

    def __post_init__(self):
        if isinstance(self.encoder, dict):
            self.encoder = EncoderConfig(**self.encoder)
        if isinstance(self.text, dict):
            self.text = TextConfig(**self.text)
        if self.fusion not in FUSION_CHOICES:
            raise ConfigError(f"unknown fusion {self.fusion!r}; choose from {FUSION_CHOICES}")
        if self.text.embed_dim != self.encoder.embed_dim:
            raise ConfigError("text and image towers must share the embedding width")

    def to_dict(self):
        return asdict(self)


@dataclass
class ModelInputs:
    """Pre-patchified images and per-sample mask confidences for one split."""

    patches: np.ndarray
    tokens: list
    expert_patches: np.ndarray | None = None
    confidence: Confidence | None = None

    def __len__(self):
        return len(self.tokens)

    def take(self, idx):
        idx = np.asarray(idx)
        return ModelInputs(
            self.patches[idx],
            [self.tokens[i] for i in idx],
            None if self.expert_patches is None else self.expert_patches[idx],
            None if self.confidence is None else self.confidence.take(idx),
        )


def prepare_inputs(images, tokens, masks, P, use_expert=True):
    """Patchify images, masked images ``M * I`` and pool mask confidences."""
    images = np.asarray(images, dtype=np.float64)
    patches = patchify(images, P)
    if not use_expert:
        return ModelInputs(patches, list(tokens))
    masks = np.asarray(masks, dtype=np.float64)
    expert = patchify(apply_mask(images, masks), P)
    return ModelInputs(patches, list(tokens), expert, Confidence.from_masks(masks, P))


class CECNet:
    """Parameter groups: ``vit`` (shared image encoder), ``fusion``
    (per-block fusion modules), ``head`` (image projection), ``text``."""

    def __init__(self, cfg=None, seed=0):
        self.cfg = cfg or ModelConfig()
        self.seed = seed
        enc, d = self.cfg.encoder, self.cfg.encoder.embed_dim
        self.store = ParamStore(seed)
        self.vit = ViTEncoder(enc, self.store)
        if self.cfg.fusion == "none":
            self.fusion = None
        elif self.cfg.fusion == "c2ga":
            self.fusion = C2GAFusion(self.store, enc.num_blocks, d,
                                     normalize=self.cfg.aggregate_normalize)
        else:
            self.fusion = FUSIONS[self.cfg.fusion](self.store, enc.num_blocks, d)
        self.store.ones("head.ln.g", (d,), "head")
        self.store.zeros("head.ln.b", (d,), "head")
        self.store.normal("head.proj.w", (d, d), "head")
        self.store.zeros("head.proj.b", (d,), "head")
        self.text = TextEncoder(self.cfg.text, self.store)

    @property
    def uses_expert(self):
        return self.fusion is not None

    def image_tokens(self, inputs, trace=None):
        """Run both branches; returns (global levels, expert levels or None)."""
        expert_levels = None
        if self.fusion is not None:
            if inputs.expert_patches is None:
                raise ConfigError("this model needs expert-branch inputs (masks)")
            if any(p.requires_grad for p in self.vit.parameters()):
                expert_levels, _ = encode(self.vit, patches=inputs.expert_patches, branch="expert")
            else:
                with nx.no_grad():
                    expert_levels, _ = encode(self.vit, patches=inputs.expert_patches,
                                              branch="expert")
        levels, _ = encode(self.vit, patches=inputs.patches, branch="global",
                           expert_levels=expert_levels, fusion=self.fusion,
                           confidence=inputs.confidence, trace=trace)
        return levels, expert_levels

    def image_features(self, inputs):
        levels, _ = self.image_tokens(inputs)
        cls = levels[-1].cls
        s = self.store
        h = nx.layer_norm(cls, s["head.ln.g"], s["head.ln.b"])
        return nx.linear(h, s["head.proj.w"], s["head.proj.b"])

    def text_features(self, tokens):
        return self.text(tokens)

    def embed(self, inputs, chunk=64):
        """Inference-mode L2-normalised (V, T) for a whole split."""
        V, T = [], []
        with nx.no_grad():
            for start in range(0, len(inputs), chunk):
                part = inputs.take(np.arange(start, min(start + chunk, len(inputs))))
                V.append(nx.l2_normalize(self.image_features(part)).data)
                T.append(nx.l2_normalize(self.text_features(part.tokens)).data)
        return np.concatenate(V), np.concatenate(T)
