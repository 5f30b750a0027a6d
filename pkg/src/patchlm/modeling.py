"""Toy patch-as-token VLM: vision backbone(s), per-patch projector, byte-level LM.

The visual backbone is a small ViT whose patch features are read from the
penultimate block. Features from two backbones with matching patch grids can
be fused by per-patch channel concatenation. Projected patch embeddings are
prepended (left of the prompt) to the LM input sequence; the loss is the mean
next-token negative log-likelihood over response positions only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import tokenizer as tok
from .images import GranularityError, NormStats, ProcessedImage, RawImage, patch_grid, process_image

SYSTEM_PROMPT = (
    "A chat between a curious user and an artificial intelligence assistant. "
    "The assistant gives helpful, detailed, and polite answers to the user's questions."
)

PROMPT_STYLES = ("base", "instruct")


class ContextOverflowError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Configs


@dataclass
class BackboneConfig:
    name: str = "toy-vit"
    patch_size: int = 14
    dim: int = 64
    depth: int = 4
    heads: int = 4


@dataclass
class ModelConfig:
    backbones: list = field(default_factory=lambda: [BackboneConfig()])
    projector_hidden: int = 128
    lm_dim: int = 128
    lm_depth: int = 4
    lm_heads: int = 4
    max_context: int = 512
    prompt_style: str = "base"
    image_scheme: str = "letterbox"
    image_resolution: int = 224
    norm_mean: tuple = (0.5, 0.5, 0.5)
    norm_std: tuple = (0.5, 0.5, 0.5)

    def __post_init__(self):
        self.backbones = [
            b if isinstance(b, BackboneConfig) else BackboneConfig(**b) for b in self.backbones
        ]
        if self.prompt_style not in PROMPT_STYLES:
            raise ValueError(f"unknown prompt style {self.prompt_style!r}")

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# Prompt templating


@dataclass
class PromptEncoding:
    text: str
    tokens: list  # token ids incl. BOS (and EOS when a response is present)
    loss_mask: list  # True only on response tokens and EOS


def render_prompt_text(style: str, user_text: str, response_text: str | None = None) -> str:
    """Byte-exact visible text for a prompt/response pair (excl. BOS/EOS)."""
    if style == "instruct":
        prefix = f"{SYSTEM_PROMPT} USER: {user_text} ASSISTANT: "
    elif style == "base":
        prefix = f"In: {user_text} Out: "
    else:
        raise ValueError(f"unknown prompt style {style!r}")
    return prefix if response_text is None else prefix + response_text


def format_prompt(style: str, user_text: str, response_text: str | None = None) -> PromptEncoding:
    if not user_text:
        raise ValueError("user_text must be nonempty")
    prefix = render_prompt_text(style, user_text, None)
    prefix_ids = tok.encode(prefix)
    tokens = [tok.BOS_ID] + prefix_ids
    mask = [False] * len(tokens)
    if response_text is not None:
        resp_ids = tok.encode(response_text)
        tokens += resp_ids + [tok.EOS_ID]
        mask += [True] * (len(resp_ids) + 1)
    text = prefix if response_text is None else prefix + response_text
    return PromptEncoding(text=text, tokens=tokens, loss_mask=mask)


# ---------------------------------------------------------------------------
# Transformer pieces


def sinusoidal_positions(length: int, dim: int, dtype=torch.float32) -> torch.Tensor:
    if dim % 2 != 0:
        raise ValueError("embedding dim must be even")
    pos = torch.arange(length, dtype=torch.float64).unsqueeze(1)
    idx = torch.arange(0, dim, 2, dtype=torch.float64)
    angles = pos / torch.pow(torch.tensor(10000.0, dtype=torch.float64), idx / dim)
    enc = torch.zeros(length, dim, dtype=torch.float64)
    enc[:, 0::2] = torch.sin(angles)
    enc[:, 1::2] = torch.cos(angles)
    return enc.to(dtype)


class SelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int, causal: bool):
        super().__init__()
        if dim % heads != 0:
            raise ValueError("dim must be divisible by heads")
        self.heads = heads
        self.causal = causal
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, t, d = x.shape
        hd = d // self.heads
        q, k, v = self.qkv(x).chunk(3, dim=-1)
        q = q.view(b, t, self.heads, hd).transpose(1, 2)
        k = k.view(b, t, self.heads, hd).transpose(1, 2)
        v = v.view(b, t, self.heads, hd).transpose(1, 2)
        att = (q @ k.transpose(-2, -1)) / math.sqrt(hd)
        if self.causal:
            mask = torch.triu(torch.ones(t, t, dtype=torch.bool, device=x.device), diagonal=1)
            att = att.masked_fill(mask, float("-inf"))
        att = F.softmax(att, dim=-1)
        out = (att @ v).transpose(1, 2).reshape(b, t, d)
        return self.proj(out)


class Block(nn.Module):
    def __init__(self, dim: int, heads: int, causal: bool):
        super().__init__()
        self.ln1 = nn.LayerNorm(dim)
        self.attn = SelfAttention(dim, heads, causal)
        self.ln2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, 4 * dim), nn.GELU(), nn.Linear(4 * dim, dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.ln1(x))
        return x + self.mlp(self.ln2(x))


# ---------------------------------------------------------------------------
# Vision backbone / patch features / projector


@dataclass
class PatchFeatures:
    values: torch.Tensor  # [B, L, width]
    source: str

    @property
    def length(self) -> int:
        return self.values.shape[-2]

    @property
    def width(self) -> int:
        return self.values.shape[-1]


class VisionBackbone(nn.Module):
    """Tiny ViT; patch features are the penultimate block's output."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        if cfg.depth < 2:
            raise ValueError("backbone needs >= 2 blocks for a penultimate layer")
        self.cfg = cfg
        self.patch_embed = nn.Linear(3 * cfg.patch_size**2, cfg.dim)
        self.blocks = nn.ModuleList(Block(cfg.dim, cfg.heads, causal=False) for _ in range(cfg.depth))

    def forward(self, images: torch.Tensor) -> PatchFeatures:
        """images: [B, side, side, 3] processed floats."""
        b, side, side2, _ = images.shape
        p = self.cfg.patch_size
        grid = patch_grid(side, p)  # raises GranularityError on mismatch
        n = grid.patches_per_side
        x = images.permute(0, 3, 1, 2)  # [B,3,S,S]
        x = x.unfold(2, p, p).unfold(3, p, p)  # [B,3,n,n,p,p]
        x = x.permute(0, 2, 3, 1, 4, 5).reshape(b, n * n, 3 * p * p)
        h = self.patch_embed(x)
        h = h + sinusoidal_positions(n * n, self.cfg.dim, dtype=h.dtype).to(h.device)
        for block in self.blocks[:-1]:
            h = block(h)
        return PatchFeatures(values=h, source=self.cfg.name)


def fuse_features(a: PatchFeatures, b: PatchFeatures) -> PatchFeatures:
    """Per-patch channel concatenation of two feature sequences."""
    if a.length != b.length:
        raise GranularityError(
            f"patch-grid mismatch: {a.length} vs {b.length} patches cannot be fused"
        )
    return PatchFeatures(
        values=torch.cat([a.values, b.values], dim=-1), source=f"{a.source}+{b.source}"
    )


class Projector(nn.Module):
    """2-layer MLP with GELU, applied independently per patch."""

    def __init__(self, input_dim: int, hidden_dim: int, output_dim: int):
        super().__init__()
        self.input_dim = input_dim
        self.fc1 = nn.Linear(input_dim, hidden_dim)
        self.fc2 = nn.Linear(hidden_dim, output_dim)

    def forward(self, feats: torch.Tensor) -> torch.Tensor:
        if feats.shape[-1] != self.input_dim:
            raise ValueError(f"feature width {feats.shape[-1]} != projector input {self.input_dim}")
        return self.fc2(F.gelu(self.fc1(feats)))


# ---------------------------------------------------------------------------
# Language model


class ToyLM(nn.Module):
    def __init__(self, dim: int, depth: int, heads: int, max_context: int, style: str):
        super().__init__()
        self.dim = dim
        self.max_context = max_context
        self.style = style
        self.embed = nn.Embedding(tok.VOCAB_SIZE, dim)
        self.blocks = nn.ModuleList(Block(dim, heads, causal=True) for _ in range(depth))
        self.ln_f = nn.LayerNorm(dim)
        self.head = nn.Linear(dim, tok.VOCAB_SIZE)

    def forward(self, embeddings: torch.Tensor) -> torch.Tensor:
        """embeddings: [B, T, dim] -> logits [B, T, vocab]."""
        t = embeddings.shape[1]
        if t > self.max_context:
            raise ContextOverflowError(f"sequence length {t} exceeds max context {self.max_context}")
        h = embeddings + sinusoidal_positions(t, self.dim, dtype=embeddings.dtype).to(
            embeddings.device
        )
        for block in self.blocks:
            h = block(h)
        return self.head(self.ln_f(h))


# ---------------------------------------------------------------------------
# Full VLM


@dataclass
class GenerationResult:
    text: str
    token_ids: list
    truncated: bool = False


class VLM(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.backbones = nn.ModuleList(VisionBackbone(b) for b in cfg.backbones)
        vision_width = sum(b.dim for b in cfg.backbones)
        self.projector = Projector(vision_width, cfg.projector_hidden, cfg.lm_dim)
        self.lm = ToyLM(cfg.lm_dim, cfg.lm_depth, cfg.lm_heads, cfg.max_context, cfg.prompt_style)
        self.norm_stats = NormStats(tuple(cfg.norm_mean), tuple(cfg.norm_std))

    # -- image path -----------------------------------------------------

    def preprocess(self, img: RawImage) -> ProcessedImage:
        return process_image(img, self.cfg.image_scheme, self.cfg.image_resolution, self.norm_stats)

    def patch_features(self, images: torch.Tensor) -> PatchFeatures:
        feats = [bb(images) for bb in self.backbones]
        fused = feats[0]
        for f in feats[1:]:
            fused = fuse_features(fused, f)
        return fused

    def images_to_tensor(self, imgs: list) -> torch.Tensor:
        dtype = next(self.parameters()).dtype
        arrs = [self.preprocess(im).pixels for im in imgs]
        return torch.stack([torch.from_numpy(a) for a in arrs]).to(dtype)

    # -- forward / loss ---------------------------------------------------

    def forward_tokens(
        self,
        token_batch: list,
        mask_batch: list,
        images: torch.Tensor | None = None,
        features: PatchFeatures | None = None,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Compute (mean masked NLL, logits) for a batch of token sequences.

        `features` overrides the backbone path with precomputed patch
        features; otherwise they are computed from `images`. Sequences are
        right-padded; pad positions never enter the loss.
        """
        if features is None:
            if images is None:
                raise ValueError("need images or precomputed features")
            features = self.patch_features(images)
        e_img = self.projector(features.values)  # [B, L, H]
        b, l, _ = e_img.shape

        max_t = max(len(t) for t in token_batch)
        if l + max_t > self.lm.max_context:
            raise ContextOverflowError(
                f"{l} patches + {max_t} tokens exceed max context {self.lm.max_context}"
            )
        ids = torch.full((b, max_t), tok.PAD_ID, dtype=torch.long, device=e_img.device)
        mask = torch.zeros(b, max_t, dtype=torch.bool, device=e_img.device)
        for i, (t_ids, t_mask) in enumerate(zip(token_batch, mask_batch)):
            ids[i, : len(t_ids)] = torch.tensor(t_ids, dtype=torch.long)
            mask[i, : len(t_mask)] = torch.tensor(t_mask, dtype=torch.bool)

        e_txt = self.lm.embed(ids)
        logits = self.lm(torch.cat([e_img, e_txt], dim=1))

        # position L+i predicts token i+1; a label at text index j is scored
        # from logits at sequence position L+j-1
        text_logits = logits[:, l:-1, :]  # predictions for tokens 1..max_t-1
        labels = ids[:, 1:]
        label_mask = mask[:, 1:]
        if not bool(label_mask.any()):
            raise ValueError("no response tokens to score (empty loss mask)")
        flat_logits = text_logits.reshape(-1, tok.VOCAB_SIZE)[label_mask.reshape(-1)]
        flat_labels = labels.reshape(-1)[label_mask.reshape(-1)]
        loss = F.cross_entropy(flat_logits, flat_labels)
        return loss, logits

    def example_loss(self, imgs: list, encodings: list[PromptEncoding]) -> torch.Tensor:
        images = self.images_to_tensor(imgs)
        loss, _ = self.forward_tokens(
            [e.tokens for e in encodings], [e.loss_mask for e in encodings], images=images
        )
        return loss

    # -- generation -------------------------------------------------------

    @torch.no_grad()
    def generate_greedy(self, img: RawImage, user_text: str, max_new: int = 64) -> GenerationResult:
        if max_new < 1:
            raise ValueError("max_new must be >= 1")
        enc = format_prompt(self.cfg.prompt_style, user_text, None)
        images = self.images_to_tensor([img])
        features = self.patch_features(images)
        e_img = self.projector(features.values)
        l = e_img.shape[1]

        ids = list(enc.tokens)
        generated: list[int] = []
        truncated = False
        for _ in range(max_new):
            if l + len(ids) + 1 > self.lm.max_context:
                truncated = True
                break
            id_tensor = torch.tensor([ids], dtype=torch.long, device=e_img.device)
            e_txt = self.lm.embed(id_tensor)
            logits = self.lm(torch.cat([e_img, e_txt], dim=1))
            last = logits[0, -1, :]
            # explicit tie-break: lowest token id among maxima
            next_id = int((last == last.max()).nonzero()[0].item())
            if next_id == tok.EOS_ID:
                break
            ids.append(next_id)
            generated.append(next_id)
        return GenerationResult(text=tok.decode(generated), token_ids=generated, truncated=truncated)


def build_vlm(cfg: ModelConfig, seed: int) -> VLM:
    """Construct a VLM with seeded parameter initialization."""
    torch.manual_seed(seed)
    return VLM(cfg)
