"""Miniature frozen dual-encoder segmentation model.

A byte-level text transformer and a ViT-style image transformer feed a small
decoder that emits one logit per pixel.  Every backbone parameter is frozen;
only injected prompts (see :mod:`promptseg.prompts`) and, optionally, the
residual upsampler train.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import checkpoint
from .tensor import (
    ConfigError,
    ShapeError,
    Tensor,
    bilinear_upsample,
    concat,
    conv2d,
    layer_norm,
    matmul,
    mul,
    relu,
    softmax,
)

BOS_ID = 256
EOS_ID = 257
VOCAB_SIZE = 258


class TokenizationError(ValueError):
    pass


def tokenize(phrase: str, max_len: int) -> np.ndarray:
    """Byte-level tokens wrapped in BOS/EOS."""
    body = phrase.encode("utf-8")
    ids = [BOS_ID, *body, EOS_ID]
    if len(ids) > max_len:
        raise TokenizationError(
            f"phrase needs {len(ids)} tokens but the encoder accepts {max_len}"
        )
    return np.array(ids, dtype=np.int64)


@dataclass
class BackboneConfig:
    text_width: int = 32          # H_l
    vision_width: int = 32        # H_v
    joint_width: int = 32         # H_vl
    text_layers: int = 4          # K_l
    vision_layers: int = 4        # K_v
    decoder_layers: int = 2
    patch_size: int = 8
    image_size: int = 64
    max_text_len: int = 16
    vocab_size: int = VOCAB_SIZE
    text_heads: int = 4
    vision_heads: int = 4
    ff_multiplier: int = 2
    use_upsampler: bool = True

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ConfigError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        if self.text_width % self.text_heads != 0:
            raise ConfigError("text_heads must divide text_width")
        if self.vision_width % self.vision_heads != 0:
            raise ConfigError("vision_heads must divide vision_width")
        if self.text_layers < 1 or self.vision_layers < 1:
            raise ConfigError("encoders need at least one layer")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def n_patches(self) -> int:
        return self.grid * self.grid


@dataclass
class TextEncoding:
    z: Tensor                 # [joint_width]
    final_seq: Tensor         # [B + n, text_width]
    eos_index: int            # index in final_seq holding the sentence embedding
    trace: list[Tensor] = field(default_factory=list)


@dataclass
class ImageEncoding:
    z: Tensor                 # [joint_width]
    patch_tokens: Tensor      # [n_patches, vision_width]
    trace: list[Tensor] = field(default_factory=list)


def _linear_init(rng, din, dout):
    return rng.normal(0.0, 1.0 / np.sqrt(din), size=(din, dout))


def init_block_params(params: dict, prefix: str, d: int, ff: int, rng) -> None:
    """Allocate one transformer block's parameters under ``prefix``."""
    params[f"{prefix}.wq"] = Tensor(_linear_init(rng, d, d))
    params[f"{prefix}.bq"] = Tensor(np.zeros(d))
    params[f"{prefix}.wk"] = Tensor(_linear_init(rng, d, d))
    params[f"{prefix}.bk"] = Tensor(np.zeros(d))
    params[f"{prefix}.wv"] = Tensor(_linear_init(rng, d, d))
    params[f"{prefix}.bv"] = Tensor(np.zeros(d))
    params[f"{prefix}.wo"] = Tensor(_linear_init(rng, d, d))
    params[f"{prefix}.bo"] = Tensor(np.zeros(d))
    params[f"{prefix}.ln1.g"] = Tensor(np.ones(d))
    params[f"{prefix}.ln1.b"] = Tensor(np.zeros(d))
    params[f"{prefix}.ln2.g"] = Tensor(np.ones(d))
    params[f"{prefix}.ln2.b"] = Tensor(np.zeros(d))
    params[f"{prefix}.ff.w1"] = Tensor(_linear_init(rng, d, ff))
    params[f"{prefix}.ff.b1"] = Tensor(np.zeros(ff))
    params[f"{prefix}.ff.w2"] = Tensor(_linear_init(rng, ff, d))
    params[f"{prefix}.ff.b2"] = Tensor(np.zeros(d))


def multi_head_attention(
    x: Tensor,
    wq: Tensor, bq: Tensor,
    wk: Tensor, bk: Tensor,
    wv: Tensor, bv: Tensor,
    wo: Tensor, bo: Tensor,
    heads: int,
    dropout: float = 0.0,
    rng=None,
) -> Tensor:
    """Bidirectional scaled dot-product attention over a [s, d] sequence."""
    s, d = x.shape
    if d % heads != 0:
        raise ConfigError(f"{heads} heads do not divide width {d}")
    dh = d // heads

    def split(t):
        return t.reshape(s, heads, dh).transpose(1, 0, 2)

    q = split(matmul(x, wq) + bq)
    k = split(matmul(x, wk) + bk)
    v = split(matmul(x, wv) + bv)
    att = softmax(matmul(q, k.transpose(0, 2, 1)) * (1.0 / np.sqrt(dh)), axis=-1)
    if dropout > 0.0 and rng is not None:
        mask = (rng.random(att.shape) >= dropout) / (1.0 - dropout)
        att = mul(att, mask)
    out = matmul(att, v).transpose(1, 0, 2).reshape(s, d)
    return matmul(out, wo) + bo


def transformer_block(
    params: dict,
    prefix: str,
    x: Tensor,
    heads: int,
    layernorm_first: bool = True,
    attn_dropout: float = 0.0,
    rng=None,
) -> Tensor:
    p = lambda n: params[f"{prefix}.{n}"]

    def attn(t):
        return multi_head_attention(
            t, p("wq"), p("bq"), p("wk"), p("bk"), p("wv"), p("bv"),
            p("wo"), p("bo"), heads, dropout=attn_dropout, rng=rng,
        )

    def ff(t):
        return matmul(relu(matmul(t, p("ff.w1")) + p("ff.b1")), p("ff.w2")) + p("ff.b2")

    if layernorm_first:
        x = x + attn(layer_norm(x, p("ln1.g"), p("ln1.b")))
        x = x + ff(layer_norm(x, p("ln2.g"), p("ln2.b")))
    else:
        x = layer_norm(x + attn(x), p("ln1.g"), p("ln1.b"))
        x = layer_norm(x + ff(x), p("ln2.g"), p("ln2.b"))
    return x


class Backbone:
    """Holds all frozen weights plus the (optionally trainable) upsampler."""

    UPSAMPLER_NAMES = ("upsampler.kernel", "upsampler.bias", "upsampler.residual_factor")

    def __init__(self, cfg: BackboneConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        p: dict[str, Tensor] = {}
        ps = cfg.patch_size

        p["text.embed"] = Tensor(rng.normal(0.0, 0.02, (cfg.vocab_size, cfg.text_width)))
        p["text.pos"] = Tensor(rng.normal(0.0, 0.01, (cfg.max_text_len, cfg.text_width)))
        for i in range(cfg.text_layers):
            init_block_params(p, f"text.layer{i}", cfg.text_width,
                              cfg.ff_multiplier * cfg.text_width, rng)
        p["text.proj"] = Tensor(_linear_init(rng, cfg.text_width, cfg.joint_width))

        p["vision.patch_proj"] = Tensor(_linear_init(rng, 3 * ps * ps, cfg.vision_width))
        p["vision.pos"] = Tensor(rng.normal(0.0, 0.01, (1 + cfg.n_patches, cfg.vision_width)))
        p["vision.cls"] = Tensor(rng.normal(0.0, 0.02, cfg.vision_width))
        for i in range(cfg.vision_layers):
            init_block_params(p, f"vision.layer{i}", cfg.vision_width,
                              cfg.ff_multiplier * cfg.vision_width, rng)
        p["vision.proj"] = Tensor(_linear_init(rng, cfg.vision_width, cfg.joint_width))

        # The conditioning projection is drawn at a larger scale and the decoder
        # blocks start near the identity (small output projections): with no
        # pretraining, a fully random decoder drowns out the text-conditioning
        # path, leaving the prompt gradients too weak to matter.
        p["decoder.cond.w"] = Tensor(3.0 * _linear_init(rng, cfg.joint_width, cfg.vision_width))
        p["decoder.cond.b"] = Tensor(np.zeros(cfg.vision_width))
        for i in range(cfg.decoder_layers):
            init_block_params(p, f"decoder.layer{i}", cfg.vision_width,
                              cfg.ff_multiplier * cfg.vision_width, rng)
            p[f"decoder.layer{i}.wo"].data *= 0.1
            p[f"decoder.layer{i}.ff.w2"].data *= 0.1
        # Unembedding rows share one direction per patch with small per-pixel
        # jitter, so a single conditioning vector can move a whole logit tile
        # coherently instead of fighting ps^2 independent random directions.
        shared = rng.normal(0.0, 1.0 / np.sqrt(cfg.vision_width), cfg.vision_width)
        jitter = rng.normal(0.0, 0.1 / np.sqrt(cfg.vision_width),
                            (cfg.vision_width, ps * ps))
        p["decoder.unembed.w"] = Tensor(shared[:, None] + jitter)
        p["decoder.unembed.b"] = Tensor(np.zeros(ps * ps))

        p["upsampler.kernel"] = Tensor(rng.normal(0.0, 0.05, (1, 1, 5, 5)))
        p["upsampler.bias"] = Tensor(np.zeros(1))
        p["upsampler.residual_factor"] = Tensor(np.asarray(0.1))

        for t in p.values():
            t.requires_grad = False
        if cfg.use_upsampler:
            for name in self.UPSAMPLER_NAMES:
                p[name].requires_grad = True
        self.params = p

    # -- parameter bookkeeping ----------------------------------------------

    def upsampler_parameters(self) -> list[tuple[str, Tensor]]:
        if not self.cfg.use_upsampler:
            return []
        return [(n, self.params[n]) for n in self.UPSAMPLER_NAMES]

    def frozen_param_names(self) -> list[str]:
        trainable = {n for n, _ in self.upsampler_parameters()}
        return [n for n in self.params if n not in trainable]

    def state_arrays(self, names=None) -> dict[str, np.ndarray]:
        names = list(self.params) if names is None else names
        return {n: self.params[n].data for n in names}

    def frozen_checksum(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.frozen_param_names()):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name].data).tobytes())
        return h.hexdigest()

    def save(self, path) -> None:
        checkpoint.save_arrays(path, self.state_arrays())

    def load(self, path) -> None:
        arrays = checkpoint.load_arrays(path)
        for name, arr in arrays.items():
            if name not in self.params:
                raise KeyError(f"unknown parameter {name} in checkpoint")
            if arr.shape != self.params[name].shape:
                raise ShapeError(f"checkpoint shape mismatch for {name}")
            self.params[name].data = arr

    # -- encoders ------------------------------------------------------------

    def encode_text(self, tokens: np.ndarray, textual_prompts=None,
                    record_trace: bool = False) -> TextEncoding:
        from .prompts import inject_textual

        cfg = self.cfg
        tokens = np.asarray(tokens)
        if len(tokens) > cfg.max_text_len:
            raise TokenizationError(
                f"sequence of {len(tokens)} tokens exceeds max_text_len {cfg.max_text_len}"
            )
        eos_positions = np.flatnonzero(tokens == EOS_ID)
        if len(eos_positions) != 1:
            raise TokenizationError(
                f"sequence must contain exactly one EOS marker, found {len(eos_positions)}"
            )
        eos = int(eos_positions[0])
        n = len(tokens)
        seq = self.params["text.embed"][tokens] + self.params["text.pos"][:n]
        prompts = textual_prompts or []
        B = prompts[0].shape[0] if prompts else 0
        trace: list[Tensor] = []
        for i in range(cfg.text_layers):
            seq = inject_textual(i, seq, prompts)
            seq = transformer_block(self.params, f"text.layer{i}", seq, cfg.text_heads)
            if record_trace:
                trace.append(seq)
        final_eos = eos + (B if prompts else 0)
        z = matmul(seq[final_eos : final_eos + 1], self.params["text.proj"]).reshape(
            cfg.joint_width
        )
        return TextEncoding(z=z, final_seq=seq, eos_index=final_eos, trace=trace)

    def patchify(self, image: np.ndarray) -> np.ndarray:
        cfg = self.cfg
        image = np.asarray(image, dtype=np.float64)
        if image.shape != (3, cfg.image_size, cfg.image_size):
            raise ShapeError(
                f"expected image of shape (3, {cfg.image_size}, {cfg.image_size}), "
                f"got {image.shape}"
            )
        g, ps = cfg.grid, cfg.patch_size
        return (
            image.reshape(3, g, ps, g, ps)
            .transpose(1, 3, 0, 2, 4)
            .reshape(cfg.n_patches, 3 * ps * ps)
        )

    def encode_image(self, image: np.ndarray, visual_prompts=None,
                     record_trace: bool = False) -> ImageEncoding:
        from .prompts import inject_visual

        cfg = self.cfg
        patches = Tensor(self.patchify(image))
        E = matmul(patches, self.params["vision.patch_proj"]) + self.params["vision.pos"][1:]
        c0 = (self.params["vision.cls"] + self.params["vision.pos"][0]).reshape(
            1, cfg.vision_width
        )
        seq = concat([c0, E], axis=0)
        prompts = visual_prompts or []
        body_len = 1 + cfg.n_patches
        trace: list[Tensor] = []
        for i in range(cfg.vision_layers):
            seq = inject_visual(i, seq, prompts, body_len)
            seq = transformer_block(self.params, f"vision.layer{i}", seq, cfg.vision_heads)
            if record_trace:
                trace.append(seq)
        z = matmul(seq[0:1], self.params["vision.proj"]).reshape(cfg.joint_width)
        patch_tokens = seq[1:body_len]
        return ImageEncoding(z=z, patch_tokens=patch_tokens, trace=trace)

    # -- decoder -------------------------------------------------------------

    def decode(self, patch_tokens: Tensor, z_text: Tensor,
               use_upsampler: bool | None = None) -> Tensor:
        cfg = self.cfg
        if use_upsampler is None:
            use_upsampler = cfg.use_upsampler
        if patch_tokens.shape != (cfg.n_patches, cfg.vision_width):
            raise ShapeError(
                f"expected {cfg.n_patches} patch tokens of width {cfg.vision_width}, "
                f"got {patch_tokens.shape}"
            )
        cond = matmul(z_text.reshape(1, cfg.joint_width), self.params["decoder.cond.w"])
        cond = cond + self.params["decoder.cond.b"]
        tokens = patch_tokens * (cond + 1.0)
        for i in range(cfg.decoder_layers):
            tokens = transformer_block(
                self.params, f"decoder.layer{i}", tokens, cfg.vision_heads
            )
        tiles = matmul(tokens, self.params["decoder.unembed.w"]) + self.params[
            "decoder.unembed.b"
        ]
        g, ps, S = cfg.grid, cfg.patch_size, cfg.image_size
        body = tiles.reshape(g, g, ps, ps).transpose(0, 2, 1, 3).reshape(S, S)
        if not use_upsampler:
            return body
        feat = bilinear_upsample(body.reshape(1, S, S), 1)
        res = conv2d(
            feat,
            self.params["upsampler.kernel"],
            bias=self.params["upsampler.bias"],
            padding=2,
        )
        return body + (res * self.params["upsampler.residual_factor"]).reshape(S, S)

    # -- full model ----------------------------------------------------------

    def forward(self, image: np.ndarray, tokens: np.ndarray, state=None,
                rng=None) -> Tensor:
        """Full text-conditioned segmentation pass; ``state`` carries prompts."""
        from .prompts import build_prompts

        if state is None:
            img_enc = self.encode_image(image)
            txt_enc = self.encode_text(tokens)
            return self.decode(img_enc.patch_tokens, txt_enc.z)
        textual, visual = build_prompts(state, rng=rng, train=rng is not None)
        img_enc = self.encode_image(image, visual_prompts=visual)
        if state.kind == "cocoop":
            from .prompts import cocoop_condition

            textual = cocoop_condition(state, img_enc.z)
        txt_enc = self.encode_text(tokens, textual_prompts=textual)
        return self.decode(img_enc.patch_tokens, txt_enc.z)
