"""The six context learners and their injection / coupling mechanics.

Textual prompts are prepended in front of the word embeddings; visual prompts
are appended after the CLS token and patch embeddings.  Below the prompt depth
the previous layer's prompt-slot outputs are discarded and fresh parameters
are injected; at and beyond the depth the slots ride along like ordinary
tokens.  Multimodal learners derive both modalities' prompts from unified
prompts through a per-layer coupling function.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .backbone import Backbone, init_block_params, transformer_block
from .tensor import ConfigError, Tensor, concat, layer_norm, matmul, relu

KINDS = (
    "deep-textual",
    "coop",
    "cocoop",
    "vpt",
    "maple",
    "shared-attention",
    "shared-separate",
)
TEXTUAL_KINDS = ("deep-textual", "coop", "cocoop")
MULTIMODAL_KINDS = ("maple", "shared-attention", "shared-separate")
TEXT_SPACE_INIT_KINDS = ("deep-textual", "coop", "cocoop", "maple")

INIT_PHRASE = "a photo of a"


@dataclass
class CouplerConfig:
    unified_dim: int = 32          # H_u
    use_lora: bool = False
    intermediate_dim: int = 32     # LoRA rank / CoCoOp meta-net bottleneck
    attn_heads: int = 4
    attn_dropout: float = 0.0
    attn_ff_dim: int = 64
    layernorm_first: bool = True
    use_layernorm: bool = True     # shared-separate: layer norm after the linear map


@dataclass
class PromptState:
    kind: str
    B: int
    J: int
    params: dict[str, Tensor]
    coupler: CouplerConfig | None = None
    dims: dict[str, int] = field(default_factory=dict)

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return list(self.params.items())


def _depth_bound(kind: str, cfg) -> int:
    if kind in TEXTUAL_KINDS:
        return cfg.text_layers
    if kind == "vpt":
        return cfg.vision_layers
    return min(cfg.text_layers, cfg.vision_layers)


def init_prompts(
    kind: str,
    B: int,
    J: int,
    backbone: Backbone,
    coupler: CouplerConfig | None = None,
    init_mode: str = "gaussian",
    seed: int = 0,
) -> PromptState:
    if kind not in KINDS:
        raise ConfigError(f"unknown strategy kind {kind!r}")
    if B < 1:
        raise ConfigError("prompt length B must be at least 1")
    cfg = backbone.cfg
    bound = _depth_bound(kind, cfg)
    if not 1 <= J <= bound:
        raise ConfigError(f"prompt depth {J} outside [1, {bound}] for {kind}")
    if kind == "coop" and J != 1:
        raise ConfigError("coop is the depth-1 special case; use deep-textual for J > 1")
    if init_mode not in ("gaussian", "photo-of-a"):
        raise ConfigError(f"unknown init mode {init_mode!r}")
    if init_mode == "photo-of-a" and kind not in TEXT_SPACE_INIT_KINDS:
        raise ConfigError(
            f"photo-of-a init needs depth-1 prompts in text space, not valid for {kind}"
        )

    rng = np.random.default_rng(seed)
    sigma = 0.02
    H_l, H_v, H_vl = cfg.text_width, cfg.vision_width, cfg.joint_width
    coupler = coupler or CouplerConfig()
    params: dict[str, Tensor] = {}

    def gauss(*shape):
        return Tensor(rng.normal(0.0, sigma, shape), requires_grad=True)

    def phrase_rows() -> np.ndarray:
        ids = list(INIT_PHRASE.encode("utf-8"))
        table = backbone.params["text.embed"].data
        rows = table[ids]
        if B <= len(ids):
            return rows[:B].copy()
        pad = rng.normal(0.0, sigma, (B - len(ids), H_l))
        return np.concatenate([rows, pad], axis=0)

    def text_space_prompt(depth: int, name: str):
        if depth == 0 and init_mode == "photo-of-a":
            params[name] = Tensor(phrase_rows(), requires_grad=True)
        else:
            params[name] = gauss(B, H_l)

    if kind in TEXTUAL_KINDS:
        for i in range(J):
            text_space_prompt(i, f"textual{i}")
        if kind == "cocoop":
            inter = coupler.intermediate_dim
            params["meta.w1"] = Tensor(
                rng.normal(0.0, 1.0 / np.sqrt(H_vl), (H_vl, inter)), requires_grad=True
            )
            params["meta.b1"] = Tensor(np.zeros(inter), requires_grad=True)
            # zero output layer: starts exactly at the unconditioned learner
            params["meta.w2"] = Tensor(np.zeros((inter, H_l)), requires_grad=True)
            params["meta.b2"] = Tensor(np.zeros(H_l), requires_grad=True)
    elif kind == "vpt":
        for i in range(J):
            params[f"visual{i}"] = gauss(B, H_v)
    elif kind == "maple":
        if coupler.unified_dim != H_l:
            raise ConfigError(
                f"maple unified prompts live in text space: H_u must equal {H_l}, "
                f"got {coupler.unified_dim}"
            )
        for i in range(J):
            text_space_prompt(i, f"unified{i}")
            if coupler.use_lora:
                r = coupler.intermediate_dim
                params[f"coupler{i}.lora_a"] = Tensor(
                    rng.normal(0.0, 1.0 / np.sqrt(H_l), (H_l, r)), requires_grad=True
                )
                params[f"coupler{i}.lora_b"] = Tensor(
                    rng.normal(0.0, sigma, (H_v, r)), requires_grad=True
                )
            else:
                params[f"coupler{i}.w"] = Tensor(
                    rng.normal(0.0, 1.0 / np.sqrt(H_l), (H_l, H_v)), requires_grad=True
                )
            params[f"coupler{i}.b"] = Tensor(np.zeros(H_v), requires_grad=True)
    elif kind == "shared-separate":
        H_u = coupler.unified_dim
        for i in range(J):
            params[f"unified{i}"] = gauss(B, H_u)
            for branch, width in (("l", H_l), ("v", H_v)):
                params[f"coupler{i}.to_{branch}.w"] = Tensor(
                    rng.normal(0.0, 1.0 / np.sqrt(H_u), (H_u, width)), requires_grad=True
                )
                params[f"coupler{i}.to_{branch}.b"] = Tensor(
                    np.zeros(width), requires_grad=True
                )
                if coupler.use_layernorm:
                    params[f"coupler{i}.to_{branch}.ln.g"] = Tensor(
                        np.ones(width), requires_grad=True
                    )
                    params[f"coupler{i}.to_{branch}.ln.b"] = Tensor(
                        np.zeros(width), requires_grad=True
                    )
    elif kind == "shared-attention":
        H_u = coupler.unified_dim
        if H_u % coupler.attn_heads != 0:
            raise ConfigError(
                f"{coupler.attn_heads} attention heads do not divide H_u={H_u}"
            )
        for i in range(J):
            params[f"unified{i}"] = gauss(B, H_u)
            init_block_params(params, f"coupler{i}.block", H_u, coupler.attn_ff_dim, rng)
            for branch, width in (("l", H_l), ("v", H_v)):
                params[f"coupler{i}.head_{branch}.w"] = Tensor(
                    rng.normal(0.0, 1.0 / np.sqrt(H_u), (H_u, width)), requires_grad=True
                )
                params[f"coupler{i}.head_{branch}.b"] = Tensor(
                    np.zeros(width), requires_grad=True
                )
        for name, t in params.items():
            t.requires_grad = True

    return PromptState(
        kind=kind, B=B, J=J, params=params, coupler=coupler,
        dims={"H_l": H_l, "H_v": H_v, "H_vl": H_vl, "H_u": coupler.unified_dim},
    )


# -- injection ---------------------------------------------------------------


def inject_textual(layer_index: int, seq: Tensor, prompts: list[Tensor]) -> Tensor:
    """Layer input per the deep textual prompting recursion (prompts in front)."""
    if not prompts:
        return seq
    J = len(prompts)
    if layer_index == 0:
        return concat([prompts[0], seq], axis=0)
    if layer_index < J:
        B = prompts[layer_index].shape[0]
        return concat([prompts[layer_index], seq[B:]], axis=0)
    return seq


def inject_visual(layer_index: int, seq: Tensor, prompts: list[Tensor],
                  body_len: int) -> Tensor:
    """Layer input for visual prompting: CLS and patches keep their slots,
    prompts sit at the tail."""
    if not prompts:
        return seq
    if layer_index == 0:
        return concat([seq, prompts[0]], axis=0)
    if layer_index < len(prompts):
        return concat([seq[:body_len], prompts[layer_index]], axis=0)
    return seq


# -- coupling ----------------------------------------------------------------


def couple(state: PromptState, layer_index: int, rng=None,
           train: bool = False) -> tuple[Tensor, Tensor]:
    """Map the layer's unified prompts to (textual, visual) prompt pairs."""
    if state.kind not in MULTIMODAL_KINDS:
        raise ConfigError(f"couple() is only defined for multimodal kinds, got {state.kind}")
    p = state.params
    unified = p[f"unified{layer_index}"]
    c = state.coupler
    if state.kind == "maple":
        if c.use_lora:
            w = matmul(p[f"coupler{layer_index}.lora_a"],
                       p[f"coupler{layer_index}.lora_b"].transpose(1, 0))
        else:
            w = p[f"coupler{layer_index}.w"]
        visual = matmul(unified, w) + p[f"coupler{layer_index}.b"]
        return unified, visual
    if state.kind == "shared-separate":
        out = []
        for branch in ("l", "v"):
            pre = f"coupler{layer_index}.to_{branch}"
            h = matmul(unified, p[f"{pre}.w"]) + p[f"{pre}.b"]
            if c.use_layernorm:
                h = layer_norm(h, p[f"{pre}.ln.g"], p[f"{pre}.ln.b"])
            out.append(h)
        return out[0], out[1]
    # shared-attention
    h = transformer_block(
        p, f"coupler{layer_index}.block", unified, c.attn_heads,
        layernorm_first=c.layernorm_first,
        attn_dropout=c.attn_dropout if train else 0.0,
        rng=rng,
    )
    textual = matmul(h, p[f"coupler{layer_index}.head_l.w"]) + p[
        f"coupler{layer_index}.head_l.b"
    ]
    visual = matmul(h, p[f"coupler{layer_index}.head_v.w"]) + p[
        f"coupler{layer_index}.head_v.b"
    ]
    return textual, visual


def cocoop_condition(state: PromptState, z_image: Tensor) -> list[Tensor]:
    """Shift every textual prompt by the meta-net's image-conditioned bias."""
    if state.kind != "cocoop":
        raise ConfigError(f"cocoop_condition requires a cocoop state, got {state.kind}")
    p = state.params
    H_vl = state.dims["H_vl"]
    h = relu(matmul(z_image.reshape(1, H_vl), p["meta.w1"]) + p["meta.b1"])
    pi = (matmul(h, p["meta.w2"]) + p["meta.b2"]).reshape(state.dims["H_l"])
    return [p[f"textual{i}"] + pi for i in range(state.J)]


def build_prompts(state: PromptState | None, rng=None,
                  train: bool = False):
    """Per-layer (textual, visual) prompt lists for the encoders."""
    if state is None:
        return None, None
    if state.kind in TEXTUAL_KINDS:
        return [state.params[f"textual{i}"] for i in range(state.J)], None
    if state.kind == "vpt":
        return None, [state.params[f"visual{i}"] for i in range(state.J)]
    pairs = [couple(state, i, rng=rng, train=train) for i in range(state.J)]
    return [t for t, _ in pairs], [v for _, v in pairs]


def trainable_parameters(state: PromptState, backbone: Backbone) -> list[tuple[str, Tensor]]:
    """Everything the optimizer may touch: prompts, couplers, meta-net, upsampler."""
    named = [(f"prompt.{n}", t) for n, t in state.named_parameters()]
    named.extend(backbone.upsampler_parameters())
    return named
