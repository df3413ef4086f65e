"""Visual kinematics transformer: multi-view dual-attention backbone,
point-set forecasting head, per-environment 1D-convolution action heads,
and the behavioral-cloning variant that shares the same backbone.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .pointset_ot import emd_batch

FULL_CHAIN = "full_chain"
END_EFFECTOR = "end_effector"

# sigmoid output [0,1] is stretched to this range so slightly off-frame
# chain points stay supervisable
COORD_LO = -0.25
COORD_HI = 1.25


@dataclass
class VKTConfig:
    T: int = 8
    D: int = 64
    L: int = 2
    n_heads: int = 4
    N_points: int = 16
    patch_size: int = 8
    image_size: int = 64
    V_max: int = 4
    vocab: int = 3
    mode: str = FULL_CHAIN
    multi_view: bool = True
    ffn_mult: int = 2

    def __post_init__(self):
        if self.D % self.n_heads != 0:
            raise ValueError(f"D={self.D} not divisible by n_heads={self.n_heads}")
        if self.image_size % self.patch_size != 0:
            raise ValueError(f"image_size={self.image_size} not divisible by "
                             f"patch_size={self.patch_size}")
        if self.T < 2:
            raise ValueError(f"forecast horizon must be >= 2, got {self.T}")
        if self.mode not in (FULL_CHAIN, END_EFFECTOR):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.mode == END_EFFECTOR and self.N_points != 1:
            raise ValueError("end_effector mode requires N_points == 1")
        if self.mode == FULL_CHAIN and self.N_points < 2:
            raise ValueError("full_chain mode requires N_points >= 2")

    @property
    def n_patches(self):
        return (self.image_size // self.patch_size) ** 2

    def to_json(self):
        return asdict(self)

    @classmethod
    def from_json(cls, obj):
        return cls(**obj)

    def save(self, path):
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_json(), f, indent=2)

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as f:
            return cls.from_json(json.load(f))


@dataclass
class TokenSet:
    query: Tensor   # (B, V, 1 + T, D); kinematics tokens are slice [:, :, 1:, :]
    vision: Tensor  # (B, V, n_patches, D)

    @property
    def view_count(self):
        return self.query.shape[1]


@dataclass
class ForecastOutput:
    point_sets: Tensor             # (B, V, T, N_points, 2) in normalized units
    kinematics_embeddings: Tensor  # (B, V, T, D), pre-head tokens


class VKT:
    """The forecasting model. Also serves as the BCT baseline backbone."""

    KIN_SLICE_START = 1  # query token layout: [text token, T kinematics tokens]

    def __init__(self, config: VKTConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        self.dtype = dtype
        self.params = {}
        self._head_dims = {}
        self._init(seed)

    # -- parameter construction -------------------------------------------

    def _add(self, name, array, requires_grad=True):
        t = Tensor(array.astype(self.dtype), requires_grad=requires_grad)
        self.params[name] = t
        return t

    def _linear_init(self, rng, fan_in, fan_out):
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=(fan_in, fan_out))

    def _add_linear(self, rng, name, fan_in, fan_out, zero=False):
        if zero:
            self._add(name + ".w", np.zeros((fan_in, fan_out)))
        else:
            self._add(name + ".w", self._linear_init(rng, fan_in, fan_out))
        self._add(name + ".b", np.zeros(fan_out))

    def _add_ln(self, name, d):
        self._add(name + ".g", np.ones(d))
        self._add(name + ".b", np.zeros(d))

    def _add_attn(self, rng, name, d):
        for proj in ("wq", "wk", "wv", "wo"):
            self._add_linear(rng, f"{name}.{proj}", d, d)
        self._add_ln(f"{name}.ln_q", d)
        self._add_ln(f"{name}.ln_kv", d)
        self._add_ln(f"{name}.ffn_ln", d)
        self._add_linear(rng, f"{name}.ffn1", d, d * self.config.ffn_mult)
        self._add_linear(rng, f"{name}.ffn2", d * self.config.ffn_mult, d)

    def _init(self, seed):
        c = self.config
        rng = ag.seed_rng(seed, "vkt-init")
        patch_dim = c.patch_size * c.patch_size * 3
        self._add_linear(rng, "patch_embed", patch_dim, c.D)
        self._add("pos_embed", rng.normal(0.0, 0.02, size=(c.n_patches, c.D)))
        self._add("text_embed", rng.normal(0.0, 0.02, size=(c.vocab, c.D)))
        self._add("kin_tokens", rng.normal(0.0, 0.02, size=(c.T, c.D)))
        subs = ["q_self", "q_from_v", "v_from_q"]
        if c.multi_view:
            subs += ["mv_q", "mv_v"]
        for i in range(c.L):
            for sub in subs:
                self._add_attn(rng, f"block{i}.{sub}", c.D)
        self._add_linear(rng, "point_head.fc1", c.D, c.D)
        self._add_linear(rng, "point_head.fc2", c.D, c.N_points * 2, zero=True)

    def register_action_head(self, env_id: str, action_dim: int):
        """Zero-initialized 1D convolution head (kernel 3, same padding)."""
        self._head_dims[env_id] = action_dim
        self._add(f"head.{env_id}.kernel", np.zeros((3, self.config.D, action_dim)))
        self._add(f"head.{env_id}.bias", np.zeros(action_dim))

    @property
    def head_ids(self):
        return sorted(self._head_dims)

    def head_dim(self, env_id):
        return self._head_dims[env_id]

    def backbone_params(self):
        return {k: v for k, v in self.params.items() if not k.startswith("head.")}

    def head_params(self, env_id=None):
        prefix = "head." if env_id is None else f"head.{env_id}."
        return {k: v for k, v in self.params.items() if k.startswith(prefix)}

    def set_backbone_frozen(self, frozen: bool):
        for t in self.backbone_params().values():
            t.requires_grad = not frozen

    # -- forward ----------------------------------------------------------

    def _p(self, name):
        return self.params[name]

    def _ln(self, name, x):
        return ag.layer_norm(x, self._p(name + ".g"), self._p(name + ".b"))

    def _lin(self, name, x):
        return ag.linear(x, self._p(name + ".w"), self._p(name + ".b"))

    def _attn_sublayer(self, name, stream, kv_stream):
        """Pre-norm attention with residual, then a pre-norm GELU MLP with residual."""
        qn = self._ln(f"{name}.ln_q", stream)
        kvn = self._ln(f"{name}.ln_kv", kv_stream)
        q = self._lin(f"{name}.wq", qn)
        k = self._lin(f"{name}.wk", kvn)
        v = self._lin(f"{name}.wv", kvn)
        out = ag.attention(q, k, v, self.config.n_heads)
        stream = ag.add(stream, self._lin(f"{name}.wo", out))
        h = self._ln(f"{name}.ffn_ln", stream)
        h = self._lin(f"{name}.ffn2", ag.gelu(self._lin(f"{name}.ffn1", h)))
        return ag.add(stream, h)

    def _other_views(self, stream, V):
        """(B, V, S, D) -> (B, V, (V-1)*S, D): each view sees the others, in index order."""
        per_view = []
        for v in range(V):
            others = [stream[:, u] for u in range(V) if u != v]
            cat = ag.concat(others, axis=1) if len(others) > 1 else others[0]
            per_view.append(ag.reshape(cat, (cat.shape[0], 1) + cat.shape[1:]))
        return ag.concat(per_view, axis=1)

    def encode_inputs(self, instruction_ids, images) -> TokenSet:
        """instruction_ids: (B,) ints; images: (B, V, H, W, 3) uint8."""
        c = self.config
        instruction_ids = np.atleast_1d(np.asarray(instruction_ids))
        images = np.asarray(images)
        if images.ndim != 5 or images.shape[2:] != (c.image_size, c.image_size, 3):
            raise ValueError(
                f"images shaped {images.shape}, expected (B, V, {c.image_size}, "
                f"{c.image_size}, 3)")
        if np.any(instruction_ids < 0) or np.any(instruction_ids >= c.vocab):
            raise ValueError(f"instruction id out of vocab (size {c.vocab})")
        B, V = images.shape[:2]
        if V < 1 or V > c.V_max:
            raise ValueError(f"view count {V} outside 1..{c.V_max}")
        p = c.patch_size
        g = c.image_size // p
        x = images.astype(self.dtype) / 127.5 - 1.0
        x = x.reshape(B, V, g, p, g, p, 3).transpose(0, 1, 2, 4, 3, 5, 6)
        x = np.ascontiguousarray(x).reshape(B, V, g * g, p * p * 3)
        vision = self._lin("patch_embed", Tensor(x))
        vision = ag.add(vision, self._p("pos_embed"))

        text = self._p("text_embed")[instruction_ids]          # (B, D)
        text = ag.reshape(text, (B, 1, 1, c.D))
        text = ag.add(text, Tensor(np.zeros((B, V, 1, c.D), dtype=self.dtype)))
        kin = ag.reshape(self._p("kin_tokens"), (1, 1, c.T, c.D))
        kin = ag.add(kin, Tensor(np.zeros((B, V, c.T, c.D), dtype=self.dtype)))
        return TokenSet(query=ag.concat([text, kin], axis=2), vision=vision)

    def dual_attention_block(self, tokens: TokenSet, index: int) -> TokenSet:
        q, vis = tokens.query, tokens.vision
        V = q.shape[1]
        name = f"block{index}"
        q = self._attn_sublayer(f"{name}.q_self", q, q)
        q = self._attn_sublayer(f"{name}.q_from_v", q, vis)
        if self.config.multi_view and V > 1:
            q = self._attn_sublayer(f"{name}.mv_q", q, self._other_views(q, V))
            vis = self._attn_sublayer(f"{name}.mv_v", vis, self._other_views(vis, V))
        vis = self._attn_sublayer(f"{name}.v_from_q", vis, q)
        return TokenSet(query=q, vision=vis)

    def backbone(self, instruction_ids, images) -> Tensor:
        """Kinematics-token embeddings (B, V, T, D) after the block stack."""
        tokens = self.encode_inputs(instruction_ids, images)
        for i in range(self.config.L):
            tokens = self.dual_attention_block(tokens, i)
        return tokens.query[:, :, self.KIN_SLICE_START:, :]

    def point_head(self, kin_embeddings: Tensor) -> Tensor:
        c = self.config
        h = ag.gelu(self._lin("point_head.fc1", kin_embeddings))
        logits = self._lin("point_head.fc2", h)
        y = ag.sigmoid(logits)
        y = ag.add(ag.scale(y, COORD_HI - COORD_LO),
                   Tensor(np.asarray(COORD_LO, dtype=y.data.dtype)))
        B, V, T = y.shape[:3]
        return ag.reshape(y, (B, V, T, c.N_points, 2))

    def forecast(self, instruction_ids, images) -> ForecastOutput:
        emb = self.backbone(instruction_ids, images)
        return ForecastOutput(point_sets=self.point_head(emb),
                              kinematics_embeddings=emb)

    def action_head(self, kin_embeddings: Tensor, env_id: str) -> Tensor:
        """(B, V, T, D) -> (B, T, action_dim); per-view conv outputs are averaged."""
        if env_id not in self._head_dims:
            raise KeyError(f"no action head registered for env {env_id!r}")
        out = ag.conv1d(kin_embeddings, self._p(f"head.{env_id}.kernel"),
                        self._p(f"head.{env_id}.bias"))
        return ag.mean(out, axis=1)

    def bct_forward(self, instruction_ids, images, env_id: str) -> Tensor:
        """Same backbone, actions regressed directly from the kinematics tokens."""
        return self.action_head(self.backbone(instruction_ids, images), env_id)


def clamp_ground_truth(gt):
    return np.clip(gt, COORD_LO, COORD_HI)


def vkt_loss(out: ForecastOutput, gt, eps=0.01, max_iters=300, tol=1e-5) -> Tensor:
    """Mean transport-matching loss over views and timesteps.

    gt: array (B, V, T, M, 2) of ground-truth sets in normalized units.
    The plan is solved in float64; only the envelope gradient with respect
    to the predicted points flows back into the network.
    """
    pred = out.point_sets
    gt = clamp_ground_truth(np.asarray(gt, dtype=np.float64))
    if gt.shape[:3] != pred.shape[:3] or gt.shape[-1] != 2:
        raise ag.ShapeMismatch(f"vkt_loss: prediction {pred.shape} vs target {gt.shape}")
    B, V, T, N = pred.shape[:4]
    M = gt.shape[3]
    q = pred.data.astype(np.float64).reshape(B * V * T, N, 2)
    p = gt.reshape(B * V * T, M, 2)
    values, grads = emd_batch(p, q, eps=eps, max_iters=max_iters, tol=tol)
    scale = 1.0 / (B * V * T)
    grad_pred = (grads * scale).reshape(pred.shape)
    return ag.external_grad(values.mean(), [(pred, grad_pred)],
                            dtype=pred.data.dtype)


def action_loss(pred_actions: Tensor, target_actions) -> Tensor:
    return ag.mse(pred_actions, np.asarray(target_actions))


def relative_precision(loss_vkt: float, loss_bct: float) -> float:
    if loss_vkt <= 0:
        raise ValueError(f"loss_vkt must be positive, got {loss_vkt}")
    return abs(loss_vkt - loss_bct) / loss_vkt


# -- checkpointing ---------------------------------------------------------


def save_model(model: VKT, directory):
    import os
    os.makedirs(directory, exist_ok=True)
    model.config.save(os.path.join(directory, "config.json"))
    with open(os.path.join(directory, "heads.json"), "w", encoding="utf-8") as f:
        json.dump(model._head_dims, f, indent=2, sort_keys=True)
    ag.save_params(model.params, directory)


def load_model(directory) -> VKT:
    import os
    config = VKTConfig.load(os.path.join(directory, "config.json"))
    model = VKT(config)
    with open(os.path.join(directory, "heads.json"), encoding="utf-8") as f:
        for env_id, dim in json.load(f).items():
            model.register_action_head(env_id, dim)
    loaded = ag.load_params(directory)
    if set(loaded) != set(model.params):
        missing = set(model.params) ^ set(loaded)
        raise ValueError(f"checkpoint/config parameter mismatch: {sorted(missing)[:5]}")
    for name, arr in loaded.items():
        model.params[name].data = arr.astype(model.dtype)
    return model
