"""State encoders, actor head, and twin-critic head.

The three modality encoders (vision: seven conv layers; force: per-token lift
plus one self-attention layer; proprioception: four-layer MLP) produce
regular-type vectors that are concatenated vision | force | proprio.  Both
the equivariant models and their conventional counterparts (same topology,
unconstrained weights, widths scaled to match parameter counts) live here.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import diffcore as dc
from . import eqlayers as el
from .eqlayers import GeometricTensor, Module, ModuleList
from .symgroup import RepKind, ftype, regular_type, trivial_type

SUPPORTED_RESOLUTIONS = (8, 16, 32, 64)

MODALITIES = ("vision", "force", "proprio")

# per-row wrench typing: (f_x, f_y), f_z, (m_x, m_y), m_z
FORCE_ROW_BLOCKS = (
    (RepKind.STANDARD, 1),
    (RepKind.TRIVIAL, 1),
    (RepKind.STANDARD, 1),
    (RepKind.TRIVIAL, 1),
)

# (e_lambda, (e_x, e_y), e_z, (cos e_theta, sin e_theta))
PROPRIO_BLOCKS = (
    (RepKind.TRIVIAL, 1),
    (RepKind.STANDARD, 1),
    (RepKind.TRIVIAL, 1),
    (RepKind.STANDARD, 1),
)

# action (lambda, (dx, dy), dz, dtheta)
ACTION_BLOCKS = (
    (RepKind.TRIVIAL, 1),
    (RepKind.STANDARD, 1),
    (RepKind.TRIVIAL, 1),
    (RepKind.SIGN, 1),
)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    group_order: int = 4
    resolution: int = 16
    encoder_fields: int = 32          # regular fields per modality encoding
    force_token_fields: int = 8
    force_qk_fields: int = 8
    force_tokens: int = 64
    proprio_hidden: tuple = (8, 16, 32)
    fusion_fields: int = 32
    action_fields: int = 8
    modalities: tuple = MODALITIES
    tied_xy_std: bool = True
    positional_encoding: bool = True
    conventional: bool = False
    cnn_scale: float = 0.0            # 0 means calibrate for parameter parity

    def __post_init__(self):
        if self.resolution not in SUPPORTED_RESOLUTIONS:
            raise ConfigError(f"resolution {self.resolution} not in {SUPPORTED_RESOLUTIONS}")
        if "vision" not in self.modalities:
            raise ConfigError("the vision modality is required")
        for m in self.modalities:
            if m not in MODALITIES:
                raise ConfigError(f"unknown modality {m!r}")

    @property
    def num_log_std(self) -> int:
        return 4 if self.tied_xy_std else 5

    def actor_output_type(self):
        # means: xy (standard), theta (sign), lambda + z (trivial); then stds
        return ftype(
            self.group_order,
            (RepKind.STANDARD, 1),
            (RepKind.SIGN, 1),
            (RepKind.TRIVIAL, 2 + self.num_log_std),
        )


def vision_schedule(resolution: int, out_fields: int):
    """Seven (fields, kernel, stride) stages reaching 1x1: a 2x2 lift takes
    the even input to an odd grid, then unpadded stride-2 3x3 convs halve it
    while keeping the sampling grid symmetric about the center (exact
    equivariance for 90-degree transforms), and 1x1 layers finish the stack."""
    f = out_fields

    def fields(div):
        return max(f // div, 2)

    if resolution == 64:
        stages = [(fields(16), 2, 1), (fields(8), 3, 2), (fields(4), 3, 2),
                  (fields(2), 3, 2), (f, 3, 2), (f, 3, 2), (f, 1, 1)]
    elif resolution == 32:
        stages = [(fields(8), 2, 1), (fields(4), 3, 2), (fields(2), 3, 2),
                  (f, 3, 2), (f, 3, 2), (f, 1, 1), (f, 1, 1)]
    elif resolution == 16:
        stages = [(fields(8), 2, 1), (fields(4), 3, 2), (fields(2), 3, 2),
                  (f, 3, 2), (f, 1, 1), (f, 1, 1), (f, 1, 1)]
    elif resolution == 8:
        stages = [(fields(8), 2, 1), (fields(4), 3, 2), (f, 3, 2),
                  (f, 1, 1), (f, 1, 1), (f, 1, 1), (f, 1, 1)]
    else:
        raise ConfigError(f"unsupported resolution {resolution}")
    return stages


class VisionEncoder(Module):
    def __init__(self, cfg: ModelConfig, rng):
        n = cfg.group_order
        stages = vision_schedule(cfg.resolution, cfg.encoder_fields)
        layers = []
        fields_prev = None
        for i, (fields, kernel, stride) in enumerate(stages):
            if i == 0:
                layers.append(el.LiftConv(4, fields, n, kernel, stride, 0, rng=rng))
            else:
                layers.append(el.GroupConv(fields_prev, fields, n, kernel, stride, 0, rng=rng))
            fields_prev = fields
        self.layers = ModuleList(layers)
        self.out_type = regular_type(n, cfg.encoder_fields)
        self.in_type = trivial_type(n, 4)
        self.resolution = cfg.resolution

    def forward(self, image: GeometricTensor) -> GeometricTensor:
        if image.shape[-1] != self.resolution:
            raise ConfigError(f"expected {self.resolution}px input, got {image.shape[-1]}")
        x = image
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i + 1 < len(self.layers):
                x = el.pointwise_relu(x)
        return el.flatten_spatial(x)

    __call__ = forward


class ForceEncoder(Module):
    def __init__(self, cfg: ModelConfig, rng):
        n = cfg.group_order
        self.row_type = ftype(n, *FORCE_ROW_BLOCKS)
        self.lift = el.EqLinear(self.row_type, regular_type(n, cfg.force_token_fields), rng)
        self.attention = el.EqSelfAttention(
            cfg.force_token_fields, cfg.force_qk_fields, cfg.encoder_fields,
            n, cfg.force_tokens, rng, positional=cfg.positional_encoding)
        self.out_type = regular_type(n, cfg.encoder_fields)
        self.tokens = cfg.force_tokens

    def forward(self, history: GeometricTensor) -> GeometricTensor:
        if history.tensor.ndim != 3 or history.shape[-1] != 6:
            raise el.FeatureTypeError(f"force history must be (B, T, 6), got {history.shape}")
        tokens = self.attention(self.lift(history))
        pooled = dc.mean(tokens.tensor, axis=1)
        return GeometricTensor(pooled, self.out_type)

    __call__ = forward


class ProprioEncoder(Module):
    def __init__(self, cfg: ModelConfig, rng):
        n = cfg.group_order
        self.in_type = ftype(n, *PROPRIO_BLOCKS)
        widths = list(cfg.proprio_hidden) + [cfg.encoder_fields]
        layers = []
        prev = self.in_type
        for w in widths:
            nxt = regular_type(n, w)
            layers.append(el.EqLinear(prev, nxt, rng))
            prev = nxt
        self.layers = ModuleList(layers)
        self.out_type = prev

    def forward(self, proprio: GeometricTensor) -> GeometricTensor:
        x = proprio
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i + 1 < len(self.layers):
                x = el.pointwise_relu(x)
        return x

    __call__ = forward


class ObservationEncoder(Module):
    """Runs the enabled modality encoders and concatenates
    vision | force | proprio; disabled modalities contribute a learned
    invariant constant so the fused width is mask-independent."""

    def __init__(self, cfg: ModelConfig, rng):
        self.cfg = cfg
        n = cfg.group_order
        self.vision = VisionEncoder(cfg, rng)
        if "force" in cfg.modalities:
            self.force = ForceEncoder(cfg, rng)
        else:
            self.force_const = dc.Parameter(rng.standard_normal(cfg.encoder_fields) * 0.1)
        if "proprio" in cfg.modalities:
            self.proprio = ProprioEncoder(cfg, rng)
        else:
            self.proprio_const = dc.Parameter(rng.standard_normal(cfg.encoder_fields) * 0.1)
        self._const_idx = np.repeat(np.arange(cfg.encoder_fields), 2 * n)
        self.out_type = regular_type(n, 3 * cfg.encoder_fields)

    def _segment(self, name, batch, obs) -> GeometricTensor:
        cfg = self.cfg
        n = cfg.group_order
        if name == "force":
            if "force" in cfg.modalities:
                hist = GeometricTensor(dc.Tensor(obs["force"]), self.force.row_type)
                return self.force(hist)
            const = self.force_const
        else:
            if "proprio" in cfg.modalities:
                pro = GeometricTensor(dc.Tensor(obs["proprio"]), self.proprio.in_type)
                return self.proprio(pro)
            const = self.proprio_const
        vec = dc.take(const, self._const_idx, axis=0)
        tiled = dc.matmul(dc.Tensor(np.ones((batch, 1))), dc.reshape(vec, (1, -1)))
        return GeometricTensor(tiled, regular_type(n, cfg.encoder_fields))

    def forward(self, obs: dict) -> GeometricTensor:
        img = GeometricTensor(dc.Tensor(obs["image"]), self.vision.in_type, spatial=True)
        batch = img.shape[0]
        parts = [
            self.vision(img),
            self._segment("force", batch, obs),
            self._segment("proprio", batch, obs),
        ]
        fused = el.concat_features(parts)
        return GeometricTensor(fused.tensor, self.out_type)

    __call__ = forward


class ActorHead(Module):
    def __init__(self, cfg: ModelConfig, rng):
        n = cfg.group_order
        fused = regular_type(n, 3 * cfg.encoder_fields)
        hidden = regular_type(n, cfg.fusion_fields)
        self.h1 = el.EqLinear(fused, hidden, rng)
        self.h2 = el.EqLinear(hidden, hidden, rng)
        self.out = el.EqLinear(hidden, cfg.actor_output_type(), rng)
        self.out_type = cfg.actor_output_type()

    def forward(self, fused: GeometricTensor) -> GeometricTensor:
        x = el.pointwise_relu(self.h1(fused))
        x = el.pointwise_relu(self.h2(x))
        return self.out(x)

    __call__ = forward


class CriticHead(Module):
    """Action lifted to regular features, fused with the state encoding,
    group-pooled to invariants, then two independent scalar heads."""

    def __init__(self, cfg: ModelConfig, rng):
        n = cfg.group_order
        self.action_type = ftype(n, *ACTION_BLOCKS)
        self.action_lift = el.EqLinear(self.action_type, regular_type(n, cfg.action_fields), rng)
        fused = regular_type(n, 3 * cfg.encoder_fields + cfg.action_fields)
        hidden = regular_type(n, cfg.fusion_fields)
        self.h1 = el.EqLinear(fused, hidden, rng)
        self.h2 = el.EqLinear(hidden, hidden, rng)
        pooled = trivial_type(n, cfg.fusion_fields)
        self.q1 = el.EqLinear(pooled, trivial_type(n, 1), rng)
        self.q2 = el.EqLinear(pooled, trivial_type(n, 1), rng)

    def forward(self, fused: GeometricTensor, action: GeometricTensor):
        a = self.action_lift(action)
        x = el.concat_features([fused, a])
        x = el.pointwise_relu(self.h1(x))
        x = el.pointwise_relu(self.h2(x))
        pooled = el.group_pool(x)
        return self.q1(pooled).tensor, self.q2(pooled).tensor

    __call__ = forward


# -- conventional counterparts ------------------------------------------------

def _scaled(width: int, scale: float) -> int:
    return max(int(round(width * scale)), 2)


class PlainVisionEncoder(Module):
    def __init__(self, cfg: ModelConfig, scale: float, rng):
        n = cfg.group_order
        stages = vision_schedule(cfg.resolution, cfg.encoder_fields)
        layers = []
        prev = 4
        self.out_dim = _scaled(cfg.encoder_fields * 2 * n, scale)
        for i, (fields, kernel, stride) in enumerate(stages):
            ch = _scaled(fields * 2 * n, scale)
            if i == len(stages) - 1:
                ch = self.out_dim
            layers.append(el.PlainConv(prev, ch, kernel, stride, 0, rng=rng))
            prev = ch
        self.layers = ModuleList(layers)
        self.resolution = cfg.resolution

    def forward(self, t):
        x = t
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i + 1 < len(self.layers):
                x = dc.relu(x)
        return dc.reshape(x, x.shape[:2])

    __call__ = forward


class PlainForceEncoder(Module):
    def __init__(self, cfg: ModelConfig, scale: float, rng):
        n = cfg.group_order
        token_dim = _scaled(cfg.force_token_fields * 2 * n, scale)
        qk_dim = _scaled(cfg.force_qk_fields * 2 * n, scale)
        self.out_dim = _scaled(cfg.encoder_fields * 2 * n, scale)
        self.lift = el.PlainLinear(6, token_dim, rng)
        self.attention = el.PlainSelfAttention(
            token_dim, qk_dim, self.out_dim, cfg.force_tokens, rng,
            positional=cfg.positional_encoding)

    def forward(self, t):
        return dc.mean(self.attention(self.lift(t)), axis=1)

    __call__ = forward


class PlainProprioEncoder(Module):
    def __init__(self, cfg: ModelConfig, scale: float, rng):
        n = cfg.group_order
        widths = [_scaled(w * 2 * n, scale) for w in cfg.proprio_hidden]
        self.out_dim = _scaled(cfg.encoder_fields * 2 * n, scale)
        dims = [6] + widths + [self.out_dim]
        self.layers = ModuleList([el.PlainLinear(a, b, rng) for a, b in zip(dims, dims[1:])])

    def forward(self, t):
        x = t
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i + 1 < len(self.layers):
                x = dc.relu(x)
        return x

    __call__ = forward


class PlainObservationEncoder(Module):
    def __init__(self, cfg: ModelConfig, scale: float, rng):
        self.cfg = cfg
        self.seg_dim = _scaled(cfg.encoder_fields * 2 * cfg.group_order, scale)
        self.vision = PlainVisionEncoder(cfg, scale, rng)
        if "force" in cfg.modalities:
            self.force = PlainForceEncoder(cfg, scale, rng)
        else:
            self.force_const = dc.Parameter(rng.standard_normal(self.seg_dim) * 0.1)
        if "proprio" in cfg.modalities:
            self.proprio = PlainProprioEncoder(cfg, scale, rng)
        else:
            self.proprio_const = dc.Parameter(rng.standard_normal(self.seg_dim) * 0.1)
        self.out_dim = 3 * self.seg_dim

    def _segment(self, name, batch, obs):
        cfg = self.cfg
        if name == "force" and "force" in cfg.modalities:
            return self.force(dc.Tensor(obs["force"]))
        if name == "proprio" and "proprio" in cfg.modalities:
            return self.proprio(dc.Tensor(obs["proprio"]))
        const = self.force_const if name == "force" else self.proprio_const
        return dc.matmul(dc.Tensor(np.ones((batch, 1))), dc.reshape(const, (1, -1)))

    def forward(self, obs):
        img = dc.Tensor(obs["image"])
        batch = img.shape[0]
        parts = [self.vision(img), self._segment("force", batch, obs),
                 self._segment("proprio", batch, obs)]
        return dc.concat(parts, axis=-1)

    __call__ = forward


class PlainActorHead(Module):
    def __init__(self, cfg: ModelConfig, in_dim: int, scale: float, rng):
        hidden = _scaled(cfg.fusion_fields * 2 * cfg.group_order, scale)
        self.h1 = el.PlainLinear(in_dim, hidden, rng)
        self.h2 = el.PlainLinear(hidden, hidden, rng)
        self.out = el.PlainLinear(hidden, cfg.actor_output_type().dim, rng)

    def forward(self, fused):
        x = dc.relu(self.h1(fused))
        x = dc.relu(self.h2(x))
        return self.out(x)

    __call__ = forward


class PlainCriticHead(Module):
    def __init__(self, cfg: ModelConfig, in_dim: int, scale: float, rng):
        hidden = _scaled(cfg.fusion_fields * 2 * cfg.group_order, scale)
        act_dim = _scaled(cfg.action_fields * 2 * cfg.group_order, scale)
        self.action_lift = el.PlainLinear(5, act_dim, rng)
        self.h1 = el.PlainLinear(in_dim + act_dim, hidden, rng)
        self.h2 = el.PlainLinear(hidden, hidden, rng)
        self.q1 = el.PlainLinear(hidden, 1, rng)
        self.q2 = el.PlainLinear(hidden, 1, rng)

    def forward(self, fused, action):
        a = self.action_lift(action)
        x = dc.concat([fused, a], axis=-1)
        x = dc.relu(self.h1(x))
        x = dc.relu(self.h2(x))
        return self.q1(x), self.q2(x)

    __call__ = forward


# -- assembled model -----------------------------------------------------------

class AgentModel(Module):
    """Shared observation encoder plus actor head and twin-critic head."""

    def __init__(self, cfg: ModelConfig, rng):
        self.cfg = cfg
        if cfg.conventional:
            scale = cfg.cnn_scale or calibrate_cnn_scale(cfg)
            self.cnn_scale = scale
            self.encoder = PlainObservationEncoder(cfg, scale, rng)
            self.actor = PlainActorHead(cfg, self.encoder.out_dim, scale, rng)
            self.critic = PlainCriticHead(cfg, self.encoder.out_dim, scale, rng)
        else:
            self.encoder = ObservationEncoder(cfg, rng)
            self.actor = ActorHead(cfg, rng)
            self.critic = CriticHead(cfg, rng)

    def encode(self, obs):
        return self.encoder(obs)

    def actor_forward(self, fused):
        """Raw actor output tensor (B, out_dim) from a fused encoding."""
        if self.cfg.conventional:
            return self.actor(fused)
        return self.actor(fused).tensor

    def critic_forward(self, fused, action_array):
        if self.cfg.conventional:
            return self.critic(fused, dc.as_tensor(action_array))
        act = GeometricTensor(dc.as_tensor(action_array), self.critic.action_type)
        return self.critic(fused, act)


def build_agent_model(cfg: ModelConfig, rng) -> AgentModel:
    return AgentModel(cfg, rng)


def calibrate_cnn_scale(cfg: ModelConfig, tolerance=0.02) -> float:
    """Find the channel multiplier making the conventional model's parameter
    count match the equivariant model's free-parameter count."""
    target = AgentModel(replace(cfg, conventional=False), np.random.default_rng(0)).param_count()

    def count(scale):
        model = AgentModel(replace(cfg, conventional=True, cnn_scale=scale), np.random.default_rng(0))
        return model.param_count()

    lo, hi = 0.05, 1.5
    for _ in range(40):
        mid = 0.5 * (lo + hi)
        c = count(mid)
        if abs(c - target) / target <= tolerance:
            return mid
        if c > target:
            hi = mid
        else:
            lo = mid
    return 0.5 * (lo + hi)


def parameter_report(cfg: ModelConfig) -> dict:
    eq = AgentModel(replace(cfg, conventional=False), np.random.default_rng(0))
    cnn = AgentModel(replace(cfg, conventional=True), np.random.default_rng(0))
    ne, nc = eq.param_count(), cnn.param_count()
    return {
        "equivariant": ne,
        "conventional": nc,
        "cnn_scale": cnn.cnn_scale,
        "relative_gap": abs(nc - ne) / ne,
    }
