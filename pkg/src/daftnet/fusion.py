"""Image + tabular fusion networks.

All variants share a 3-D ResNet backbone (stem convolution, residual blocks,
global average pooling). They differ in where the tabular vector enters:

* ``image_only`` / ``tabular_linear`` - unimodal baselines
* ``linear_with_resnet_features`` - linear head on a frozen image model's latent plus x
* ``concat_1fc``, ``concat_2fc``, ``fc1_concat_fc1`` - concatenation heads
* ``duanmu`` - sigmoid gates from x multiply every residual block output
* ``film`` - per-channel scale/shift predicted from x alone
* ``daft`` - per-channel scale/shift predicted from pooled feature maps and x
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from . import tensor as T
from .nn import HOOK_POINTS, BatchNorm3d, Conv3d, Linear, Module, ResBlock, kaiming_init
from .tensor import Tensor

VARIANTS = ("image_only", "tabular_linear", "linear_with_resnet_features", "concat_1fc",
            "concat_2fc", "fc1_concat_fc1", "duanmu", "film", "daft")
TASKS = ("diagnosis", "survival")
SCALE_ACTIVATIONS = {"identity": T.identity, "sigmoid": T.sigmoid, "tanh": T.tanh}
MODULATED = ("film", "daft")


@dataclass
class DaftConfig:
    bottleneck_dim: int | None = 4
    squeeze_factor: int = 7
    scale_activation: str = "identity"
    scale_enabled: bool = True
    shift_enabled: bool = True
    location: str = "before_conv1"
    condition_on_image: bool = True

    def __post_init__(self):
        if self.scale_activation not in SCALE_ACTIVATIONS:
            raise ValueError(f"scale_activation must be one of {sorted(SCALE_ACTIVATIONS)}, got {self.scale_activation!r}")
        if self.location not in HOOK_POINTS:
            raise ValueError(f"location must be one of {HOOK_POINTS}, got {self.location!r}")
        if not (self.scale_enabled or self.shift_enabled):
            raise ValueError("at least one of scale_enabled / shift_enabled must be true")
        if self.bottleneck_dim is not None and self.bottleneck_dim < 1:
            raise ValueError("bottleneck_dim must be positive")
        if self.squeeze_factor < 1:
            raise ValueError("squeeze_factor must be positive")

    def bottleneck(self, input_dim: int) -> int:
        """Width of the squeeze layer; an explicit bottleneck_dim wins over the squeeze factor."""
        if self.bottleneck_dim is not None:
            return self.bottleneck_dim
        return max(1, input_dim // self.squeeze_factor)


@dataclass
class ModelConfig:
    fusion_variant: str = "daft"
    task: str = "diagnosis"
    in_channels: int = 1
    stem_channels: int = 8
    stem_stride: int = 1
    block_channels: tuple = (16, 32, 64, 64)
    block_strides: tuple = (2, 2, 2, 1)
    tabular_dim: int = 15
    bottleneck_dim: int = 4
    num_classes: int = 3
    daft: DaftConfig = field(default_factory=DaftConfig)

    def __post_init__(self):
        if isinstance(self.daft, dict):
            self.daft = DaftConfig(**self.daft)
        self.block_channels = tuple(int(c) for c in self.block_channels)
        self.block_strides = tuple(int(s) for s in self.block_strides)
        errors = []
        if self.fusion_variant not in VARIANTS:
            errors.append(f"unknown fusion_variant {self.fusion_variant!r}; expected one of {VARIANTS}")
        if self.task not in TASKS:
            errors.append(f"task must be one of {TASKS}, got {self.task!r}")
        if len(self.block_channels) != len(self.block_strides) or not self.block_channels:
            errors.append("block_channels and block_strides must be non-empty and of equal length")
        if self.tabular_dim < 1:
            errors.append("tabular_dim must be positive")
        if errors:
            raise ValueError("; ".join(errors))

    @property
    def outputs(self) -> int:
        return self.num_classes if self.task == "diagnosis" else 1

    @property
    def latent_dim(self) -> int:
        return self.block_channels[-1]

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["block_channels"] = list(self.block_channels)
        d["block_strides"] = list(self.block_strides)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - names)
        if unknown:
            raise ValueError(f"unknown model config key(s): {unknown}")
        return cls(**d)


class ModulationPair(NamedTuple):
    alpha: Tensor
    beta: Tensor


def daft_transform(feature_map: Tensor, mod: ModulationPair) -> Tensor:
    """``out[n, c] = alpha[n, c] * F[n, c] + beta[n, c]``."""
    if mod.alpha.shape != feature_map.shape[:2] or mod.beta.shape != feature_map.shape[:2]:
        raise ValueError(f"modulation {mod.alpha.shape}/{mod.beta.shape} does not match feature map {feature_map.shape}")
    scaled = T.mul(feature_map, T.broadcast_channelwise(mod.alpha, feature_map))
    return T.add(scaled, T.broadcast_channelwise(mod.beta, feature_map))


@dataclass(frozen=True)
class ModulationOverride:
    """Test-time replacement or perturbation of the predicted scale/shift.

    ``alpha`` / ``beta`` replace the predicted values (shape (C,) or (N, C));
    ``alpha_noise`` / ``beta_noise`` add i.i.d. N(0, sigma^2) noise per
    instance and channel.
    """

    alpha: np.ndarray | None = None
    beta: np.ndarray | None = None
    alpha_noise: float = 0.0
    beta_noise: float = 0.0
    seed: int = 0

    def __or__(self, other: ModulationOverride) -> ModulationOverride:
        return ModulationOverride(
            alpha=other.alpha if other.alpha is not None else self.alpha,
            beta=other.beta if other.beta is not None else self.beta,
            alpha_noise=other.alpha_noise or self.alpha_noise,
            beta_noise=other.beta_noise or self.beta_noise,
            seed=other.seed if (other.alpha_noise or other.beta_noise) else self.seed,
        )

    def apply(self, mod: ModulationPair, rng: np.random.Generator) -> ModulationPair:
        alpha, beta = mod
        dtype = alpha.dtype
        if self.alpha is not None:
            alpha = Tensor(np.broadcast_to(np.asarray(self.alpha, dtype=dtype), alpha.shape))
        if self.beta is not None:
            beta = Tensor(np.broadcast_to(np.asarray(self.beta, dtype=dtype), beta.shape))
        if self.alpha_noise:
            alpha = T.add(alpha, rng.normal(0.0, self.alpha_noise, alpha.shape).astype(dtype))
        if self.beta_noise:
            beta = T.add(beta, rng.normal(0.0, self.beta_noise, beta.shape).astype(dtype))
        return ModulationPair(alpha, beta)


def fix_alpha(values) -> ModulationOverride:
    return ModulationOverride(alpha=np.asarray(values))


def fix_beta(values) -> ModulationOverride:
    return ModulationOverride(beta=np.asarray(values))


def noise_alpha(sigma: float, seed: int = 0) -> ModulationOverride:
    return ModulationOverride(alpha_noise=float(sigma), seed=seed)


def noise_beta(sigma: float, seed: int = 0) -> ModulationOverride:
    return ModulationOverride(beta_noise=float(sigma), seed=seed)


class AffineModulator(Module):
    """Auxiliary network predicting a per-channel scale and shift.

    pool(F) ++ x -> FC (no bias) -> ReLU -> FC (no bias) -> [alpha_raw, beta];
    ``alpha = sigma(alpha_raw)``. With ``condition_on_image=False`` (FiLM) the
    input is x alone.
    """

    def __init__(self, channels: int, tabular_dim: int, cfg: DaftConfig):
        self.channels, self.tabular_dim, self.cfg = channels, tabular_dim, cfg
        in_dim = channels + tabular_dim if cfg.condition_on_image else tabular_dim
        b = cfg.bottleneck(in_dim)
        if in_dim < b:
            raise ValueError(f"bottleneck {b} wider than its input {in_dim}; the squeeze layer must not expand")
        self.bottleneck_dim = b
        self.squeeze = Linear(in_dim, b, bias=False)
        self.expand = Linear(b, 2 * channels, bias=False)
        self.last: ModulationPair | None = None

    def aux(self, feature_map: Tensor, tabular: Tensor) -> ModulationPair:
        if tabular.shape[1] != self.tabular_dim:
            raise ValueError(f"expected {self.tabular_dim} tabular features, got {tabular.shape[1]}")
        if self.cfg.condition_on_image:
            v = T.concat_lastdim([T.global_avg_pool3d(feature_map), tabular])
        else:
            v = tabular
        out = self.expand(T.relu(self.squeeze(v)))
        c = self.channels
        alpha = SCALE_ACTIVATIONS[self.cfg.scale_activation](T.slice_lastdim(out, 0, c))
        beta = T.slice_lastdim(out, c, 2 * c)
        if not self.cfg.scale_enabled:
            alpha = Tensor(np.ones(alpha.shape, dtype=alpha.dtype))
        if not self.cfg.shift_enabled:
            beta = Tensor(np.zeros(beta.shape, dtype=beta.dtype))
        return ModulationPair(alpha, beta)

    def forward(self, feature_map: Tensor, tabular: Tensor, override: ModulationOverride | None = None,
                rng: np.random.Generator | None = None) -> Tensor:
        mod = self.aux(feature_map, tabular)
        if override is not None:
            mod = override.apply(mod, rng if rng is not None else np.random.default_rng(override.seed))
        self.last = mod
        return daft_transform(feature_map, mod)


def daft_aux(module: AffineModulator, feature_map: Tensor, tabular: Tensor) -> ModulationPair:
    return module.aux(feature_map, tabular)


class DuanmuGates(Module):
    """One bias-free FC + sigmoid per gated block, mapping x to a gate per feature map."""

    def __init__(self, tabular_dim: int, channel_counts: Sequence[int]):
        self.fcs = [Linear(tabular_dim, c, bias=False) for c in channel_counts]

    def forward(self, tabular: Tensor) -> list[Tensor]:
        return [T.sigmoid(fc(tabular)) for fc in self.fcs]


def duanmu_gate(module: DuanmuGates, tabular: Tensor) -> list[Tensor]:
    return module(tabular)


def apply_gate(feature_map: Tensor, gate: Tensor) -> Tensor:
    return T.mul(feature_map, T.broadcast_channelwise(gate, feature_map))


class Backbone(Module):
    """Stem convolution, residual blocks and global average pooling."""

    def __init__(self, cfg: ModelConfig, last_bn1_affine: bool = True, last_projection: bool = False):
        self.stem = Conv3d(cfg.in_channels, cfg.stem_channels, 3, cfg.stem_stride)
        self.stem_bn = BatchNorm3d(cfg.stem_channels)
        blocks = []
        c_in = cfg.stem_channels
        last = len(cfg.block_channels) - 1
        for i, (c, s) in enumerate(zip(cfg.block_channels, cfg.block_strides)):
            blocks.append(ResBlock(c_in, c, s, projection=last_projection and i == last,
                                   bn1_affine=last_bn1_affine or i != last))
            c_in = c
        self.blocks = blocks

    @property
    def last_block(self) -> ResBlock:
        return self.blocks[-1]

    def forward(self, image: Tensor, hook=None, gates: list[Tensor] | None = None) -> Tensor:
        h = T.relu(self.stem_bn(self.stem(image)))
        last = len(self.blocks) - 1
        for i, block in enumerate(self.blocks):
            h = block(h, hook if i == last else None)
            if gates is not None:
                h = apply_gate(h, gates[i])
        return T.global_avg_pool3d(h)


def _needs_image(variant: str) -> bool:
    return variant != "tabular_linear"


class FusionModel(Module):
    """A network assembled from a :class:`ModelConfig`; see :func:`build_model`."""

    def __init__(self, cfg: ModelConfig, feature_model: FusionModel | None = None):
        self.cfg = cfg
        v, k, p = cfg.fusion_variant, cfg.outputs, cfg.tabular_dim
        latent = cfg.latent_dim
        head_bias = cfg.task == "diagnosis"
        self._frozen: dict[str, FusionModel] = {}
        if v in MODULATED:
            daft_cfg = dataclasses.replace(cfg.daft, condition_on_image=(v == "daft"))
            loc = daft_cfg.location
            self.backbone = Backbone(cfg, last_bn1_affine=(loc != "before_relu1"),
                                     last_projection=(loc == "before_shortcut_conv"))
            channels = self.backbone.last_block.hook_channels(loc)
            self.modulator = AffineModulator(channels, p, daft_cfg)
            self.head = Linear(latent, k, bias=head_bias)
        elif v == "tabular_linear":
            self.head = Linear(p, k, bias=head_bias)
        elif v == "linear_with_resnet_features":
            if feature_model is None:
                feature_model = FusionModel(dataclasses.replace(cfg, fusion_variant="image_only"))
            if feature_model.cfg.fusion_variant != "image_only":
                raise ValueError("linear_with_resnet_features needs an image_only feature model")
            self._frozen["features"] = feature_model
            self.head = Linear(feature_model.cfg.latent_dim + p, k, bias=head_bias)
        else:
            self.backbone = Backbone(cfg)
            if v == "duanmu":
                self.gates = DuanmuGates(p, cfg.block_channels)
                self.head = Linear(latent, k, bias=head_bias)
            elif v == "image_only":
                self.head = Linear(latent, k, bias=head_bias)
            elif v == "concat_1fc":
                self.head = Linear(latent + p, k, bias=head_bias)
            elif v == "concat_2fc":
                self.fc_bottleneck = Linear(latent + p, cfg.bottleneck_dim)
                self.head = Linear(cfg.bottleneck_dim, k, bias=head_bias)
            elif v == "fc1_concat_fc1":
                self.fc_tabular = Linear(p, cfg.bottleneck_dim)
                self.head = Linear(latent + cfg.bottleneck_dim, k, bias=head_bias)

    @property
    def variant(self) -> str:
        return self.cfg.fusion_variant

    @property
    def has_modulation(self) -> bool:
        return self.variant in MODULATED

    @property
    def feature_model(self) -> FusionModel | None:
        return self._frozen.get("features")

    def latent(self, image: Tensor) -> Tensor:
        """Pooled image representation (no tabular input involved)."""
        return self.backbone(image)

    def forward(self, image, tabular, override: ModulationOverride | None = None,
                bypass_modulation: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        v = self.variant
        tabular = tabular if isinstance(tabular, Tensor) else Tensor(tabular)
        if _needs_image(v):
            image = image if isinstance(image, Tensor) else Tensor(image)
        if override is not None and not self.has_modulation:
            raise ValueError(f"variant {v!r} has no scale/shift to override")
        if v == "tabular_linear":
            return self.head(tabular)
        if v == "linear_with_resnet_features":
            fm = self.feature_model
            fm.eval()
            feats = Tensor(fm.latent(image.detach()).data)
            return self.head(T.concat_lastdim([feats, tabular]))
        if v in MODULATED:
            loc = self.modulator.cfg.location

            def hook(name, t):
                if name != loc or bypass_modulation:
                    return t
                return self.modulator(t, tabular, override, rng)
            return self.head(self.backbone(image, hook=hook))
        if v == "duanmu":
            return self.head(self.backbone(image, gates=self.gates(tabular)))
        z = self.backbone(image)
        if v == "image_only":
            return self.head(z)
        if v == "concat_1fc":
            return self.head(T.concat_lastdim([z, tabular]))
        if v == "concat_2fc":
            return self.head(T.relu(self.fc_bottleneck(T.concat_lastdim([z, tabular]))))
        if v == "fc1_concat_fc1":
            return self.head(T.concat_lastdim([z, T.relu(self.fc_tabular(tabular))]))
        raise ValueError(f"unknown variant {v!r}")

    def state_dict(self) -> dict[str, np.ndarray]:
        state = super().state_dict()
        if self.feature_model is not None:
            state.update({f"frozen_features.{k}": v for k, v in self.feature_model.state_dict().items()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = {k: v for k, v in state.items() if not k.startswith("frozen_features.")}
        frozen = {k[len("frozen_features."):]: v for k, v in state.items() if k.startswith("frozen_features.")}
        super().load_state_dict(own)
        if self.feature_model is not None:
            self.feature_model.load_state_dict(frozen)

    def preceding_batchnorm(self) -> BatchNorm3d | None:
        """The BatchNorm whose output feeds the modulation hook directly, if any."""
        if self.has_modulation and self.modulator.cfg.location == "before_relu1":
            return self.backbone.last_block.bn1
        return None


def build_model(cfg: ModelConfig, seed: int = 0, feature_model: FusionModel | None = None,
                dtype="float32") -> FusionModel:
    """Assemble and He-initialize the network described by ``cfg``."""
    if isinstance(cfg, dict):
        cfg = ModelConfig.from_dict(cfg)
    model = FusionModel(cfg, feature_model=feature_model)
    kaiming_init(model, seed)
    return model.astype(dtype)


def modulation_param_count(channels: int, tabular_dim: int, bottleneck: int, condition_on_image: bool = True) -> int:
    """(C + P) * b + b * 2C for DAFT; P * b + b * 2C for FiLM."""
    in_dim = channels + tabular_dim if condition_on_image else tabular_dim
    return in_dim * bottleneck + bottleneck * 2 * channels


def _batches(n: int, batch_size: int):
    for start in range(0, n, batch_size):
        yield slice(start, min(n, start + batch_size))


def forward_with_override(model: FusionModel, image, tabular, override=None, batch_size: int = 64,
                          rng: np.random.Generator | None = None) -> np.ndarray:
    """Eval-mode predictions with the scale/shift replaced or perturbed.

    ``override`` may be None, a :class:`ModulationOverride` or a sequence of
    them (combined left to right). Noise is drawn from one generator seeded by
    the override, so results do not depend on ``batch_size`` ordering.
    """
    if override is not None and not isinstance(override, ModulationOverride):
        combined = ModulationOverride()
        for o in override:
            combined = combined | o
        override = combined
    if override is not None and not model.has_modulation:
        raise ValueError(f"variant {model.variant!r} has no scale/shift to override")
    if rng is None and override is not None:
        rng = np.random.default_rng(override.seed)
    model.eval()
    tabular = np.asarray(tabular)
    outs = []
    for sl in _batches(len(tabular), batch_size):
        img = None if image is None else image[sl]
        outs.append(model(img, tabular[sl], override=override, rng=rng).data)
    return np.concatenate(outs, axis=0)


def modulation_stats(model: FusionModel, image, tabular, batch_size: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """Mean scale and shift per channel over a dataset, in eval mode."""
    if not model.has_modulation:
        raise ValueError(f"variant {model.variant!r} has no scale/shift")
    tabular = np.asarray(tabular)
    if len(tabular) == 0:
        raise ValueError("modulation_stats needs a non-empty dataset")
    model.eval()
    sum_a = sum_b = 0.0
    for sl in _batches(len(tabular), batch_size):
        model(image[sl], tabular[sl])
        a, b = model.modulator.last
        sum_a = sum_a + a.data.astype(np.float64).sum(axis=0)
        sum_b = sum_b + b.data.astype(np.float64).sum(axis=0)
    return sum_a / len(tabular), sum_b / len(tabular)
