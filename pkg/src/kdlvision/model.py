"""Frozen experts, DenseNet student, fusion heads and the residual baseline.

The composite forward pass is::

    experts  e_i(x)               frozen backbone + trainable dense head
    fusion_a(concat(e_1, e_2, e_3))
    fusion_b(concat(student(x), fusion_a(...)))   # default "interpretation" wiring

With ``fusion_b_input = "raw_experts"`` fusion_b reads the raw expert logits
instead and fusion_a is not built.
"""

import dataclasses
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from . import tensor as T
from .checkpoint import load_parameters, read_config, sidecar_path
from .errors import ShapeMismatch
from .nn import Conv2d, Dense, Module

EXPERT_WIDTHS = {"A": (16, 32), "B": (16, 32, 48), "C": (16, 32, 48, 64)}
FUSION_B_INPUTS = ("interpretation", "raw_experts")
# samples lie in [0, 1]; first-layer biases start out cancelling a mid-gray input
INPUT_MID = 0.5


@dataclass
class ModelConfig:
    num_classes: int
    image_size: int = 64
    stem_channels: int = 16
    stem_stride: int = 2
    stem_pool: int = 2
    dense_blocks: int = 2
    dense_layers: int = 4
    growth: int = 12
    fusion_hidden: int = 64
    fusion_b_input: str = "interpretation"
    baseline_channels: int = 32
    baseline_blocks: int = 2

    def __post_init__(self):
        if self.fusion_b_input not in FUSION_B_INPUTS:
            raise ValueError(f"fusion_b_input must be one of {FUSION_B_INPUTS}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")

    @classmethod
    def from_mapping(cls, mapping):
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        return cls(**{k: types[k](v) for k, v in mapping.items() if k in types})

    @classmethod
    def keys(cls):
        return [f.name for f in dataclasses.fields(cls)]


# ------------------------------------------------------------------ building blocks

class ConvStage(Module):
    """3x3 conv, ReLU, 2x2 max-pool."""

    def __init__(self, c_in, c_out, rng, input_mid=None):
        self.conv = Conv2d(c_in, c_out, 3, rng, input_mid=input_mid)

    def forward(self, x):
        return T.max_pool2d(T.relu(self.conv(x)), 2)


class MLP3(Module):
    """Three dense layers, ReLU between them and none after the last."""

    def __init__(self, n_in, hidden, n_out, rng):
        self.layers = [Dense(n_in, hidden, rng), Dense(hidden, hidden, rng), Dense(hidden, n_out, rng)]

    def forward(self, x):
        x = T.relu(self.layers[0](x))
        x = T.relu(self.layers[1](x))
        return self.layers[2](x)


class Expert(Module):
    def __init__(self, widths, num_classes, rng, in_channels=3, variant=None):
        self.variant = variant
        self.widths = tuple(widths)
        chans = (in_channels,) + self.widths
        self.backbone = [
            ConvStage(a, b, rng, input_mid=INPUT_MID if i == 0 else None)
            for i, (a, b) in enumerate(zip(chans[:-1], chans[1:]))
        ]
        self.head = Dense(self.widths[-1], num_classes, rng)

    @classmethod
    def from_variant(cls, variant, num_classes, rng):
        return cls(EXPERT_WIDTHS[variant], num_classes, rng, variant=variant)

    @property
    def num_classes(self):
        return self.head.weight.shape[1]

    def features(self, x):
        for stage in self.backbone:
            x = stage(x)
        return T.global_avg_pool(x)

    def forward(self, x, features=None):
        return self.head(self.features(x) if features is None else features)

    def freeze_backbone(self):
        for stage in self.backbone:
            stage.freeze()
        return self

    def reset_head(self, num_classes, rng):
        """Swap in a fresh head for ``num_classes`` and freeze the backbone."""
        self.head = Dense(self.widths[-1], num_classes, rng)
        return self.freeze_backbone()

    def config_dict(self):
        return {
            "arch": "expert",
            "variant": self.variant or "",
            "widths": "-".join(map(str, self.widths)),
            "num_classes": self.num_classes,
        }


class DenseBlock(Module):
    """Each layer sees the channel-concatenation of the block input and all earlier layer outputs."""

    def __init__(self, c_in, layers, growth, rng):
        self.c_in = c_in
        self.growth = growth
        self.layers = [Conv2d(c_in + i * growth, growth, 3, rng) for i in range(layers)]
        self.trace = []

    @property
    def out_channels(self):
        return self.c_in + len(self.layers) * self.growth

    def forward(self, x):
        feats = [x]
        self.trace = []
        for conv in self.layers:
            inp = feats[0] if len(feats) == 1 else T.concat(feats, axis=1)
            self.trace.append(inp.shape[1])
            feats.append(T.relu(conv(inp)))
        return T.concat(feats, axis=1)


class Transition(Module):
    def __init__(self, c_in, c_out, rng):
        self.conv = Conv2d(c_in, c_out, 1, rng)

    def forward(self, x):
        return T.max_pool2d(T.relu(self.conv(x)), 2)


class StudentDenseNet(Module):
    def __init__(self, config, rng, in_channels=3):
        self.stem_pool = config.stem_pool
        self.stem = Conv2d(in_channels, config.stem_channels, 3, rng, stride=config.stem_stride, input_mid=INPUT_MID)
        c = config.stem_channels
        self.blocks, self.transitions = [], []
        for b in range(config.dense_blocks):
            block = DenseBlock(c, config.dense_layers, config.growth, rng)
            self.blocks.append(block)
            c = block.out_channels
            if b < config.dense_blocks - 1:
                self.transitions.append(Transition(c, c // 2, rng))
                c //= 2
        self.head = Dense(c, config.num_classes, rng)

    def features(self, x):
        """Final feature map entering the global pool (the Grad-CAM layer)."""
        x = T.relu(self.stem(x))
        if self.stem_pool > 1:
            x = T.max_pool2d(x, self.stem_pool)
        for i, block in enumerate(self.blocks):
            x = block(x)
            if i < len(self.transitions):
                x = self.transitions[i](x)
        return x

    def forward_features(self, x):
        a = self.features(x)
        return self.head(T.global_avg_pool(a)), a

    def forward(self, x):
        return self.forward_features(x)[0]


class KdlOutput(NamedTuple):
    logits: T.Tensor
    expert_logits: list
    fusion_a: Optional[T.Tensor]
    student_logits: T.Tensor
    student_features: T.Tensor


class KdlModel(Module):
    def __init__(self, config, experts, rng):
        if len(experts) != 3:
            raise ValueError(f"KdlModel needs exactly 3 experts, got {len(experts)}")
        c = config.num_classes
        for e in experts:
            if e.num_classes != c:
                raise ValueError(f"expert head has {e.num_classes} outputs, expected {c}")
            e.freeze_backbone()
        self.config = config
        self.experts = list(experts)
        self.fusion_a = MLP3(3 * c, config.fusion_hidden, c, rng) if config.fusion_b_input == "interpretation" else None
        self.student = StudentDenseNet(config, rng)
        fb_in = 2 * c if config.fusion_b_input == "interpretation" else 4 * c
        self.fusion_b = MLP3(fb_in, config.fusion_hidden, c, rng)
        self.class_names = None

    def _check_input(self, x):
        s = self.config.image_size
        if x.ndim != 4 or x.shape[1:] != (3, s, s):
            raise ShapeMismatch(f"expected input [B, 3, {s}, {s}], got {tuple(x.shape)}")

    def backbone_features(self, x):
        """Pooled activations of every frozen expert backbone, as plain arrays."""
        self._check_input(x)
        with T.no_grad():
            return [e.features(x).data for e in self.experts]

    def forward_all(self, x, backbone_features=None):
        x = x if isinstance(x, T.Tensor) else T.Tensor(x)
        self._check_input(x)
        if backbone_features is None:
            expert_logits = [e(x) for e in self.experts]
        else:
            expert_logits = [e(x, features=T.Tensor(f)) for e, f in zip(self.experts, backbone_features)]
        student_logits, feats = self.student.forward_features(x)
        if self.fusion_a is not None:
            fused = self.fusion_a(T.concat(expert_logits, axis=1))
            logits = self.fusion_b(T.concat([student_logits, fused], axis=1))
        else:
            fused = None
            logits = self.fusion_b(T.concat([student_logits] + expert_logits, axis=1))
        return KdlOutput(logits, expert_logits, fused, student_logits, feats)

    def forward(self, x, backbone_features=None):
        return self.forward_all(x, backbone_features).logits

    def forward_features(self, x):
        out = self.forward_all(x)
        return out.logits, out.student_features

    def final_layer(self):
        return self.fusion_b.layers[-1]

    def config_dict(self):
        cfg = {"arch": "kdl", **dataclasses.asdict(self.config)}
        cfg["expert_widths"] = ";".join("-".join(map(str, e.widths)) for e in self.experts)
        cfg["expert_variants"] = ";".join(e.variant or "" for e in self.experts)
        if self.class_names:
            cfg["class_names"] = ";".join(self.class_names)
        return cfg


class ResidualBlock(Module):
    def __init__(self, channels, rng, skip=True):
        self.conv1 = Conv2d(channels, channels, 3, rng)
        self.conv2 = Conv2d(channels, channels, 3, rng)
        self.skip = skip

    def forward(self, x):
        y = self.conv2(T.relu(self.conv1(x)))
        return T.relu(T.add(y, x) if self.skip else y)


class BaselineResNetSmall(Module):
    def __init__(self, config, rng, skip=True):
        self.config = config
        ch = config.baseline_channels
        self.stem_pool = config.stem_pool
        self.stem = Conv2d(3, ch, 3, rng, stride=config.stem_stride, input_mid=INPUT_MID)
        self.blocks = [ResidualBlock(ch, rng, skip) for _ in range(config.baseline_blocks)]
        self.head = Dense(ch, config.num_classes, rng)
        self.class_names = None

    def features(self, x):
        x = x if isinstance(x, T.Tensor) else T.Tensor(x)
        x = T.relu(self.stem(x))
        if self.stem_pool > 1:
            x = T.max_pool2d(x, self.stem_pool)
        for block in self.blocks:
            x = block(x)
        return x

    def forward_features(self, x):
        a = self.features(x)
        return self.head(T.global_avg_pool(a)), a

    def forward(self, x):
        return self.forward_features(x)[0]

    def final_layer(self):
        return self.head

    def config_dict(self):
        cfg = {"arch": "baseline", **dataclasses.asdict(self.config)}
        if self.class_names:
            cfg["class_names"] = ";".join(self.class_names)
        return cfg


def trainable_parameters(model):
    return model.parameters().trainable()


def count_parameters(module):
    return module.parameters().count()


# ------------------------------------------------------------------ construction / loading

def build_kdl(config, experts, seed=0):
    return KdlModel(config, experts, np.random.default_rng([seed, 1]))


def build_baseline(config, seed=0, skip=True):
    return BaselineResNetSmall(config, np.random.default_rng([seed, 2]), skip=skip)


def load_expert(path):
    """Load a pretrained expert (backbone plus its pretext head)."""
    cfg = read_config(sidecar_path(path))
    widths = tuple(int(w) for w in cfg["widths"].split("-"))
    expert = Expert(widths, int(cfg["num_classes"]), np.random.default_rng(0), variant=cfg.get("variant") or None)
    expert.parameters().load(load_parameters(path))
    return expert


def load_model(path):
    """Rebuild a kdl/baseline/expert model from a checkpoint and its sidecar."""
    cfg = read_config(sidecar_path(path))
    arch = cfg.get("arch")
    if arch == "expert":
        return load_expert(path)
    config = ModelConfig.from_mapping(cfg)
    rng = np.random.default_rng(0)
    if arch == "kdl":
        variants = cfg.get("expert_variants", ";;").split(";")
        experts = [
            Expert(tuple(int(w) for w in spec.split("-")), config.num_classes, rng, variant=v or None)
            for spec, v in zip(cfg["expert_widths"].split(";"), variants)
        ]
        model = KdlModel(config, experts, rng)
    elif arch == "baseline":
        model = BaselineResNetSmall(config, rng)
    else:
        raise ValueError(f"{path}: unknown arch {arch!r}")
    model.parameters().load(load_parameters(path))
    if cfg.get("class_names"):
        model.class_names = cfg["class_names"].split(";")
    return model


def pretrain_expert(variant, train_records, val_records, preprocess, epochs, num_pretext_classes,
                    num_target_classes=None, config=None, seed=0, out_dir=None):
    """Train an expert on a pretext task, then (optionally) re-head it for the target task.

    The returned expert carries ``pretext_accuracy`` (validation accuracy on
    the pretext task). With ``num_target_classes`` set the backbone is frozen
    and a fresh head is drawn from ``seed``.
    """
    from .training import TrainConfig, evaluate_accuracy, train
    from .dataset import make_batches

    widths = EXPERT_WIDTHS[variant] if isinstance(variant, str) else tuple(variant)
    name = variant if isinstance(variant, str) else None
    expert = Expert(widths, num_pretext_classes, np.random.default_rng([seed, 3]), variant=name)
    cfg = dataclasses.replace(config or TrainConfig(), epochs=epochs, seed=seed)
    train(expert, train_records, val_records, cfg, preprocess, out_dir=out_dir)
    expert.pretext_accuracy = (
        evaluate_accuracy(expert, make_batches(val_records, 64, None, 0, preprocess)) if val_records else float("nan")
    )
    if num_target_classes is not None:
        expert.reset_head(num_target_classes, np.random.default_rng([seed, 4]))
    return expert
