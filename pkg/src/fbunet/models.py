"""U-Net, RU-Net and the three Feedback U-Net variants.

All five share one backbone layout: four encoder scales of two blocks with
max pooling between them, a two-block bottleneck, four decoder scales of
(transposed conv, skip concat, two blocks) and a 3x3 head followed by a
channel softmax. Variants differ only in which block type sits at each
position and in whether the backbone runs once or twice.

Feedback variants run the backbone twice with the same weights. Round 0 sees
the image; round 1 sees round 0's class probabilities. Each block keeps a
separate batch-norm set per round, and ConvLSTM cells carry their state from
round 0 into round 1.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import ops
from .autograd import Parameter, Precision, Tensor, no_grad
from .errors import ConfigError, ContractError, ShapeError
from .layers import ConvBNBlock, ConvLSTMCell, Module, RecurrentConvLayer, he_uniform

VARIANTS = ("unet", "runet", "feedback-plain", "feedback-rcl", "feedback-convlstm")
FEEDBACK_VARIANTS = ("feedback-plain", "feedback-rcl", "feedback-convlstm")
LOCATIONS = ("a", "b", "c", "d", "e")
FEEDBACK_INPUT_MODES = ("probs-only", "concat-image")
DEFAULT_FILTERS = (8, 16, 32, 64, 128)

# location tag -> backbone block names
LOCATION_BLOCKS = {
    "a": ("enc0_1",),
    "b": ("enc0_2",),
    "c": ("bott_1", "bott_2"),
    "d": ("dec0_1",),
    "e": ("dec0_2",),
}


@dataclass
class ModelConfig:
    variant: str = "feedback-convlstm"
    num_classes: int = 4
    filters: tuple = DEFAULT_FILTERS
    lstm_locations: tuple | None = None
    feedback_input: str = "probs-only"
    rcl_time_steps: int = 2
    lam: float = 0.5
    forget_bias: float = 1.0

    def __post_init__(self):
        self.filters = tuple(int(f) for f in self.filters)
        if self.lstm_locations is None:
            self.lstm_locations = LOCATIONS if self.variant == "feedback-convlstm" else ()
        self.lstm_locations = tuple(sorted(set(self.lstm_locations)))

    def validate(self):
        if self.variant not in VARIANTS:
            raise ConfigError("variant", f"unknown variant {self.variant!r}")
        if self.num_classes < 2:
            raise ConfigError("num_classes", "need at least 2 classes")
        if len(self.filters) != 5:
            raise ConfigError("filters", f"need exactly 5 widths, got {len(self.filters)}")
        if any(f < 1 for f in self.filters):
            raise ConfigError("filters", "all widths must be >= 1")
        bad = set(self.lstm_locations) - set(LOCATIONS)
        if bad:
            raise ConfigError("lstm_locations", f"unknown locations {sorted(bad)}")
        if self.variant == "feedback-convlstm":
            if not self.lstm_locations:
                raise ConfigError("lstm_locations", "feedback-convlstm needs at least one location")
        elif self.lstm_locations:
            raise ConfigError("lstm_locations", f"only valid for feedback-convlstm, not {self.variant}")
        if self.feedback_input not in FEEDBACK_INPUT_MODES:
            raise ConfigError("feedback_input", f"unknown mode {self.feedback_input!r}")
        if self.rcl_time_steps < 1:
            raise ConfigError("rcl_time_steps", "must be >= 1")
        if not np.isfinite(self.lam) or self.lam < 0:
            raise ConfigError("lam", "must be a finite non-negative number")
        return self

    @property
    def is_feedback(self) -> bool:
        return self.variant in FEEDBACK_VARIANTS

    def to_dict(self):
        d = asdict(self)
        d["filters"] = list(self.filters)
        d["lstm_locations"] = list(self.lstm_locations)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class ForwardOutput:
    probs_round1: Tensor
    probs_round2: Tensor | None = None
    first_layer_sum: Tensor | None = None

    @property
    def final(self) -> Tensor:
        return self.probs_round2 if self.probs_round2 is not None else self.probs_round1


class Upsample(Module):
    def __init__(self, cin, cout, rng, dtype):
        self.weight = Parameter(he_uniform(rng, (cin, cout, 2, 2), cin * 4, dtype))
        self.bias = Parameter(np.zeros(cout, dtype=dtype))

    def __call__(self, x):
        return ops.transposed_conv2d(x, self.weight, self.bias)


class Head(Module):
    def __init__(self, cin, classes, rng, dtype):
        self.weight = Parameter(he_uniform(rng, (classes, cin, 3, 3), cin * 9, dtype))
        self.bias = Parameter(np.zeros(classes, dtype=dtype))

    def __call__(self, x):
        return ops.channel_softmax(ops.conv2d(x, self.weight, self.bias))


def block_names():
    names = []
    for s in range(4):
        names += [f"enc{s}_1", f"enc{s}_2"]
    names += ["bott_1", "bott_2"]
    for s in range(3, -1, -1):
        names += [f"dec{s}_1", f"dec{s}_2"]
    return names


class UNetBackbone(Module):
    """Encoder-decoder with skip connections; blocks built by ``make_block``."""

    def __init__(self, in_channels, filters, classes, make_block, rng, dtype):
        self.blocks = {}
        cin = in_channels
        for s in range(4):
            self._add(f"enc{s}_1", make_block(f"enc{s}_1", cin, filters[s]))
            self._add(f"enc{s}_2", make_block(f"enc{s}_2", filters[s], filters[s]))
            cin = filters[s]
        self._add("bott_1", make_block("bott_1", filters[3], filters[4]))
        self._add("bott_2", make_block("bott_2", filters[4], filters[4]))
        cin = filters[4]
        for s in range(3, -1, -1):
            setattr(self, f"up{s}", Upsample(cin, filters[s], rng, dtype))
            self._add(f"dec{s}_1", make_block(f"dec{s}_1", 2 * filters[s], filters[s]))
            self._add(f"dec{s}_2", make_block(f"dec{s}_2", filters[s], filters[s]))
            cin = filters[s]
        self.head = Head(filters[0], classes, rng, dtype)

    def _add(self, name, block):
        setattr(self, name, block)
        self.blocks[name] = block

    def __call__(self, x, round_index, training):
        """Return ``(probs, first_block_output)``."""
        skips = []
        first = None
        for s in range(4):
            x = self.blocks[f"enc{s}_1"](x, round_index, training)
            if s == 0:
                first = x
            x = self.blocks[f"enc{s}_2"](x, round_index, training)
            skips.append(x)
            x = ops.maxpool2d(x)
        x = self.blocks["bott_1"](x, round_index, training)
        x = self.blocks["bott_2"](x, round_index, training)
        for s in range(3, -1, -1):
            x = getattr(self, f"up{s}")(x)
            x = ops.channel_concat(skips[s], x)
            x = self.blocks[f"dec{s}_1"](x, round_index, training)
            x = self.blocks[f"dec{s}_2"](x, round_index, training)
        return self.head(x), first


class Model(Module):
    """A configured segmentation network.

    Call :meth:`forward` with a ``(n, 1, h, w)`` image tensor; ``h`` and ``w``
    must be divisible by 16.
    """

    def __init__(self, config: ModelConfig, seed=0, precision=Precision.STANDARD):
        config.validate()
        self.config = config
        self.precision = Precision.of(precision)
        dtype = self.precision.dtype
        rng = np.random.Generator(np.random.PCG64(seed))
        rounds = 2 if config.is_feedback else 1
        lstm_blocks = {b for loc in config.lstm_locations for b in LOCATION_BLOCKS[loc]}
        special = {b for loc in LOCATIONS for b in LOCATION_BLOCKS[loc]}

        def make_block(name, cin, cout):
            v = config.variant
            if v == "runet" or (v == "feedback-rcl" and name in special):
                return RecurrentConvLayer(cin, cout, rng, rounds=rounds,
                                          time_steps=config.rcl_time_steps, dtype=dtype)
            if v == "feedback-convlstm" and name in lstm_blocks:
                return ConvLSTMCell(cin, cout, rng, rounds=rounds,
                                    forget_bias=config.forget_bias, dtype=dtype)
            return ConvBNBlock(cin, cout, rng, rounds=rounds, dtype=dtype)

        C = config.num_classes
        if not config.is_feedback:
            in_ch = 1
        elif config.feedback_input == "probs-only":
            in_ch = C
        else:
            in_ch = C + 1
        self.in_channels = in_ch
        self.backbone = UNetBackbone(in_ch, config.filters, C, make_block, rng, dtype)

    @property
    def blocks(self):
        return self.backbone.blocks

    def lstm_cells(self):
        return [b for b in self.blocks.values() if isinstance(b, ConvLSTMCell)]

    def reset_state(self):
        for cell in self.lstm_cells():
            cell.reset_state()

    def _round_input(self, image, probs):
        """Backbone input for a feedback round; ``probs=None`` means round 0."""
        C = self.config.num_classes
        n, _, h, w = image.shape
        dtype = image.dtype
        if self.config.feedback_input == "probs-only":
            if probs is None:
                return Tensor(np.repeat(image.data, C, axis=1))
            return probs
        if probs is None:
            prior = np.full((n, C, h, w), 1.0 / C, dtype=dtype)
            return Tensor(np.concatenate([image.data, prior], axis=1))
        return ops.channel_concat(Tensor(image.data), probs)

    def forward(self, image, training=True, detach_feedback=False, capture=False) -> ForwardOutput:
        """Run one pass (unet/runet) or two feedback rounds.

        Args:
            image: ``(n, 1, h, w)`` tensor or array with values in [0, 1].
            training: batch-norm mode.
            detach_feedback: cut the gradient path through the fed-back
                probabilities (diagnostics only).
            capture: fill ``first_layer_sum`` (feedback variants).
        """
        if not isinstance(image, Tensor):
            image = Tensor(np.asarray(image, dtype=self.precision.dtype))
        if image.data.ndim != 4 or image.shape[1] != 1:
            raise ShapeError(f"image must be (n, 1, h, w), got {image.shape}")
        h, w = image.shape[2:]
        if h % 16 or w % 16:
            raise ShapeError(f"spatial dims must be divisible by 16, got {h}x{w}")
        if image.dtype != self.precision.dtype:
            image = Tensor(image.data.astype(self.precision.dtype))
        self.reset_state()
        if not self.config.is_feedback:
            probs, _ = self.backbone(image, 0, training)
            return ForwardOutput(probs)

        probs1, _ = self.backbone(self._round_input(image, None), 0, training)
        fed = probs1.detach() if detach_feedback else probs1
        probs2, first = self.backbone(self._round_input(image, fed), 1, training)
        out = ForwardOutput(probs1, probs2)
        if capture:
            out.first_layer_sum = Tensor(first.data.sum(axis=1, keepdims=True))
        return out

    __call__ = forward


def build_model(config: ModelConfig, seed=0, precision=Precision.STANDARD) -> Model:
    return Model(config, seed=seed, precision=precision)


def first_layer_activation_sum(model: Model, image, training=False) -> Tensor:
    """Channel sum of the first block's post-ReLU output in the second round."""
    if not model.config.is_feedback:
        raise ContractError(f"first-layer activation sum needs a feedback variant, not {model.config.variant}")
    with no_grad():
        return model.forward(image, training=training, capture=True).first_layer_sum
