"""Classifier architectures: LeNet-5, ResNet-18, single-stage ResNet-18 and
their image + series fusion variants."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .encoding import SERIES_LEN
from .nn.layers import (
    LSTM,
    BatchNorm2d,
    ChannelsLast,
    Conv2d,
    Dropout,
    Flatten,
    GlobalAvgPool,
    Layer,
    Linear,
    MaxPool2d,
    ReLU,
    Sequential,
    ShapeMismatch,
)

IMAGE_ARCHS = ("lenet5", "resnet18", "sb_resnet18")
FUSION_ARCHS = ("lenet5_lstm", "resnet18_lstm", "sb_resnet18_lstm")
ARCHITECTURES = IMAGE_ARCHS + FUSION_ARCHS + ("lstm",)
HEADS = {"two_way": 2, "thousand_way": 1000}
# training epochs by image branch
DEFAULT_EPOCHS = {"lenet5": 110, "resnet18": 25, "sb_resnet18": 45, "lstm": 45}


class BadChannels(ValueError):
    pass


class IncompatibleSpecs(ValueError):
    pass


@dataclass(frozen=True)
class ModelSpec:
    architecture: str
    in_channels: int = 1
    head: str = "two_way"
    lstm_hidden: int = 32
    fusion_hidden: int = 64
    dropout: float = 0.0  # on the series branch output, fusion only

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.architecture!r}")
        if self.head not in HEADS:
            raise ValueError(f"unknown head {self.head!r}")

    @property
    def image_arch(self) -> str:
        return self.architecture.removesuffix("_lstm")

    @property
    def uses_series(self) -> bool:
        return self.architecture.endswith("lstm")

    @property
    def uses_images(self) -> bool:
        return self.architecture != "lstm"


def _check_channels(c: int) -> None:
    if c not in (1, 3, 5):
        raise BadChannels(f"in_channels must be 1, 3 or 5, got {c}")


class Classifier(Layer):
    """Common interface: ``forward(images, series)`` returns ``(N, 2)`` logits."""

    kind = "classifier"
    uses_images = True
    uses_series = False

    def forward(self, images, series=None):
        raise NotImplementedError


class ImageClassifier(Classifier):
    def __init__(self, features: Sequential, head: Linear, feature_dim: int):
        super().__init__()
        self.features, self.head, self.feature_dim = features, head, feature_dim

    def children(self):
        return [("features", self.features), ("head", self.head)]

    def forward(self, images, series=None):
        return self.head.forward(self.features.forward(images))

    def backward(self, grad):
        return self.features.backward(self.head.backward(grad))


class SeriesClassifier(Classifier):
    uses_images = False
    uses_series = True

    def __init__(self, branch: Sequential, head: Linear):
        super().__init__()
        self.branch, self.head = branch, head

    def children(self):
        return [("branch", self.branch), ("head", self.head)]

    def forward(self, images, series=None):
        return self.head.forward(self.branch.forward(series))

    def backward(self, grad):
        return self.branch.backward(self.head.backward(grad))


class FusionClassifier(Classifier):
    """Image features and LSTM state, concatenated, through a one-hidden-layer MLP."""

    uses_series = True

    def __init__(self, image: Sequential, image_dim: int, series: Sequential, series_dim: int, mlp: Sequential):
        super().__init__()
        self.image, self.series, self.mlp = image, series, mlp
        self.image_dim, self.series_dim = image_dim, series_dim

    def children(self):
        return [("image", self.image), ("series", self.series), ("mlp", self.mlp)]

    def forward(self, images, series=None):
        if series is None:
            raise ShapeMismatch("fusion model needs a series input")
        feats = np.concatenate([self.image.forward(images), self.series.forward(series)], axis=1)
        return self.mlp.forward(feats)

    def backward(self, grad):
        g = self.mlp.backward(grad)
        return (
            self.image.backward(g[:, : self.image_dim]),
            self.series.backward(g[:, self.image_dim :]),
        )


class BasicBlock(Layer):
    kind = "basic_block"

    def __init__(self, in_channels: int, out_channels: int, stride: int, rng):
        super().__init__()
        self.main = Sequential(
            Conv2d(in_channels, out_channels, 3, stride, 1, bias=False, rng=rng),
            BatchNorm2d(out_channels),
            ReLU(),
            Conv2d(out_channels, out_channels, 3, 1, 1, bias=False, rng=rng),
            BatchNorm2d(out_channels),
            names=["conv1", "bn1", "relu", "conv2", "bn2"],
        )
        self.shortcut = None
        if stride != 1 or in_channels != out_channels:
            self.shortcut = Sequential(
                Conv2d(in_channels, out_channels, 1, stride, 0, bias=False, rng=rng),
                BatchNorm2d(out_channels),
                names=["conv", "bn"],
            )
        self.relu = ReLU()

    def children(self):
        out = [("main", self.main)]
        if self.shortcut is not None:
            out.append(("shortcut", self.shortcut))
        out.append(("relu", self.relu))
        return out

    def forward(self, x):
        skip = x if self.shortcut is None else self.shortcut.forward(x)
        return self.relu.forward(self.main.forward(x) + skip)

    def backward(self, grad):
        g = self.relu.backward(grad)
        dx = self.main.backward(g)
        return dx + (g if self.shortcut is None else self.shortcut.backward(g))


def _stem(in_channels: int, rng) -> list[Layer]:
    return [
        Conv2d(in_channels, 64, 7, 2, 3, bias=False, rng=rng),
        BatchNorm2d(64),
        ReLU(),
        MaxPool2d(3, 2, 1),
    ]


def _stage(in_c: int, out_c: int, stride: int, rng) -> Sequential:
    return Sequential(BasicBlock(in_c, out_c, stride, rng), BasicBlock(out_c, out_c, 1, rng))


def lenet5_features(in_channels: int, rng) -> tuple[Sequential, int]:
    """Conv-pool twice to 30x3x3, then a 180-unit hidden layer.

    24 -> conv5 -> 20 -> pool -> 10 -> conv5 -> 6 -> pool -> 3, so the
    flatten is 3 * 3 * 30 = 270 wide.
    """
    _check_channels(in_channels)
    body = Sequential(
        Conv2d(in_channels, 12, 5, rng=rng),
        ReLU(),
        MaxPool2d(2, 2),
        Conv2d(12, 30, 5, rng=rng),
        ReLU(),
        MaxPool2d(2, 2),
        Flatten(),
        Linear(270, 180, rng=rng),
        ReLU(),
        names=["conv1", "relu1", "pool1", "conv2", "relu2", "pool2", "flatten", "fc1", "relu3"],
    )
    return _image_input(body), 180


def resnet18_features(in_channels: int, rng) -> tuple[Sequential, int]:
    _check_channels(in_channels)
    body = Sequential(
        *_stem(in_channels, rng),
        _stage(64, 64, 1, rng),
        _stage(64, 128, 2, rng),
        _stage(128, 256, 2, rng),
        _stage(256, 512, 2, rng),
        GlobalAvgPool(),
        names=["conv1", "bn1", "relu", "maxpool", "layer1", "layer2", "layer3", "layer4", "avgpool"],
    )
    return _image_input(body), 512


def sb_resnet18_features(in_channels: int, rng) -> tuple[Sequential, int]:
    """ResNet-18 cut after its first residual stage (two 64-channel blocks)."""
    _check_channels(in_channels)
    body = Sequential(
        *_stem(in_channels, rng),
        _stage(64, 64, 1, rng),
        GlobalAvgPool(),
        names=["conv1", "bn1", "relu", "maxpool", "layer1", "avgpool"],
    )
    return _image_input(body), 64


def _image_input(body: Sequential) -> Sequential:
    body.layers[0].input_grad = False
    body.layers.insert(0, ChannelsLast())
    body.names.insert(0, "to_nhwc")
    return body


_FEATURES = {
    "lenet5": lenet5_features,
    "resnet18": resnet18_features,
    "sb_resnet18": sb_resnet18_features,
}


def build_lenet5(in_channels: int = 1, seed: int = 0) -> ImageClassifier:
    rng = np.random.default_rng(seed)
    body, dim = lenet5_features(in_channels, rng)
    return ImageClassifier(body, Linear(dim, 2, rng=rng), dim)


def build_resnet18(in_channels: int = 3, head: str = "two_way", seed: int = 0) -> ImageClassifier:
    if head not in HEADS:
        raise ValueError(f"unknown head {head!r}")
    rng = np.random.default_rng(seed)
    body, dim = resnet18_features(in_channels, rng)
    return ImageClassifier(body, Linear(dim, HEADS[head], rng=rng), dim)


def build_sb_resnet18(in_channels: int = 1, seed: int = 0) -> ImageClassifier:
    rng = np.random.default_rng(seed)
    body, dim = sb_resnet18_features(in_channels, rng)
    return ImageClassifier(body, Linear(dim, 2, rng=rng), dim)


def build_lstm_branch(series_len: int = SERIES_LEN, hidden: int = 32, dropout: float = 0.0, seed: int = 0):
    """LSTM over the scalar explore/exploit series; emits its final hidden state."""
    rng = np.random.default_rng(seed)
    layers: list[Layer] = [LSTM(1, hidden, rng=rng)]
    names = ["lstm"]
    if dropout > 0:
        layers.append(Dropout(dropout, rng=rng))
        names.append("dropout")
    branch = Sequential(*layers, names=names)
    branch.series_len = series_len
    return branch, hidden


def build_fusion(image_branch: tuple[Sequential, int], lstm_branch: tuple[Sequential, int], hidden: int = 64, seed: int = 0):
    image, image_dim = image_branch
    series, series_dim = lstm_branch
    if not isinstance(image, Sequential) or image_dim < 1 or series_dim < 1:
        raise IncompatibleSpecs("fusion needs feature-emitting image and series branches")
    if not any(isinstance(layer, LSTM) for _, layer in series.named_layers()):
        raise IncompatibleSpecs("series branch has no LSTM")
    rng = np.random.default_rng(seed)
    width = image_dim + series_dim
    mlp = Sequential(Linear(width, hidden, rng=rng), ReLU(), Linear(hidden, 2, rng=rng), names=["fc1", "relu", "fc2"])
    return FusionClassifier(image, image_dim, series, series_dim, mlp)


def build_model(spec: ModelSpec, seed: int = 0) -> Classifier:
    """Build from a spec; sub-branches draw from seeds derived from ``seed``."""
    arch = spec.architecture
    if arch == "lenet5":
        return build_lenet5(spec.in_channels, seed)
    if arch == "resnet18":
        return build_resnet18(spec.in_channels, spec.head, seed)
    if arch == "sb_resnet18":
        return build_sb_resnet18(spec.in_channels, seed)
    s_img, s_lstm, s_mlp = np.random.SeedSequence(seed).generate_state(3)
    lstm = build_lstm_branch(hidden=spec.lstm_hidden, dropout=spec.dropout, seed=int(s_lstm))
    if arch == "lstm":
        return SeriesClassifier(lstm[0], Linear(lstm[1], 2, rng=np.random.default_rng(int(s_mlp))))
    image = _FEATURES[spec.image_arch](spec.in_channels, np.random.default_rng(int(s_img)))
    return build_fusion(image, lstm, spec.fusion_hidden, int(s_mlp))


def param_count(model: Layer) -> int:
    """Trainable parameters, batchnorm affine pairs included, running stats excluded."""
    return sum(p.size for p in model.params())
