"""
Declarative network specifications, shape inference, parameter accounting and the runtime forward and backward passes.

A NetworkSpec is a pure description; init_network turns it into a Network holding numpy parameters.
"""
import dataclasses
import logging
import math

import numpy as np

from platenet import PlatenetError
from platenet import layers
from platenet.layers import ConvLayer, FCLayer, ShapeError, ShapeSpec


logger = logging.getLogger("platenet")

# Output channels of the conv-conv-pool groups of the classifier, followed by the two collapsing convolutions
CLASSIFIER_GROUP_WIDTHS = ((32, 32), (64, 64), (96, 96), (128, 128))
CLASSIFIER_TAIL_WIDTHS = (256, 512)
CLASSIFIER_KERNEL = 5


class ArchitectureError(PlatenetError): pass


@dataclasses.dataclass(frozen=True)
class ConvSpec:
    name: str
    in_channels: int
    out_channels: int
    kernel: int
    stride: int = 1
    padding: int = 0
    batch_norm: bool = True
    activation: str = "relu"
    kind = "conv"

    @property
    def learnable_count(self):
        count = self.out_channels * (self.in_channels * self.kernel * self.kernel + 1)
        if self.batch_norm:
            count += 2 * self.out_channels
        return count

    def output_shape(self, shape):
        channels, height, width = shape
        if channels != self.in_channels:
            raise ShapeError("expected {} input channels, got {}".format(self.in_channels, channels))
        out_w, out_h = layers.output_shape(ShapeSpec(
            w_in=width, w_k=self.kernel, p=self.padding, w_s=self.stride, h_in=height))
        return (self.out_channels, out_h, out_w)


@dataclasses.dataclass(frozen=True)
class MaxPoolSpec:
    name: str
    size: int = 2
    stride: int = 2
    kind = "maxpool"
    learnable_count = 0

    def output_shape(self, shape):
        channels, height, width = shape
        if self.size > height or self.size > width:
            raise ShapeError("pooling window {} is larger than the input {}x{}".format(self.size, height, width))
        out_w, out_h = layers.output_shape(ShapeSpec(w_in=width, w_k=self.size, w_s=self.stride, h_in=height))
        return (channels, out_h, out_w)


@dataclasses.dataclass(frozen=True)
class FCSpec:
    name: str
    in_features: int
    out_features: int
    kind = "fc"

    @property
    def learnable_count(self):
        return self.in_features * self.out_features + self.out_features

    def output_shape(self, shape):
        features = shape[0] * shape[1] * shape[2]
        if features != self.in_features:
            raise ShapeError("expected {} input features, got {}".format(self.in_features, features))
        return (self.out_features, 1, 1)


@dataclasses.dataclass(frozen=True)
class SoftmaxSpec:
    name: str
    kind = "softmax"
    learnable_count = 0

    def output_shape(self, shape):
        return shape


@dataclasses.dataclass(frozen=True)
class ResidualBlockSpec:
    """
    Two 3x3 convolutions with an identity shortcut, or a 1x1 projection when channels or stride change.
    """
    name: str
    in_channels: int
    out_channels: int
    stride: int = 1
    kind = "residual"

    @property
    def conv_a(self):
        return ConvSpec(self.name + ".conv_a", self.in_channels, self.out_channels, 3, self.stride, 1)

    @property
    def conv_b(self):
        return ConvSpec(self.name + ".conv_b", self.out_channels, self.out_channels, 3, 1, 1, activation="none")

    @property
    def projection(self):
        if self.in_channels == self.out_channels and self.stride == 1:
            return None
        return ConvSpec(self.name + ".projection", self.in_channels, self.out_channels, 1, self.stride, 0, activation="none")

    @property
    def convolutions(self):
        return [conv for conv in (self.conv_a, self.conv_b, self.projection) if conv is not None]

    @property
    def learnable_count(self):
        return sum(conv.learnable_count for conv in self.convolutions)

    def output_shape(self, shape):
        main = self.conv_b.output_shape(self.conv_a.output_shape(shape))
        shortcut = self.projection.output_shape(shape) if self.projection else shape
        if main != shortcut:
            raise ShapeError("residual branch {} does not match shortcut {}".format(main, shortcut))
        return main


@dataclasses.dataclass(frozen=True)
class DetectionHeadSpec:
    num_classes: int
    num_anchors: int
    grid_size: int
    filters: int

    def __post_init__(self):
        if self.filters != (self.num_classes + 5) * self.num_anchors:
            raise ArchitectureError("Head filters {} != (C + 5) * A = {}".format(
                self.filters, (self.num_classes + 5) * self.num_anchors))


@dataclasses.dataclass(frozen=True)
class NetworkSpec:
    name: str
    input_shape: tuple
    layers: tuple
    head: DetectionHeadSpec = None

    def layer(self, name):
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise ArchitectureError("Network {!r} has no layer {!r}".format(self.name, name))


@dataclasses.dataclass(frozen=True)
class BackboneConfig:
    stage_channel_widths: tuple = (16, 32, 64, 128)
    blocks_per_stage: tuple = (1, 1, 1, 1)
    downsample_factor: int = 16
    input_size: int = 224

    def __post_init__(self):
        if len(self.stage_channel_widths) != len(self.blocks_per_stage) or not self.stage_channel_widths:
            raise ArchitectureError("stage_channel_widths and blocks_per_stage must be non-empty and of equal length")
        if any(width < 1 for width in self.stage_channel_widths) or any(blocks < 1 for blocks in self.blocks_per_stage):
            raise ArchitectureError("Stage widths and block counts must be positive")
        factor = self.downsample_factor
        if factor < 1 or factor & (factor - 1):
            raise ArchitectureError("downsample_factor must be a power of two, got {}".format(factor))
        if self.downsamplings > len(self.stage_channel_widths):
            raise ArchitectureError("downsample_factor {} needs {} stages, only {} configured".format(
                factor, self.downsamplings, len(self.stage_channel_widths)))
        if self.input_size % factor:
            raise ArchitectureError("Input size {} is not divisible by downsample_factor {}, grid would not be an integer".format(
                self.input_size, factor))

    @property
    def downsamplings(self):
        return int(math.log2(self.downsample_factor))

    @property
    def grid_size(self):
        return self.input_size // self.downsample_factor


def infer_shapes(spec):
    """
    Return a list of (layer name, (channels, height, width)) for every layer of spec, without allocating tensors.
    """
    shapes = []
    shape = tuple(spec.input_shape)
    for layer in spec.layers:
        try:
            shape = layer.output_shape(shape)
        except ShapeError as e:
            raise ShapeError("layer {!r}: {}".format(layer.name, e)) from e
        shapes.append((layer.name, shape))
    return shapes


def count_parameters(spec):
    """
    Return (total, breakdown) where breakdown is a list of (layer name, learnable parameter count).
    """
    breakdown = [(layer.name, layer.learnable_count) for layer in spec.layers]
    return sum(count for _, count in breakdown), breakdown


def _scaled(width, width_scale):
    return max(1, int(round(width * width_scale)))


def build_classifier(num_classes, input_size=224, width_scale=1.0, blocks=4):
    """
    Plate classifier: `blocks` groups of two 5x5 convolutions and a 2x2 max pooling, a 5x5 convolution,
    a convolution collapsing the remaining extent to 1x1, a fully connected layer and a softmax.
    With the defaults and 9 classes this is the 2,634,729 parameter reference design.
    """
    if num_classes < 2:
        raise ArchitectureError("A classifier needs at least 2 classes, got {}".format(num_classes))
    if not 1 <= blocks <= len(CLASSIFIER_GROUP_WIDTHS):
        raise ArchitectureError("blocks must be in [1, {}], got {}".format(len(CLASSIFIER_GROUP_WIDTHS), blocks))
    input_shape = (3, input_size, input_size)
    stack = []
    channels = 3
    index = 1
    for group in range(blocks):
        for width in CLASSIFIER_GROUP_WIDTHS[group]:
            width = _scaled(width, width_scale)
            stack.append(ConvSpec("conv{}".format(index), channels, width, CLASSIFIER_KERNEL))
            channels = width
            index += 1
        stack.append(MaxPoolSpec("maxpool{}".format(group + 1), 2, 2))
    width = _scaled(CLASSIFIER_TAIL_WIDTHS[0], width_scale)
    stack.append(ConvSpec("conv{}".format(index), channels, width, CLASSIFIER_KERNEL))
    channels = width
    index += 1
    _, (_, height, _) = infer_shapes(NetworkSpec("partial", input_shape, tuple(stack)))[-1]
    width = _scaled(CLASSIFIER_TAIL_WIDTHS[1], width_scale)
    stack.append(ConvSpec("conv{}".format(index), channels, width, height))
    stack.append(FCSpec("fc", width, num_classes))
    stack.append(SoftmaxSpec("softmax"))
    spec = NetworkSpec("classifier", input_shape, tuple(stack))
    infer_shapes(spec)
    return spec


def build_backbone(config):
    """
    Residual backbone: a 3x3 stem followed by residual stages.
    The first block of each of the first log2(downsample_factor) stages has stride 2.
    """
    stem_width = config.stage_channel_widths[0]
    stack = [ConvSpec("stem", 3, stem_width, 3, 1, 1)]
    channels = stem_width
    for stage, (width, blocks) in enumerate(zip(config.stage_channel_widths, config.blocks_per_stage)):
        for block in range(blocks):
            stride = 2 if block == 0 and stage < config.downsamplings else 1
            stack.append(ResidualBlockSpec("stage{}.block{}".format(stage + 1, block + 1), channels, width, stride))
            channels = width
    spec = NetworkSpec("backbone", (3, config.input_size, config.input_size), tuple(stack))
    _, (_, height, width) = infer_shapes(spec)[-1]
    if height != config.grid_size or width != config.grid_size:
        raise ArchitectureError("Backbone produced a {}x{} grid, expected {}".format(height, width, config.grid_size))
    return spec


def build_detection_head(num_classes, num_anchors, in_channels=1, grid_size=1):
    """
    Return (DetectionHeadSpec, ConvSpec) of the final 1x1 convolution with (C + 5) * A filters.
    The head emits raw logits, so it has neither batch normalization nor an activation.
    """
    if num_classes < 1 or num_anchors < 1:
        raise ArchitectureError("Detection head needs positive C and A, got C={} A={}".format(num_classes, num_anchors))
    filters = (num_classes + 5) * num_anchors
    head = DetectionHeadSpec(num_classes, num_anchors, grid_size, filters)
    conv = ConvSpec("head", in_channels, filters, 1, 1, 0, batch_norm=False, activation="none")
    return head, conv


def build_detector(config, num_classes, num_anchors, tap=None):
    """
    Backbone truncated after the `tap` layer (default: the last one) with the detection head attached.
    """
    backbone = build_backbone(config)
    names = [layer.name for layer in backbone.layers]
    tap = tap or names[-1]
    if tap not in names:
        raise ArchitectureError("Unknown tap layer {!r}, expected one of {}".format(tap, names))
    stack = backbone.layers[:names.index(tap) + 1]
    _, (channels, grid, _) = infer_shapes(NetworkSpec("partial", backbone.input_shape, stack))[-1]
    head, conv = build_detection_head(num_classes, num_anchors, channels, grid)
    return NetworkSpec("detector", backbone.input_shape, stack + (conv,), head)


@dataclasses.dataclass
class ResidualBlock:
    conv_a: ConvLayer
    conv_b: ConvLayer
    projection: ConvLayer = None

    def named_convolutions(self):
        named = [("conv_a", self.conv_a), ("conv_b", self.conv_b)]
        if self.projection is not None:
            named.append(("projection", self.projection))
        return named


def _init_conv(conv_spec, rng, bn_eps=layers.BN_EPS, bn_momentum=layers.BN_MOMENTUM):
    fan_in = conv_spec.in_channels * conv_spec.kernel * conv_spec.kernel
    kernel = rng.normal(0.0, math.sqrt(2.0 / fan_in),
                        (conv_spec.out_channels, conv_spec.in_channels, conv_spec.kernel, conv_spec.kernel))
    return ConvLayer(
        kernel=kernel,
        bias=np.zeros(conv_spec.out_channels),
        stride=conv_spec.stride,
        padding=conv_spec.padding,
        has_bn=conv_spec.batch_norm,
        activation=conv_spec.activation,
        bn_eps=bn_eps,
        bn_momentum=bn_momentum,
    )


class Network:
    """
    Runtime parameters of a NetworkSpec.
    `config` is the plain-data model description that rebuilds the spec, see build_model.
    """

    def __init__(self, spec, runtime_layers, config=None):
        self.spec = spec
        self.layers = runtime_layers
        self.config = config or {}

    def _named_layer_arrays(self, getter):
        arrays = {}
        for layer_spec in self.spec.layers:
            runtime = self.layers.get(layer_spec.name)
            if runtime is None:
                continue
            if isinstance(runtime, ResidualBlock):
                for sub_name, conv in runtime.named_convolutions():
                    for key, array in getter(conv).items():
                        arrays["{}.{}.{}".format(layer_spec.name, sub_name, key)] = array
            else:
                for key, array in getter(runtime).items():
                    arrays["{}.{}".format(layer_spec.name, key)] = array
        return arrays

    def parameters(self):
        """Ordered mapping of learnable parameter names to arrays."""
        return self._named_layer_arrays(lambda layer: layer.parameters())

    def state(self):
        """Ordered mapping of batch normalization running statistics."""
        return self._named_layer_arrays(lambda layer: layer.state())

    def named_arrays(self):
        return dict(self.parameters(), **self.state())

    @property
    def learnable_count(self):
        return sum(array.size for array in self.parameters().values())


def init_network(spec, rng, config=None):
    """
    Instantiate spec with He fan-in initialized kernels, zero biases, unit BN scale and zero BN shift.
    """
    config = config or {}
    bn = {"bn_eps": config.get("bn_eps", layers.BN_EPS), "bn_momentum": config.get("bn_momentum", layers.BN_MOMENTUM)}
    runtime = {}
    for layer_spec in spec.layers:
        if layer_spec.kind == "conv":
            runtime[layer_spec.name] = _init_conv(layer_spec, rng, **bn)
        elif layer_spec.kind == "residual":
            projection = layer_spec.projection
            runtime[layer_spec.name] = ResidualBlock(
                conv_a=_init_conv(layer_spec.conv_a, rng, **bn),
                conv_b=_init_conv(layer_spec.conv_b, rng, **bn),
                projection=_init_conv(projection, rng, **bn) if projection else None,
            )
        elif layer_spec.kind == "fc":
            weights = rng.normal(0.0, math.sqrt(2.0 / layer_spec.in_features),
                                 (layer_spec.in_features, layer_spec.out_features))
            runtime[layer_spec.name] = FCLayer(weights=weights, bias=np.zeros(layer_spec.out_features))
    return Network(spec, runtime, config)


@dataclasses.dataclass
class ForwardResult:
    output: np.ndarray
    activations: dict
    caches: list


def _residual_forward(block, x, mode):
    a, cache_a = layers.conv_forward(block.conv_a, x, mode)
    b, cache_b = layers.conv_forward(block.conv_b, a, mode)
    cache_p = None
    shortcut = x
    if block.projection is not None:
        shortcut, cache_p = layers.conv_forward(block.projection, x, mode)
    z = b + shortcut
    mask = z > 0
    return z * mask, (cache_a, cache_b, cache_p, mask)


def _residual_backward(block, cache, grad_output):
    cache_a, cache_b, cache_p, mask = cache
    grad = grad_output * mask
    grads = {}
    grad_a, grads["conv_b"] = layers.conv_backward(block.conv_b, cache_b, grad)
    grad_input, grads["conv_a"] = layers.conv_backward(block.conv_a, cache_a, grad_a)
    if block.projection is not None:
        grad_shortcut, grads["projection"] = layers.conv_backward(block.projection, cache_p, grad)
    else:
        grad_shortcut = grad
    return grad_input + grad_shortcut, grads


def _layer_forward(network, layer_spec, x, mode):
    runtime = network.layers.get(layer_spec.name)
    if layer_spec.kind == "conv":
        return layers.conv_forward(runtime, x, mode)
    if layer_spec.kind == "residual":
        return _residual_forward(runtime, x, mode)
    if layer_spec.kind == "maxpool":
        return layers.maxpool_forward(x, layer_spec.size, layer_spec.stride)
    if layer_spec.kind == "fc":
        out, cache = layers.fc_forward(runtime.weights, runtime.bias, x)
        return out[:, :, None, None], cache
    if layer_spec.kind == "softmax":
        probabilities = layers.softmax(x.reshape(x.shape[0], -1), axis=1)
        return probabilities.reshape(x.shape), probabilities
    raise ArchitectureError("Unknown layer kind {!r}".format(layer_spec.kind))


def forward_network(network, batch, mode="infer", until=None):
    """
    Apply the layers of network to batch in order, stopping after the layer named `until` if given.
    Every layer output is kept in ForwardResult.activations by layer name.
    Caches for backward_network are only collected in train mode.
    """
    expected = tuple(network.spec.input_shape)
    if batch.ndim != 4 or batch.shape[1:] != expected:
        raise ShapeError("Network {!r} expects input (N, {}, {}, {}), got {}".format(network.spec.name, *expected, batch.shape))
    x = batch
    activations = {}
    caches = []
    for layer_spec in network.spec.layers:
        try:
            x, cache = _layer_forward(network, layer_spec, x, mode)
        except ShapeError as e:
            raise ShapeError("layer {!r}: {}".format(layer_spec.name, e)) from e
        activations[layer_spec.name] = x
        if mode == "train":
            caches.append((layer_spec, cache))
        if layer_spec.name == until:
            break
    return ForwardResult(x, activations, caches)


def backward_network(network, caches, grad_output):
    """
    Reverse pass over train mode caches from forward_network.
    Return (grad_input, grads) where grads maps the names of Network.parameters to gradients.
    """
    grads = {}
    grad = grad_output
    for layer_spec, cache in reversed(caches):
        name = layer_spec.name
        runtime = network.layers.get(name)
        try:
            if layer_spec.kind == "conv":
                grad, layer_grads = layers.conv_backward(runtime, cache, grad)
                grads.update(("{}.{}".format(name, key), value) for key, value in layer_grads.items())
            elif layer_spec.kind == "residual":
                grad, block_grads = _residual_backward(runtime, cache, grad)
                for sub_name, conv_grads in block_grads.items():
                    grads.update(("{}.{}.{}".format(name, sub_name, key), value) for key, value in conv_grads.items())
            elif layer_spec.kind == "maxpool":
                grad = layers.maxpool_backward(cache, grad)
            elif layer_spec.kind == "fc":
                grad, grads[name + ".weights"], grads[name + ".bias"] = layers.fc_backward(cache, grad.reshape(grad.shape[0], -1))
            elif layer_spec.kind == "softmax":
                flat = layers.softmax_backward(cache, grad.reshape(grad.shape[0], -1))
                grad = flat.reshape(grad.shape)
        except ShapeError as e:
            raise ShapeError("layer {!r}: {}".format(name, e)) from e
    return grad, grads


def spec_from_config(model_config):
    """
    Rebuild the NetworkSpec described by a plain-data model config, see build_model.
    """
    kind = model_config.get("kind")
    if kind == "classifier":
        return build_classifier(
            model_config["num_classes"],
            input_size=model_config.get("input_size", 224),
            width_scale=model_config.get("width_scale", 1.0),
            blocks=model_config.get("blocks", len(CLASSIFIER_GROUP_WIDTHS)),
        )
    if kind == "detector":
        backbone = BackboneConfig(
            stage_channel_widths=tuple(model_config["stage_widths"]),
            blocks_per_stage=tuple(model_config["blocks_per_stage"]),
            downsample_factor=model_config["downsample_factor"],
            input_size=model_config["input_size"],
        )
        return build_detector(backbone, model_config["num_classes"], len(model_config["anchors"]), model_config.get("tap"))
    raise ArchitectureError("Unknown model kind {!r}".format(kind))


def build_model(model_config, rng):
    """
    Return an initialized Network for a model config.

    Classifier configs: kind, num_classes, input_size, width_scale, blocks, class_names.
    Detector configs: kind, num_classes, input_size, stage_widths, blocks_per_stage, downsample_factor, tap, anchors.
    """
    return init_network(spec_from_config(model_config), rng, dict(model_config))
