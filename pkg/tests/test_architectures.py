import unittest

import numpy as np
import numpy.testing as npt
from hypothesis import given, settings, strategies as st

from platenet import architectures
from platenet.architectures import (
    BackboneConfig, ConvSpec, FCSpec, MaxPoolSpec, NetworkSpec, ResidualBlockSpec, SoftmaxSpec,
    ArchitectureError,
)
from platenet.gradcheck import check_gradient
from platenet.layers import ShapeError


REFERENCE_COUNTS = [
    ("conv1", 2496), ("conv2", 25696), ("maxpool1", 0),
    ("conv3", 51392), ("conv4", 102592), ("maxpool2", 0),
    ("conv5", 153888), ("conv6", 230688), ("maxpool3", 0),
    ("conv7", 307584), ("conv8", 409984), ("maxpool4", 0),
    ("conv9", 819968), ("conv10", 525824), ("fc", 4617), ("softmax", 0),
]

REFERENCE_SHAPES = [
    ("conv1", (32, 220, 220)), ("conv2", (32, 216, 216)), ("maxpool1", (32, 108, 108)),
    ("conv3", (64, 104, 104)), ("conv4", (64, 100, 100)), ("maxpool2", (64, 50, 50)),
    ("conv5", (96, 46, 46)), ("conv6", (96, 42, 42)), ("maxpool3", (96, 21, 21)),
    ("conv7", (128, 17, 17)), ("conv8", (128, 13, 13)), ("maxpool4", (128, 6, 6)),
    ("conv9", (256, 2, 2)), ("conv10", (512, 1, 1)), ("fc", (9, 1, 1)), ("softmax", (9, 1, 1)),
]

TINY_DETECTOR = {
    "kind": "detector",
    "num_classes": 1,
    "input_size": 32,
    "stage_widths": [4, 8],
    "blocks_per_stage": [1, 1],
    "downsample_factor": 4,
    "tap": None,
    "anchors": [[8.0, 16.0], [16.0, 32.0]],
}

DESK_CLASSIFIER = {"kind": "classifier", "num_classes": 6, "input_size": 64, "width_scale": 0.25, "blocks": 2}


class TestClassifierSpec(unittest.TestCase):

    def test_reference_parameter_counts(self):
        total, breakdown = architectures.count_parameters(architectures.build_classifier(9))
        self.assertEqual(breakdown, REFERENCE_COUNTS)
        self.assertEqual(total, 2634729)

    def test_reference_shapes(self):
        self.assertEqual(architectures.infer_shapes(architectures.build_classifier(9)), REFERENCE_SHAPES)

    def test_two_classes(self):
        _, breakdown = architectures.count_parameters(architectures.build_classifier(2))
        counts = dict(breakdown)
        self.assertEqual(counts["fc"], 1026)
        for name, count in REFERENCE_COUNTS:
            if name != "fc":
                self.assertEqual(counts[name], count)

    def test_invalid(self):
        with self.assertRaises(ArchitectureError):
            architectures.build_classifier(1)
        with self.assertRaises(ArchitectureError):
            architectures.build_classifier(9, blocks=5)
        with self.assertRaises(ShapeError):
            architectures.build_classifier(9, input_size=32)

    def test_desk_variant_collapses(self):
        spec = architectures.spec_from_config(DESK_CLASSIFIER)
        shapes = dict(architectures.infer_shapes(spec))
        self.assertEqual(shapes["softmax"], (6, 1, 1))
        self.assertEqual(shapes["conv6"][1:], (1, 1))

    def test_empty_spec(self):
        self.assertEqual(architectures.count_parameters(NetworkSpec("empty", (3, 8, 8), ())), (0, []))
        self.assertEqual(architectures.infer_shapes(NetworkSpec("empty", (3, 8, 8), ())), [])

    def test_shape_error_names_layer(self):
        spec = NetworkSpec("bad", (3, 8, 8), (ConvSpec("first", 3, 4, 3), ConvSpec("second", 5, 4, 3)))
        with self.assertRaisesRegex(ShapeError, "second"):
            architectures.infer_shapes(spec)

    def test_layer_lookup(self):
        spec = architectures.build_classifier(9)
        self.assertEqual(spec.layer("fc").out_features, 9)
        with self.assertRaises(ArchitectureError):
            spec.layer("conv11")


class TestDetectionHead(unittest.TestCase):

    def test_filters(self):
        self.assertEqual(architectures.build_detection_head(1, 90)[0].filters, 540)
        self.assertEqual(architectures.build_detection_head(1, 1)[0].filters, 6)
        self.assertEqual(architectures.build_detection_head(20, 5)[0].filters, 125)

    @given(st.integers(1, 100), st.integers(1, 100))
    @settings(derandomize=True)
    def test_filter_law(self, num_classes, num_anchors):
        head, conv = architectures.build_detection_head(num_classes, num_anchors, in_channels=8)
        self.assertEqual(head.filters, (num_classes + 5) * num_anchors)
        self.assertEqual(conv.out_channels, head.filters)
        self.assertEqual(conv.kernel, 1)
        self.assertFalse(conv.batch_norm)

    def test_invalid(self):
        with self.assertRaises(ArchitectureError):
            architectures.build_detection_head(0, 5)
        with self.assertRaises(ArchitectureError):
            architectures.build_detection_head(1, 0)
        with self.assertRaises(ArchitectureError):
            architectures.DetectionHeadSpec(1, 2, 7, 11)


class TestBackbone(unittest.TestCase):

    def test_default_grid(self):
        spec = architectures.build_backbone(BackboneConfig())
        self.assertEqual(architectures.infer_shapes(spec)[-1][1], (128, 14, 14))

    def test_invalid_configs(self):
        with self.assertRaises(ArchitectureError):
            BackboneConfig(input_size=100)
        with self.assertRaises(ArchitectureError):
            BackboneConfig(downsample_factor=3)
        with self.assertRaises(ArchitectureError):
            BackboneConfig(downsample_factor=32)
        with self.assertRaises(ArchitectureError):
            BackboneConfig(stage_channel_widths=(8, 16), blocks_per_stage=(1,), downsample_factor=2, input_size=32)

    def test_no_downsampling(self):
        spec = architectures.build_backbone(BackboneConfig((8,), (2,), 1, 20))
        self.assertEqual(architectures.infer_shapes(spec)[-1][1], (8, 20, 20))

    @given(
        st.lists(st.integers(1, 16), min_size=1, max_size=4).flatmap(lambda widths: st.tuples(
            st.just(tuple(widths)),
            st.lists(st.integers(1, 3), min_size=len(widths), max_size=len(widths)).map(tuple),
            st.integers(0, len(widths)),
        )),
        st.integers(1, 8),
    )
    @settings(derandomize=True)
    def test_grid_law(self, stages, grid):
        widths, blocks, downsamplings = stages
        factor = 2 ** downsamplings
        config = BackboneConfig(widths, blocks, factor, factor * grid)
        spec = architectures.build_backbone(config)
        self.assertEqual(architectures.infer_shapes(spec)[-1][1], (widths[-1], grid, grid))

    def test_detector_tap(self):
        config = BackboneConfig((4, 8), (1, 1), 4, 32)
        detector = architectures.build_detector(config, 1, 2)
        self.assertEqual(detector.head.grid_size, 8)
        self.assertEqual(architectures.infer_shapes(detector)[-1][1], (12, 8, 8))
        tapped = architectures.build_detector(config, 1, 2, tap="stage1.block1")
        self.assertEqual(tapped.head.grid_size, 16)
        self.assertEqual(tapped.layers[-1].in_channels, 4)
        with self.assertRaises(ArchitectureError):
            architectures.build_detector(config, 1, 2, tap="stage9.block1")


class TestNetworkRuntime(unittest.TestCase):

    def test_parameter_count_matches_spec(self):
        for model_config in (DESK_CLASSIFIER, TINY_DETECTOR):
            network = architectures.build_model(model_config, np.random.default_rng(0))
            self.assertEqual(network.learnable_count, architectures.count_parameters(network.spec)[0])

    def test_parameter_names(self):
        classifier = architectures.build_model(DESK_CLASSIFIER, np.random.default_rng(0))
        self.assertIn("conv1.kernel", classifier.parameters())
        self.assertIn("conv1.bn_scale", classifier.parameters())
        self.assertIn("fc.weights", classifier.parameters())
        self.assertIn("conv1.bn_running_var", classifier.state())
        detector = architectures.build_model(TINY_DETECTOR, np.random.default_rng(0))
        self.assertIn("stage1.block1.conv_a.kernel", detector.parameters())
        self.assertIn("stage1.block1.projection.kernel", detector.parameters())
        self.assertIn("head.kernel", detector.parameters())
        self.assertNotIn("head.bn_scale", detector.parameters())

    def test_initialization_is_seeded(self):
        first = architectures.build_model(DESK_CLASSIFIER, np.random.default_rng(5)).parameters()
        second = architectures.build_model(DESK_CLASSIFIER, np.random.default_rng(5)).parameters()
        for name in first:
            npt.assert_array_equal(first[name], second[name])

    def test_classifier_output_is_distribution(self):
        network = architectures.build_model(DESK_CLASSIFIER, np.random.default_rng(1))
        output = architectures.forward_network(network, np.zeros((1, 3, 64, 64))).output
        self.assertEqual(output.shape, (1, 6, 1, 1))
        self.assertTrue(np.all(np.isfinite(output)))
        self.assertAlmostEqual(float(output.sum()), 1.0, places=12)

    def test_batch_axis(self):
        network = architectures.build_model(DESK_CLASSIFIER, np.random.default_rng(2))
        batch = np.random.default_rng(3).uniform(size=(3, 3, 64, 64))
        together = architectures.forward_network(network, batch).output
        for index in range(3):
            alone = architectures.forward_network(network, batch[index:index + 1]).output
            npt.assert_allclose(together[index], alone[0], rtol=1e-10, atol=1e-12)

    def test_detector_output(self):
        network = architectures.build_model(TINY_DETECTOR, np.random.default_rng(0))
        output = architectures.forward_network(network, np.zeros((2, 3, 32, 32))).output
        self.assertEqual(output.shape, (2, 12, 8, 8))

    def test_until(self):
        network = architectures.build_model(DESK_CLASSIFIER, np.random.default_rng(0))
        result = architectures.forward_network(network, np.zeros((2, 3, 64, 64)), until="fc")
        self.assertEqual(result.output.shape, (2, 6, 1, 1))
        self.assertNotIn("softmax", result.activations)
        self.assertEqual(result.caches, [])

    def test_wrong_input(self):
        network = architectures.build_model(DESK_CLASSIFIER, np.random.default_rng(0))
        with self.assertRaises(ShapeError):
            architectures.forward_network(network, np.zeros((1, 3, 32, 32)))
        with self.assertRaises(ArchitectureError):
            architectures.build_model({"kind": "segmenter"}, np.random.default_rng(0))

    def test_zero_residual_is_identity(self):
        spec = NetworkSpec("block", (4, 5, 5), (ResidualBlockSpec("block", 4, 4),))
        network = architectures.init_network(spec, np.random.default_rng(0))
        block = network.layers["block"]
        self.assertIsNone(block.projection)
        block.conv_a.kernel[...] = 0.0
        block.conv_b.kernel[...] = 0.0
        x = np.random.default_rng(1).uniform(size=(2, 4, 5, 5))
        npt.assert_array_equal(architectures.forward_network(network, x).output, x)

    def _check_network_gradients(self, spec, seed):
        rng = np.random.default_rng(seed)
        network = architectures.init_network(spec, rng)
        x = rng.normal(size=(2,) + tuple(spec.input_shape))
        result = architectures.forward_network(network, x, mode="train")
        weights = rng.normal(size=result.output.shape)
        grad_input, grads = architectures.backward_network(network, result.caches, weights)
        self.assertEqual(set(grads), set(network.parameters()))

        def loss():
            return float(np.sum(architectures.forward_network(network, x, mode="train").output * weights))

        self.assertLess(check_gradient(loss, x, grad_input), 1e-4)
        for name, param in network.parameters().items():
            self.assertLess(check_gradient(loss, param, grads[name]), 1e-4, name)

    def test_backward_plain_stack(self):
        spec = NetworkSpec("plain", (2, 6, 6), (
            ConvSpec("conv1", 2, 3, 3, activation="none"),
            MaxPoolSpec("maxpool1", 2, 2),
            FCSpec("fc", 12, 4),
            SoftmaxSpec("softmax"),
        ))
        for seed in range(10):
            self._check_network_gradients(spec, seed)

    def test_backward_residual_stack(self):
        spec = NetworkSpec("residual", (2, 6, 6), (
            ResidualBlockSpec("block", 2, 3, 2),
            FCSpec("fc", 27, 2),
            SoftmaxSpec("softmax"),
        ))
        self._check_network_gradients(spec, 21)
