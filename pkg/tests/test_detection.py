import tempfile
import unittest

import numpy as np
import numpy.testing as npt
from hypothesis import given, settings, strategies as st
from PIL import Image

from platenet import architectures, detection, imaging, optim, synth, training
from platenet.anchors import AnchorSet, BoxSize, iou
from platenet.detection import Detection, DetectionError, GroundTruthBox, YoloLossConfig
from platenet.gradcheck import check_gradient
from platenet.layers import ShapeError


ANCHORS = [[10.0, 20.0], [20.0, 40.0]]
IMAGE_SIZE = 64
GRID = 4
CELL = IMAGE_SIZE / GRID


def square(x, score, class_id=0, size=10.0):
    return Detection(cx=x + size / 2, cy=size / 2, w=size, h=size, confidence=score, class_id=class_id)


@st.composite
def collision_free_boxes(draw, grid=GRID, cell=CELL):
    cells = draw(st.lists(st.tuples(st.integers(0, grid - 1), st.integers(0, grid - 1)), unique=True, max_size=grid * grid))
    boxes = []
    for row, col in cells:
        fx = draw(st.floats(0.0, 0.99))
        fy = draw(st.floats(0.0, 0.99))
        w = draw(st.floats(2.0, 80.0))
        h = draw(st.floats(2.0, 80.0))
        boxes.append(GroundTruthBox((col + fx) * cell, (row + fy) * cell, w, h))
    return boxes


class TestEncodeTargets(unittest.TestCase):

    def test_centered_anchor_box(self):
        box = GroundTruthBox(1.5 * CELL, 2.5 * CELL, 40.0, 20.0)
        target = detection.encode_targets([box], GRID, ANCHORS, IMAGE_SIZE)
        self.assertEqual(target.tensor.shape, (2, 6, GRID, GRID))
        self.assertEqual(np.argwhere(target.mask).tolist(), [[1, 2, 1]])
        npt.assert_allclose(target.tensor[1, :, 2, 1], [1.0, 0.5, 0.5, 0.0, 0.0, 1.0])
        self.assertEqual(target.collisions, 0)

    def test_empty(self):
        target = detection.encode_targets([], GRID, ANCHORS, IMAGE_SIZE)
        self.assertFalse(target.mask.any())
        npt.assert_array_equal(target.tensor, 0.0)

    def test_corner_cell(self):
        target = detection.encode_targets([GroundTruthBox(1.0, 1.0, 10.0, 20.0)], GRID, ANCHORS, IMAGE_SIZE)
        self.assertTrue(target.mask[0, 0, 0])
        npt.assert_allclose(target.tensor[0, 1:3, 0, 0], [1 / CELL, 1 / CELL])

    def test_invalid(self):
        with self.assertRaises(DetectionError):
            detection.encode_targets([GroundTruthBox(70.0, 10.0, 5.0, 5.0)], GRID, ANCHORS, IMAGE_SIZE)
        with self.assertRaises(DetectionError):
            detection.encode_targets([], 5, ANCHORS, IMAGE_SIZE)
        with self.assertRaises(DetectionError):
            detection.encode_targets([GroundTruthBox(10.0, 10.0, 5.0, 5.0, class_id=1)], GRID, ANCHORS, IMAGE_SIZE)
        with self.assertRaises(DetectionError):
            GroundTruthBox(10.0, 10.0, 0.0, 5.0)

    def test_collision_keeps_larger(self):
        small = GroundTruthBox(8.0, 8.0, 18.0, 9.0)
        large = GroundTruthBox(9.0, 9.0, 22.0, 11.0)
        with self.assertLogs("platenet", level="WARNING"):
            target = detection.encode_targets([large, small], GRID, ANCHORS, IMAGE_SIZE)
        self.assertEqual(target.collisions, 1)
        self.assertEqual(int(target.mask.sum()), 1)
        self.assertAlmostEqual(target.tensor[0, 3, 0, 0], np.log(22.0 / 20.0))


class TestDecodePredictions(unittest.TestCase):

    def test_zero_raw(self):
        raw = np.zeros((12, GRID, GRID))
        detections = detection.decode_predictions(raw, ANCHORS, IMAGE_SIZE, conf_threshold=0.5)
        self.assertEqual(len(detections), 2 * GRID * GRID)
        for index, det in enumerate(detections):
            anchor, row, col = np.unravel_index(index, (2, GRID, GRID))
            self.assertAlmostEqual(det.cx, (col + 0.5) * CELL)
            self.assertAlmostEqual(det.cy, (row + 0.5) * CELL)
            self.assertAlmostEqual(det.w, ANCHORS[anchor][1])
            self.assertAlmostEqual(det.h, ANCHORS[anchor][0])
            self.assertAlmostEqual(det.confidence, 0.5)

    def test_threshold_above_one(self):
        self.assertEqual(detection.decode_predictions(np.zeros((12, GRID, GRID)), ANCHORS, IMAGE_SIZE, conf_threshold=1.0 + 1e-9), [])

    def test_centers_stay_in_cell(self):
        raw = np.random.default_rng(4).normal(scale=5.0, size=(12, GRID, GRID))
        detections = detection.decode_predictions(raw, ANCHORS, IMAGE_SIZE, conf_threshold=0.0)
        self.assertEqual(len(detections), 2 * GRID * GRID)
        for index, det in enumerate(detections):
            _, row, col = np.unravel_index(index, (2, GRID, GRID))
            self.assertTrue(col * CELL <= det.cx <= (col + 1) * CELL)
            self.assertTrue(row * CELL <= det.cy <= (row + 1) * CELL)
            self.assertGreater(det.w, 0)
            self.assertTrue(0.0 <= det.score <= 1.0)

    @given(st.integers(1, 6), st.integers(1, 6), st.integers(1, 4))
    @settings(derandomize=True, max_examples=30)
    def test_channel_count(self, num_classes, num_anchors, grid):
        anchors = [[10.0, 10.0 + a] for a in range(num_anchors)]
        raw = np.zeros(((num_classes + 5) * num_anchors, grid, grid))
        detections = detection.decode_predictions(raw, anchors, 32 * grid, 0.0, num_classes)
        self.assertEqual(len(detections), num_anchors * grid * grid)
        with self.assertRaises(ShapeError):
            detection.decode_predictions(raw[:-1], anchors, 32 * grid, 0.0, num_classes)

    @given(collision_free_boxes())
    @settings(derandomize=True)
    def test_round_trip(self, boxes):
        target = detection.encode_targets(boxes, GRID, ANCHORS, IMAGE_SIZE)
        self.assertEqual(target.collisions, 0)
        decoded = detection.decode_predictions(detection.ideal_raw(target), ANCHORS, IMAGE_SIZE)
        self.assertEqual(len(decoded), len(boxes))
        by_cell = {(int(d.cy // CELL), int(d.cx // CELL)): d for d in decoded}
        for box in boxes:
            det = by_cell[(int(box.cy // CELL), int(box.cx // CELL))]
            npt.assert_allclose([det.cx, det.cy, det.w, det.h], [box.cx, box.cy, box.w, box.h], atol=1e-6)

    def test_round_trip_classes(self):
        boxes = [GroundTruthBox(8.0, 8.0, 20.0, 10.0, class_id=1), GroundTruthBox(40.0, 40.0, 20.0, 10.0, class_id=2)]
        target = detection.encode_targets(boxes, GRID, ANCHORS, IMAGE_SIZE, num_classes=3)
        decoded = detection.decode_predictions(detection.ideal_raw(target), ANCHORS, IMAGE_SIZE, num_classes=3)
        self.assertEqual([d.class_id for d in decoded], [1, 2])


class TestNms(unittest.TestCase):

    def test_duplicates(self):
        kept = detection.nms([square(0, 0.9), square(0, 0.8)])
        self.assertEqual([d.score for d in kept], [0.9])

    def test_disjoint(self):
        kept = detection.nms([square(0, 0.5), square(50, 0.9), square(100, 0.7)])
        self.assertEqual([d.score for d in kept], [0.9, 0.7, 0.5])

    def test_chain(self):
        # Neighbours overlap by IOU 0.6, every second box by 1/3
        chain = [square(2.5 * i, 0.9 - 0.1 * i) for i in range(5)]
        kept = detection.nms(chain, 0.5)
        self.assertEqual([d.cx for d in kept], [chain[0].cx, chain[2].cx, chain[4].cx])

    def test_classes_do_not_suppress_each_other(self):
        kept = detection.nms([square(0, 0.9, class_id=0), square(0, 0.8, class_id=1)])
        self.assertEqual(len(kept), 2)

    def test_invalid_threshold(self):
        with self.assertRaises(DetectionError):
            detection.nms([], 0.0)
        with self.assertRaises(DetectionError):
            detection.nms([], 1.5)

    @given(st.lists(st.tuples(st.floats(0, 100), st.floats(0, 100), st.floats(1, 40), st.floats(0, 1)), max_size=15))
    @settings(derandomize=True)
    def test_idempotent(self, entries):
        detections = [Detection(x, y, w, w, s) for x, y, w, s in entries]
        once = detection.nms(detections)
        self.assertEqual(detection.nms(once), once)
        scores = [d.score for d in once]
        self.assertEqual(scores, sorted(scores, reverse=True))


class TestYoloLoss(unittest.TestCase):

    def _target(self, grid=2, image_size=32, num_classes=1):
        boxes = [GroundTruthBox(5.0, 6.0, 9.0, 4.0), GroundTruthBox(24.0, 20.0, 18.0, 10.0, class_id=num_classes - 1)]
        return detection.encode_targets(boxes, grid, [[5.0, 10.0], [10.0, 20.0]], image_size, num_classes)

    def test_ideal_output(self):
        target = self._target()
        loss, grad = detection.yolo_loss(detection.ideal_raw(target), target)
        self.assertLess(loss, 1e-12)
        self.assertLess(np.abs(grad).max(), 1e-6)

    def test_empty_target(self):
        target = detection.encode_targets([], 2, [[5.0, 10.0], [10.0, 20.0]], 32)
        raw = np.zeros((12, 2, 2))
        raw[0::6] = -50.0
        loss, _ = detection.yolo_loss(raw, target)
        self.assertLess(loss, 1e-20)

    def test_gradient(self):
        for num_classes in (1, 3):
            target = self._target(num_classes=num_classes)
            raw = np.random.default_rng(num_classes).normal(size=(2 * (5 + num_classes), 2, 2))
            config = YoloLossConfig(5.0, 0.5, 1.0, 2.0)
            loss, grad = detection.yolo_loss(raw, target, config)
            self.assertGreaterEqual(loss, 0.0)
            self.assertLess(check_gradient(lambda: detection.yolo_loss(raw, target, config)[0], raw, grad), 1e-4)

    def test_gradient_seeded_instances(self):
        anchors = [[5.0, 10.0], [10.0, 20.0]]
        for seed in range(100):
            rng = np.random.default_rng(seed)
            boxes = [GroundTruthBox(*rng.uniform(0.0, 31.0, size=2), *rng.uniform(2.0, 24.0, size=2))
                     for _ in range(int(rng.integers(0, 4)))]
            target = detection.encode_targets(boxes, 2, anchors, 32)
            raw = rng.normal(size=(12, 2, 2))
            loss, grad = detection.yolo_loss(raw, target)
            self.assertGreaterEqual(loss, 0.0)
            self.assertLess(check_gradient(lambda: detection.yolo_loss(raw, target)[0], raw, grad), 1e-4, seed)

    def test_shape_mismatch(self):
        with self.assertRaises(ShapeError):
            detection.yolo_loss(np.zeros((12, 3, 3)), self._target())
        with self.assertRaises(DetectionError):
            YoloLossConfig(lambda_coord=-1.0)


class TestDetect(unittest.TestCase):

    def setUp(self):
        config = {
            "kind": "detector", "num_classes": 1, "input_size": 32, "stage_widths": [4, 8],
            "blocks_per_stage": [1, 1], "downsample_factor": 4, "tap": None,
            "anchors": [[8.0, 16.0], [16.0, 32.0]],
        }
        self.network = architectures.build_model(config, np.random.default_rng(0))

    def test_original_coordinates(self):
        image = Image.new("RGB", (64, 32), (90, 90, 90))
        detections = detection.detect(image, self.network, conf_threshold=0.0, nms_threshold=1.0)
        self.assertEqual(len(detections), 2 * 8 * 8)
        for det in detections:
            self.assertTrue(0.0 <= det.cx <= 64.0)
            # Letterboxing maps the 32 px input onto the 64 px wide original
            self.assertTrue(-16.0 <= det.cy <= 48.0)
            self.assertGreater(det.w, 0.0)
        scores = [d.score for d in detections]
        self.assertEqual(scores, sorted(scores, reverse=True))

    def test_requires_head(self):
        classifier = architectures.build_model(
            {"kind": "classifier", "num_classes": 2, "input_size": 20, "width_scale": 0.1, "blocks": 1},
            np.random.default_rng(0))
        with self.assertRaises(DetectionError):
            detection.detect(Image.new("RGB", (20, 20)), classifier)

    def test_anchor_set_accepted(self):
        raw = np.zeros((6, 2, 2))
        anchor_set = AnchorSet((BoxSize(8.0, 16.0),))
        self.assertEqual(len(detection.decode_predictions(raw, anchor_set, 32)), 4)


SINGLE_SCENE_DETECTOR = {
    "kind": "detector", "num_classes": 1, "input_size": 32, "stage_widths": [8, 16, 32],
    "blocks_per_stage": [1, 1, 1], "downsample_factor": 8, "tap": None,
    "anchors": [[8.0, 16.0], [16.0, 16.0]], "class_names": ["plate"],
}


def fit_single_scene_detector(out_dir, steps=(400, 100), learning_rates=(5e-3, 5e-4)):
    """
    Synthesize one 32 px scene holding a single 8x16 plate into out_dir and fit a small detector to it with ADAM.
    Return (network, image path, ground truth box).
    """
    config = synth.SynthConfig(seed=3, num_scenes=1, image_size=32, classes=("IND-2line",), size_range=(8, 16),
                               test_fraction=0.0)
    dataset = synth.synthesize(config, out_dir)
    sample, = dataset.samples
    network = architectures.build_model(SINGLE_SCENE_DETECTOR, np.random.default_rng(0))
    task = training.DetectionTask(dataset, network)
    params = network.parameters()
    state = optim.make_optimizer("adam", params, learning_rates[0])
    for count, lr in zip(steps, learning_rates):
        state.lr = lr
        for _ in range(count):
            _, grads = task.batch_loss(network, np.arange(1))
            optim.optimizer_step(state, params, grads)
    return network, dataset.image_path(sample), sample.boxes[0].to_ground_truth()


class TestDetectSingleScene(unittest.TestCase):

    @classmethod
    def setUpClass(cls):
        cls.tmp = tempfile.TemporaryDirectory()
        cls.network, cls.image_path, cls.truth = fit_single_scene_detector(cls.tmp.name)

    @classmethod
    def tearDownClass(cls):
        cls.tmp.cleanup()

    def test_plate_found(self):
        self.assertEqual((self.truth.w, self.truth.h), (16, 8))
        detections = detection.detect(self.image_path, self.network, conf_threshold=0.5, nms_threshold=0.5)
        self.assertEqual(len(detections), 1)
        self.assertGreater(iou(detections[0].corners(), self.truth.corners()), 0.5)

    def test_same_image_same_detections(self):
        first = detection.detect(self.image_path, self.network, 0.05, 0.5)
        second = detection.detect(imaging.read_image(self.image_path), self.network, 0.05, 0.5)
        self.assertEqual(first, second)

    def test_blank_image_at_high_threshold(self):
        blank = Image.new("RGB", (32, 32), (120, 120, 120))
        self.assertEqual(detection.detect(blank, self.network, conf_threshold=0.99, nms_threshold=0.5), [])
