"""
Training loops for the plate classifier and the grid detector.

A task turns a Dataset into network inputs and targets and knows how to compute a minibatch loss with gradients
and a test metric where higher is better: accuracy for classifiers, AP for detectors.
"""
import csv
import dataclasses
import logging

import numpy as np

from platenet import PlatenetError
from platenet import detection, evaluation, imaging, layers, optim
from platenet.architectures import backward_network, forward_network


logger = logging.getLogger("platenet")

EVAL_CHUNK = 64
LOG_COLUMNS = ("epoch", "phase", "lr", "batch_size", "train_loss", "test_metric")


class TrainingError(PlatenetError): pass

class NumericalError(PlatenetError): pass


def plate_crop_input(image, box, input_size):
    """Network input of the plate in box, letterboxed to input_size."""
    plate = imaging.crop(image, box.x, box.y, box.w, box.h)
    boxed, _ = imaging.letterbox(plate, input_size)
    return imaging.to_network_input(boxed)


def predict_classes(network, inputs):
    """Arg-max class ids of a (N, 3, H, W) input batch, computed in chunks."""
    predictions = []
    for start in range(0, len(inputs), EVAL_CHUNK):
        output = forward_network(network, inputs[start:start + EVAL_CHUNK], mode="infer").output
        predictions.extend(int(p) for p in output.reshape(output.shape[0], -1).argmax(axis=1))
    return predictions


class ClassificationTask:
    """
    One sample per annotated image: the crop of its first plate, labeled with the image class.
    Images without plates are left out.
    """

    def __init__(self, dataset, input_size):
        self.dataset = dataset
        self.input_size = input_size
        self.train_inputs, self.train_labels = self._load("train")
        self.test_inputs, self.test_labels = self._load("test")

    def _load(self, split):
        inputs, labels = [], []
        for sample in self.dataset.split(split):
            if not sample.boxes:
                continue
            image = imaging.read_image(self.dataset.image_path(sample))
            inputs.append(plate_crop_input(image, sample.boxes[0], self.input_size))
            labels.append(self.dataset.class_index(sample.class_label))
        shape = (len(inputs), 3, self.input_size, self.input_size)
        return (np.stack(inputs) if inputs else np.zeros(shape)), np.array(labels, dtype=np.int64)

    @property
    def train_count(self):
        return len(self.train_labels)

    def batch_loss(self, network, indices):
        result = forward_network(network, self.train_inputs[indices], mode="train", until="fc")
        logits = result.output.reshape(len(indices), -1)
        loss, grad = layers.softmax_cross_entropy(logits, self.train_labels[indices])
        _, grads = backward_network(network, result.caches, grad.reshape(result.output.shape))
        return loss, grads

    def evaluate(self, network):
        inputs, labels = self.test_inputs, self.test_labels
        if not len(labels):
            logger.warning("Test split is empty, reporting accuracy on the training split")
            inputs, labels = self.train_inputs, self.train_labels
        return evaluation.classification_accuracy(predict_classes(network, inputs), labels.tolist())


class DetectionTask:
    """
    Whole scenes letterboxed to the detector input, with plates encoded on the head grid.
    With one class every plate is class 0, otherwise the class of its image.
    """

    def __init__(self, dataset, network, loss_config=None, conf_threshold=0.05, nms_threshold=0.5):
        head = network.spec.head
        if head is None:
            raise TrainingError("Detection training needs a network with a detection head")
        self.dataset = dataset
        self.anchors = network.config["anchors"]
        self.num_classes = head.num_classes
        self.input_size = network.spec.input_shape[1]
        self.grid_size = head.grid_size
        self.loss_config = loss_config or detection.YoloLossConfig()
        self.conf_threshold = conf_threshold
        self.nms_threshold = nms_threshold
        self.train_inputs, self.train_targets, self.train_boxes = self._load("train")
        self.test_inputs, _, self.test_boxes = self._load("test")

    def _class_id(self, sample):
        return 0 if self.num_classes == 1 else self.dataset.class_index(sample.class_label)

    def _load(self, split):
        inputs, targets, boxes = [], [], []
        for sample in self.dataset.split(split):
            image = imaging.read_image(self.dataset.image_path(sample))
            boxed, transform = imaging.letterbox(image, self.input_size)
            class_id = self._class_id(sample)
            truths = []
            for plate in sample.boxes:
                gt = plate.to_ground_truth(class_id)
                cx, cy, w, h = transform.box_to_letterbox(gt.cx, gt.cy, gt.w, gt.h)
                truths.append(detection.GroundTruthBox(cx, cy, w, h, class_id))
            inputs.append(imaging.to_network_input(boxed))
            targets.append(detection.encode_targets(truths, self.grid_size, self.anchors, self.input_size, self.num_classes))
            boxes.append(truths)
        shape = (len(inputs), 3, self.input_size, self.input_size)
        return (np.stack(inputs) if inputs else np.zeros(shape)), targets, boxes

    @property
    def train_count(self):
        return len(self.train_targets)

    def batch_loss(self, network, indices):
        result = forward_network(network, self.train_inputs[indices], mode="train")
        grad = np.zeros_like(result.output)
        total = 0.0
        for row, index in enumerate(indices):
            loss, grad[row] = detection.yolo_loss(result.output[row], self.train_targets[index], self.loss_config)
            total += loss
        grad /= len(indices)
        _, grads = backward_network(network, result.caches, grad)
        return total / len(indices), grads

    def detections(self, network, inputs):
        """Decoded and suppressed detections per input, in letterbox pixels."""
        results = []
        for start in range(0, len(inputs), EVAL_CHUNK):
            output = forward_network(network, inputs[start:start + EVAL_CHUNK], mode="infer").output
            for raw in output:
                decoded = detection.decode_predictions(raw, self.anchors, self.input_size, self.conf_threshold, self.num_classes)
                results.append(detection.nms(decoded, self.nms_threshold))
        return results

    def evaluate(self, network):
        inputs, boxes = self.test_inputs, self.test_boxes
        if not any(boxes):
            logger.warning("Test split has no plates, reporting AP on the training split")
            inputs, boxes = self.train_inputs, self.train_boxes
        ap, _ = evaluation.average_precision(zip(self.detections(network, inputs), boxes))
        return ap


@dataclasses.dataclass
class TrainingHistory:
    rows: list = dataclasses.field(default_factory=list)
    best_metric: float = None
    best_epoch: tuple = None


def _copy_arrays(network):
    return {name: array.copy() for name, array in network.named_arrays().items()}


def _restore_arrays(network, saved):
    for name, array in network.named_arrays().items():
        array[...] = saved[name]


def _run_epoch(network, task, state, batch_size, order):
    params = network.parameters()
    losses = []
    for start in range(0, len(order), batch_size):
        indices = order[start:start + batch_size]
        loss, grads = task.batch_loss(network, indices)
        if not np.isfinite(loss):
            raise NumericalError("Training loss became {} at step {}".format(loss, state.step_count + 1))
        optim.optimizer_step(state, params, grads)
        losses.append(loss)
    return float(np.mean(losses))


def train(network, task, schedule, rng, optimizer="sgdm", optimizer_constants=None):
    """
    Run the main phase of schedule and then its optional ADAM fine-tuning phase.
    Fine-tuning doubles the batch size and halves the learning rate every period and, when configured,
    stops at the first epoch that does not improve the test metric.
    The network is left holding the parameters of the best epoch by test metric.
    """
    if task.train_count == 0:
        raise TrainingError("The training split is empty")
    constants = dict(optimizer_constants or {})
    history = TrainingHistory()
    best_arrays = None

    def finish_epoch(phase, epoch, lr, batch_size, loss):
        nonlocal best_arrays
        metric = task.evaluate(network)
        history.rows.append({
            "epoch": epoch + 1, "phase": phase, "lr": lr, "batch_size": batch_size,
            "train_loss": loss, "test_metric": metric,
        })
        logger.info("%s epoch %d: lr %.3g, batch %d, loss %.6f, test metric %.4f", phase, epoch + 1, lr, batch_size, loss, metric)
        improved = history.best_metric is None or metric > history.best_metric
        if improved:
            history.best_metric = metric
            history.best_epoch = (phase, epoch + 1)
            best_arrays = _copy_arrays(network)
        return improved

    state = optim.make_optimizer(optimizer, network.parameters(), schedule.initial_lr, **constants)
    logger.debug("%d training samples, %d steps per epoch", task.train_count,
                 optim.steps_per_epoch(task.train_count, schedule.minibatch_size))
    for epoch in range(schedule.epochs):
        state.lr = optim.schedule_lr(schedule, epoch, "main")
        order = rng.permutation(task.train_count) if schedule.shuffle_each_epoch else np.arange(task.train_count)
        loss = _run_epoch(network, task, state, schedule.minibatch_size, order)
        finish_epoch("main", epoch, state.lr, schedule.minibatch_size, loss)

    finetune = schedule.finetune
    if finetune is not None and finetune.epochs > 0:
        adam_constants = {key: value for key, value in constants.items() if key.startswith("adam_")}
        state = optim.make_optimizer("adam", network.parameters(), finetune.start_lr, **adam_constants)
        for epoch in range(finetune.epochs):
            state.lr = optim.schedule_lr(schedule, epoch, "finetune")
            batch_size = optim.schedule_batch_size(schedule.minibatch_size, epoch, finetune.batch_doubling_period_epochs)
            order = rng.permutation(task.train_count) if schedule.shuffle_each_epoch else np.arange(task.train_count)
            loss = _run_epoch(network, task, state, batch_size, order)
            if not finish_epoch("finetune", epoch, state.lr, batch_size, loss) and finetune.stop_when_no_improvement:
                logger.info("Fine-tuning stopped after epoch %d, no improvement of the test metric", epoch + 1)
                break

    _restore_arrays(network, best_arrays)
    logger.info("Best test metric %.4f at %s epoch %d", history.best_metric, *history.best_epoch)
    return history


def write_training_log(history, path):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(LOG_COLUMNS)
        for row in history.rows:
            writer.writerow([
                row["epoch"], row["phase"], "{:.8g}".format(row["lr"]), row["batch_size"],
                "{:.8f}".format(row["train_loss"]), "{:.8f}".format(row["test_metric"]),
            ])
