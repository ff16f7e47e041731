"""
Number plate detection and classification toolkit.

Commands:
    synth    render deterministic synthetic plate scenes and their manifest
    train    train a plate classifier or a grid detector on a manifest
    eval     evaluate a checkpoint, pooled and per country group
    anchors  generate the anchor pyramid and analyze how well it covers a set of box sizes
    predict  detect plates in images, optionally classifying every detected plate

Settings come from platenet/baseconfig.yaml, overridden by a YAML file given with --config, overridden by flags.
"""
import argparse
import concurrent.futures
import csv
import io
import logging
import os
import pprint
import sys
import time


# Log all library warnings into a single, global stream that ends up in the evaluation report
logger = logging.getLogger("platenet")
logger.setLevel(logging.DEBUG)
warnings_handler = logging.StreamHandler(stream=io.StringIO())
warnings_handler.setLevel(logging.WARNING)
logger.addHandler(warnings_handler)

import jsonschema
import numpy as np
import yaml

from platenet import PlatenetError
from platenet import anchors, architectures, checkpoint, detection, evaluation, imaging, manifest, optim, schemaobjects, synth, training
from platenet_format import render

BASECONFIG = os.path.join(os.path.dirname(__file__), "baseconfig.yaml")
RUN_CONFIG_SCHEMA = os.path.join(os.path.dirname(__file__), "schemas", "run_config_v1_0.yaml")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_IO = 2
EXIT_NUMERICAL = 3

MODE_DEFAULTS = {
    "classifier": {"batch_size": 120, "lr": 2.5e-2},
    "detector": {"batch_size": 6, "lr": 1e-5},
}
NUMBER_LIST_KEYS = ("size_range", "plates_per_scene", "stage_widths", "blocks_per_stage")
INTEGER_LIST_KEYS = ("plates_per_scene", "stage_widths", "blocks_per_stage")
SIZE_LIST_KEYS = ("anchor_base_sizes", "anchor_sizes")

CHECKPOINT_NAME = "checkpoint.npdk"
TRAIN_LOG_NAME = "train_log.csv"
DETECTIONS_NAME = "detections.csv"


class ConfigError(PlatenetError): pass


class ArgumentParser(argparse.ArgumentParser):
    """Usage errors exit with EXIT_USAGE."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, "{}: error: {}\n".format(self.prog, message))


def parse_warnings(handler=warnings_handler):
    """
    Return an iterator over all warnings written into the stream of handler.
    """
    stream = handler.stream
    stream.seek(0)
    for warning in stream:
        if warning.strip():
            yield warning.strip()


def configure_logging(verbosity):
    """
    Reset the warnings stream and attach a stderr handler with level WARNING, INFO or DEBUG by verbosity.
    """
    warnings_handler.setStream(io.StringIO())
    for handler in list(logger.handlers):
        if handler is not warnings_handler:
            logger.removeHandler(handler)
    console = logging.StreamHandler(stream=sys.stderr)
    console.setLevel((logging.WARNING, logging.INFO, logging.DEBUG)[min(verbosity or 0, 2)])
    console.setFormatter(logging.Formatter("%(levelname)s: %(message)s"))
    logger.addHandler(console)


def timed(timed_function, args=(), kwargs=None, timer=time.perf_counter):
    """
    Call timed_function with args and kwargs and return the running time and the value returned by timed_function.
    """
    if kwargs is None:
        kwargs = dict()
    start_time = timer()
    result = timed_function(*args, **kwargs)
    return timer() - start_time, result


def _load_yaml(path, what):
    try:
        with open(path, encoding="utf-8") as f:
            return yaml.safe_load(f)
    except yaml.YAMLError as e:
        raise ConfigError("Failed to parse an invalid {} {}, the yaml parser error was: {}".format(what, path, e)) from e


def _validate(config, schema, source):
    try:
        jsonschema.validate(config, schema)
    except jsonschema.ValidationError as e:
        location = ".".join(str(part) for part in e.absolute_path) or "config"
        raise ConfigError("Invalid configuration from {}, {}: {}".format(source, location, e.message)) from e


def _split_list(value, convert):
    if isinstance(value, str):
        return [convert(item.strip()) for item in value.split(",") if item.strip()]
    return [convert(item) for item in value]


def _size_pair(item):
    if isinstance(item, str):
        height, width = item.lower().split("x")
        return [float(height), float(width)]
    return [float(item[0]), float(item[1])]


def normalize_config(config):
    """
    Expand comma separated list strings and fill in the training defaults of the selected mode.
    """
    config = dict(config)
    for key in NUMBER_LIST_KEYS:
        convert = int if key in INTEGER_LIST_KEYS else float
        config[key] = _split_list(config[key], convert)
    for key in SIZE_LIST_KEYS:
        if config[key] is not None:
            config[key] = _split_list(config[key], _size_pair)
    config["classes"] = _split_list(config["classes"], str)
    for key, value in MODE_DEFAULTS[config["mode"]].items():
        if config[key] is None:
            config[key] = value
    return config


def load_config(config_path=None, overrides=None):
    """
    Merge the base config, the validated YAML file at config_path and overrides, in increasing precedence.
    """
    schema = _load_yaml(RUN_CONFIG_SCHEMA, "schema")
    config = _load_yaml(BASECONFIG, "base configuration")
    if config_path is not None:
        try:
            user_config = _load_yaml(config_path, "configuration file") or {}
        except OSError as e:
            raise ConfigError("Unable to read configuration file {}: {}".format(config_path, e)) from e
        if not isinstance(user_config, dict):
            raise ConfigError("Configuration file {} must contain a mapping of keys to values".format(config_path))
        _validate(user_config, schema, config_path)
        config = dict(config, **user_config)
    if overrides:
        config = dict(config, **overrides)
        _validate(config, schema, "command line flags")
    return normalize_config(config)


def _require(config, key, command):
    if config.get(key) is None:
        raise ConfigError("Command {!r} needs {!r}, give it with --{} or in the config file".format(command, key, key.replace("_", "-")))
    return config[key]


def _output_path(config, name):
    os.makedirs(config["out"], exist_ok=True)
    return os.path.join(config["out"], name)


def cmd_synth(config):
    synth_config = synth.SynthConfig(
        seed=config["seed"],
        num_scenes=config["scenes"],
        image_size=config["image_size"],
        classes=tuple(config["classes"]),
        size_range=tuple(config["size_range"]),
        plates_per_scene=tuple(config["plates_per_scene"]),
        test_fraction=config["test_fraction"],
        max_retries=config["max_retries"],
    )
    synth.synthesize(synth_config, config["out"], config["threads"])
    print(manifest.manifest_hash(os.path.join(config["out"], synth.MANIFEST_NAME)))
    return EXIT_OK


def train_schedule(config):
    finetune = None
    if config["finetune_epochs"]:
        finetune = optim.FineTuneSchedule(
            start_lr=config["finetune_lr"],
            epochs=config["finetune_epochs"],
            batch_doubling_period_epochs=config["finetune_period"],
            lr_halving_period_epochs=config["finetune_period"],
            stop_when_no_improvement=config["finetune_stop_when_no_improvement"],
        )
    return optim.TrainSchedule(
        epochs=config["epochs"],
        initial_lr=config["lr"],
        lr_drop_factor=config["lr_drop_factor"],
        lr_drop_period_epochs=config["lr_drop_period"],
        minibatch_size=config["batch_size"],
        shuffle_each_epoch=config["shuffle"],
        finetune=finetune,
    )


def model_config(config, dataset):
    """Plain-data model description stored in checkpoints, see architectures.build_model."""
    common = {"input_size": config["input_size"], "bn_eps": config["bn_eps"], "bn_momentum": config["bn_momentum"]}
    if config["mode"] == "classifier":
        return dict(common,
            kind="classifier",
            num_classes=len(dataset.classes),
            width_scale=config["width_scale"],
            blocks=config["blocks"],
            class_names=list(dataset.classes),
        )
    num_classes = config["detector_classes"]
    pyramid = anchors.generate_pyramid(anchors.PyramidConfig.from_dict(config))
    return dict(common,
        kind="detector",
        num_classes=num_classes,
        stage_widths=list(config["stage_widths"]),
        blocks_per_stage=list(config["blocks_per_stage"]),
        downsample_factor=config["downsample_factor"],
        tap=config["tap"],
        anchors=pyramid.as_array().tolist(),
        class_names=list(dataset.classes) if num_classes > 1 else ["plate"],
    )


def cmd_train(config):
    schedule = train_schedule(config)
    dataset = manifest.load_manifest(_require(config, "manifest", "train"))
    if config["mode"] == "detector" and config["detector_classes"] > 1 and config["detector_classes"] != len(dataset.classes):
        raise ConfigError("detector_classes is {} but the manifest declares {} classes".format(config["detector_classes"], len(dataset.classes)))
    rng = np.random.default_rng(config["seed"])
    network = architectures.build_model(model_config(config, dataset), rng)
    logger.info("Training a %s with %d learnable parameters", config["mode"], network.learnable_count)
    if config["mode"] == "classifier":
        task = training.ClassificationTask(dataset, config["input_size"])
    else:
        loss_config = detection.YoloLossConfig(
            lambda_coord=config["lambda_coord"],
            lambda_noobj=config["lambda_noobj"],
            lambda_obj=config["lambda_obj"],
            lambda_class=config["lambda_class"],
        )
        task = training.DetectionTask(dataset, network, loss_config, config["eval_conf_threshold"], config["nms_threshold"])
    constants = {key: config[key] for key in ("momentum", "adam_beta1", "adam_beta2", "adam_eps")}
    history = training.train(network, task, schedule, rng, config["optimizer"], constants)
    checkpoint.save_checkpoint(network, _output_path(config, CHECKPOINT_NAME))
    training.write_training_log(history, _output_path(config, TRAIN_LOG_NAME))
    print("Best test metric {:.4f}".format(history.best_metric))
    return EXIT_OK


def _evaluate_classifier(network, dataset, samples):
    class_names = network.config["class_names"]
    input_size = network.spec.input_shape[1]
    by_group = {}
    for sample in samples:
        if not sample.boxes:
            continue
        if sample.class_label not in class_names:
            raise evaluation.EvaluationError("Class {!r} of {} is unknown to the classifier".format(sample.class_label, sample.image_ref))
        image = imaging.read_image(dataset.image_path(sample))
        inputs = training.plate_crop_input(image, sample.boxes[0], input_size)[None]
        predicted, truth = by_group.setdefault(evaluation.group_of(sample.class_label), ([], []))
        predicted.extend(training.predict_classes(network, inputs))
        truth.append(class_names.index(sample.class_label))
    return evaluation.per_group_report(classifications=by_group)


def _evaluate_detector(network, dataset, samples, config):
    class_names = network.config["class_names"]

    def detect_sample(sample):
        seconds, detections = timed(detection.detect, (dataset.image_path(sample), network, config["eval_conf_threshold"], config["nms_threshold"]))
        logger.debug("%s: %d detections in %.3f s", sample.image_ref, len(detections), seconds)
        return seconds, detections

    with concurrent.futures.ThreadPoolExecutor(max_workers=config["threads"]) as executor:
        results = list(executor.map(detect_sample, samples))
    if results:
        logger.info("Mean processing time %.4f s per image", sum(seconds for seconds, _ in results) / len(results))
    by_group = {}
    for sample, (_, detections) in zip(samples, results):
        if len(class_names) == 1:
            class_id = 0
        elif sample.class_label in class_names:
            class_id = class_names.index(sample.class_label)
        else:
            raise evaluation.EvaluationError("Class {!r} of {} is unknown to the detector".format(sample.class_label, sample.image_ref))
        truths = [box.to_ground_truth(class_id) for box in sample.boxes]
        by_group.setdefault(evaluation.group_of(sample.class_label), []).append((detections, truths))
    return evaluation.per_group_report(
        detections=by_group,
        score_threshold=config["conf_threshold"],
        iou_threshold=config["iou_threshold"],
    )


def cmd_eval(config):
    network = checkpoint.load_checkpoint(_require(config, "checkpoint", "eval"))
    dataset = manifest.load_manifest(_require(config, "manifest", "eval"))
    samples = dataset.split(config["split"])
    mode = network.config["kind"]
    if mode == "classifier":
        report = _evaluate_classifier(network, dataset, samples)
    else:
        report = _evaluate_detector(network, dataset, samples, config)
        evaluation.write_pr_curve_csv(report.curve, _output_path(config, "pr_curve.csv"))
    evaluation.write_report_csv(report, _output_path(config, "report.csv"))
    report_data = schemaobjects.report_as_dict(report, mode, config["split"], list(parse_warnings()))
    with open(_output_path(config, "report.json"), "w", encoding="utf-8") as f:
        f.write(schemaobjects.full_serialize(report_data) + "\n")
    with open(_output_path(config, "report.txt"), "w", encoding="utf-8") as f:
        f.write(render.report_to_text(report_data))
    if config["svg"] and mode == "detector":
        with open(_output_path(config, "pr_curve.svg"), "w", encoding="utf-8") as f:
            f.write(render.pr_curve_to_svg(report_data["prCurve"], title="AP {:.4f}".format(report.ap)))
    if mode == "classifier":
        print("Accuracy {:.4f}".format(report.accuracy))
    else:
        print("AP {:.4f}".format(report.ap))
    return EXIT_OK


def _coverage_boxes(config):
    if config["anchor_sizes"] is not None:
        return [anchors.BoxSize(h, w) for h, w in config["anchor_sizes"]]
    if config["manifest"] is not None:
        dataset = manifest.load_manifest(config["manifest"], check_images=False)
        return [anchors.BoxSize(box.h, box.w) for sample in dataset.samples for box in sample.boxes]
    styles = synth.SynthConfig(classes=tuple(config["classes"])).styles
    aspects = tuple(sorted({style.aspect for style in styles}))
    rng = np.random.default_rng(config["seed"])
    return synth.sample_box_sizes(rng, config["anchor_sample_count"], tuple(config["size_range"]), aspects)


def cmd_anchors(config):
    pyramid = anchors.generate_pyramid(anchors.PyramidConfig.from_dict(config))
    report = anchors.coverage_stats(_coverage_boxes(config), pyramid, config["anchor_bins"])
    anchors.write_anchors_csv(pyramid, _output_path(config, "anchors.csv"))
    anchors.write_coverage_csv(report, _output_path(config, "coverage.csv"))
    anchors.write_coverage_summary(report, _output_path(config, "coverage_summary.csv"))
    anchors.write_histogram_csv(report, _output_path(config, "coverage_histogram.csv"))
    print("{} anchors, min best IOU {:.4f}, mean best IOU {:.4f}".format(len(pyramid), report.min_best_iou, report.mean_best_iou))
    return EXIT_OK


def _classify_plates(classifier, image, detections):
    class_names = classifier.config["class_names"]
    input_size = classifier.spec.input_shape[1]
    labels = []
    for det in detections:
        x1, y1, _, _ = det.corners()
        box = manifest.PlateBox(x1, y1, det.w, det.h)
        inputs = training.plate_crop_input(image, box, input_size)[None]
        labels.append(class_names[training.predict_classes(classifier, inputs)[0]])
    return labels


def cmd_predict(config, images):
    network = checkpoint.load_checkpoint(_require(config, "checkpoint", "predict"))
    classifier = None
    if config["classifier_checkpoint"] is not None:
        classifier = checkpoint.load_checkpoint(config["classifier_checkpoint"])

    def predict_image(path):
        try:
            image = imaging.read_image(path)
        except imaging.ImageError as e:
            logger.error("%s", e)
            return None
        seconds, detections = timed(detection.detect, (image, network, config["conf_threshold"], config["nms_threshold"]))
        logger.debug("%s: %d detections in %.3f s", path, len(detections), seconds)
        labels = _classify_plates(classifier, image, detections) if classifier else [None] * len(detections)
        return list(zip(detections, labels))

    with concurrent.futures.ThreadPoolExecutor(max_workers=config["threads"]) as executor:
        results = list(executor.map(predict_image, images))
    header = ["image", "cx", "cy", "w", "h", "score", "class_id"]
    if classifier:
        header.append("plate_class")
    failures = 0
    with open(_output_path(config, DETECTIONS_NAME), "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        for path, rows in zip(images, results):
            if rows is None:
                failures += 1
                print("{}: failed".format(path))
                continue
            print("{}: {} detections".format(path, len(rows)))
            for det, label in rows:
                fields = [path] + ["{:.6f}".format(value) for value in (det.cx, det.cy, det.w, det.h, det.score)] + [str(det.class_id)]
                if classifier:
                    fields.append(label)
                writer.writerow(fields)
    return EXIT_IO if failures else EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "anchors": cmd_anchors,
}


def exit_code_for(error):
    if isinstance(error, (training.NumericalError, evaluation.UndefinedMetricError)):
        return EXIT_NUMERICAL
    if isinstance(error, (OSError, manifest.ManifestError, checkpoint.CheckpointError, imaging.ImageError)):
        return EXIT_IO
    return EXIT_USAGE


def run(command, config_path=None, overrides=None, images=(), verbosity=0, develop_mode=False, show_config=False):
    """
    platenet main entrypoint.
    Runs one command and returns its exit code.
    For accepted arguments, see make_argparser.
    """
    configure_logging(verbosity)
    config = None
    try:
        config = load_config(config_path, overrides)
        if develop_mode or show_config:
            logger.info("The configuration was:\n%s", pprint.PrettyPrinter(indent=2).pformat(config))
        if command == "predict":
            return cmd_predict(config, list(images))
        return COMMANDS[command](config)
    except (PlatenetError, OSError) as e:
        if develop_mode:
            raise
        print("platenet {}: {}".format(command, e), file=sys.stderr)
        return exit_code_for(e)


def make_argparser():
    parser = ArgumentParser(
        prog="platenet",
        description="Number plate detection and classification toolkit",
        epilog=__doc__,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", dest="config_path", type=str, help="YAML run configuration, see platenet/run_config.yaml")
    common.add_argument("--seed", type=int, help="Seed of all random choices")
    common.add_argument("--out", type=str, help="Output directory")
    common.add_argument("--threads", type=int, help="Worker threads")
    common.add_argument("--verbose", "-v", dest="verbosity", action="count", default=0, help="Log more, repeat for debug output")
    common.add_argument("--show-config", action="store_true", help="Log the merged configuration.")
    common.add_argument("--develop-mode", action="store_true",
            help="Raise unhandled exceptions with full tracebacks instead of a one line message. Also implies --show-config.")
    subparsers = parser.add_subparsers(dest="command", metavar="command")
    subparsers.required = True

    sub = subparsers.add_parser("synth", parents=[common], help="Render synthetic plate scenes")
    sub.add_argument("--scenes", type=int, help="Number of scenes")
    sub.add_argument("--image-size", type=int, help="Side of the square scenes in pixels")
    sub.add_argument("--classes", type=str, help="Comma separated plate styles, e.g. IND-1line,EU-1line")
    sub.add_argument("--size-range", type=str, help="Smallest and largest plate side, e.g. 10,670")
    sub.add_argument("--test-fraction", type=float, help="Fraction of scenes in the test split")

    sub = subparsers.add_parser("train", parents=[common], help="Train a classifier or detector")
    sub.add_argument("--manifest", type=str, help="Dataset manifest")
    sub.add_argument("--mode", choices=("classifier", "detector"))
    sub.add_argument("--epochs", type=int)
    sub.add_argument("--batch-size", type=int)
    sub.add_argument("--lr", type=float, help="Initial learning rate")
    sub.add_argument("--optimizer", choices=optim.OPTIMIZERS)
    sub.add_argument("--finetune-epochs", type=int, help="Epochs of ADAM fine-tuning after the main phase")
    sub.add_argument("--input-size", type=int, help="Side of the square network input")
    sub.add_argument("--width-scale", type=float, help="Classifier channel width multiplier")
    sub.add_argument("--blocks", type=int, help="Classifier conv-conv-pool groups")

    sub = subparsers.add_parser("eval", parents=[common], help="Evaluate a checkpoint")
    sub.add_argument("--checkpoint", type=str)
    sub.add_argument("--manifest", type=str)
    sub.add_argument("--split", choices=manifest.SPLITS)
    sub.add_argument("--conf-threshold", type=float, help="Operating score threshold of precision and recall")
    sub.add_argument("--svg", action="store_true", default=None, help="Also plot the PR curve as SVG")

    sub = subparsers.add_parser("anchors", parents=[common], help="Anchor pyramid coverage analysis")
    sub.add_argument("--manifest", type=str, help="Analyze the boxes of this manifest")
    sub.add_argument("--anchor-sizes", type=str, help="Analyze these sizes instead, e.g. 10x40,20x80")
    sub.add_argument("--anchor-levels", type=int)
    sub.add_argument("--anchor-scale", type=float)

    sub = subparsers.add_parser("predict", parents=[common], help="Detect plates in images")
    sub.add_argument("images", nargs="*", help="Image files")
    sub.add_argument("--checkpoint", type=str)
    sub.add_argument("--classifier-checkpoint", type=str, help="Classify every detected plate with this checkpoint")
    sub.add_argument("--conf-threshold", type=float)
    sub.add_argument("--nms-threshold", type=float)
    return parser


def parse_cli_args(argv=None):
    """
    Return the keyword arguments of run for a command line.
    """
    cli_args = vars(make_argparser().parse_args(argv))
    command = cli_args.pop("command")
    kwargs = {
        "config_path": cli_args.pop("config_path"),
        "images": cli_args.pop("images", ()),
        "verbosity": cli_args.pop("verbosity"),
        "develop_mode": cli_args.pop("develop_mode"),
        "show_config": cli_args.pop("show_config"),
    }
    kwargs["overrides"] = {key: value for key, value in cli_args.items() if value is not None}
    return command, kwargs


def cli_main(argv=None):
    command, kwargs = parse_cli_args(argv)
    sys.exit(run(command, **kwargs))


if __name__ == "__main__":
    cli_main()
