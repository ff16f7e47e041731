"""
Render "Eval report" JSON objects as a plain text table per group, and PR curves as SVG, using Jinja2 templates.
"""
import argparse
import json
import sys

import jinja2

from platenet_format import schemabuilder


SVG_SIZE = 360
SVG_MARGIN = 50


def _load_package_template(name):
    package_loader = jinja2.PackageLoader("platenet_format", "templates")
    environment = jinja2.Environment(loader=package_loader, trim_blocks=True, lstrip_blocks=True)
    return environment.get_template(name)


def report_to_text(report_data):
    """
    Format an "Eval report" object as a table with one row per group followed by the pooled row.
    """
    return _load_package_template("report.txt").render(**report_data)


def pr_curve_to_svg(curve, title=""):
    """
    Single polyline plot of (recall, precision) points, both axes spanning [0, 1].
    curve is a list of dicts with recall and precision keys, in recall order.
    """
    points = " ".join(
        "{:.2f},{:.2f}".format(SVG_MARGIN + point["recall"] * SVG_SIZE, SVG_MARGIN + (1.0 - point["precision"]) * SVG_SIZE)
        for point in curve
    )
    return _load_package_template("pr_curve.svg").render(
        size=SVG_SIZE,
        margin=SVG_MARGIN,
        ticks=[i / 5 for i in range(6)],
        points=points,
        title=title,
    )


if __name__ == "__main__":
    parser = argparse.ArgumentParser(description="JSON evaluation report to text table or SVG converter")
    parser.add_argument("--verbose", '-v',
        action="store_true",
        help="Show validation errors"
    )
    parser.add_argument("--svg",
        action="store_true",
        help="Render the PR curve of the report as SVG instead of the table."
    )
    args = parser.parse_args()
    report_data = json.load(sys.stdin)
    try:
        schemabuilder.validate("eval_report", report_data)
    except schemabuilder.SchemaError:
        if args.verbose:
            raise
        print("Input does not conform to JSON schema 'Eval report'. Run platenet_format.render with --verbose to show the full validation error.")
        sys.exit(1)
    if args.svg:
        print(pr_curve_to_svg(report_data.get("prCurve", [])))
    else:
        print(report_to_text(report_data), end="")
