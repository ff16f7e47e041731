"""
Load the report JSON schemas and build python_jsonschema_objects classes for validation and serialization.
"""
import functools
import os.path

import jsonschema
import yaml
from python_jsonschema_objects import ObjectBuilder

from platenet import PlatenetError


class SchemaError(PlatenetError): pass


SCHEMAS_DIR = os.path.abspath(os.path.join(os.path.dirname(__file__), "schemas"))
REPORT_SCHEMA_VERSION = "v1_0"


def schema_path(key, version=REPORT_SCHEMA_VERSION):
    return os.path.join(SCHEMAS_DIR, "{}_{}.yaml".format(key, version))


@functools.lru_cache(maxsize=None)
def build_schema(key, version=REPORT_SCHEMA_VERSION):
    """
    Return {"schema": dict, "classes": namespace of generated classes} for the schema file of key.
    """
    path = schema_path(key, version)
    if not os.path.exists(path):
        raise SchemaError("Cannot build JSON schema object {}, schema path does not exist: {}".format(key, path))
    with open(path, encoding="utf-8") as schema_file:
        schema = yaml.safe_load(schema_file)
    return {"schema": schema, "classes": ObjectBuilder(schema).build_classes()}


def validate(key, data):
    try:
        jsonschema.validate(data, build_schema(key)["schema"])
    except jsonschema.ValidationError as e:
        raise SchemaError("Data does not conform to JSON schema {!r}: {}".format(key, e.message)) from e


def serialize_report(data):
    """
    Validate data as an "Eval report" object and return it as a JSON string with sorted keys.
    """
    validate("eval_report", data)
    EvalReport = build_schema("eval_report")["classes"].EvalReport
    return EvalReport(**data).serialize(sort_keys=True)
