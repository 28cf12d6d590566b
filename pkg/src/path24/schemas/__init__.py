"""Versioned JSON schemas for the files the package writes."""

import json
from importlib import resources

import jsonschema

_FILES = {
    "path24-train-report/1": "train_report.schema.json",
    "path24-eval-result/1": "eval_result.schema.json",
}


def load_schema(format_tag: str) -> dict:
    try:
        name = _FILES[format_tag]
    except KeyError:
        raise ValueError(f"no schema for format {format_tag!r}") from None
    return json.loads(resources.files(__name__).joinpath(name).read_text(encoding="utf-8"))


def validate(document: dict) -> None:
    """Validate against the schema named by the document's ``format`` tag."""
    if not isinstance(document, dict) or "format" not in document:
        raise ValueError("document has no 'format' tag")
    try:
        jsonschema.validate(document, load_schema(document["format"]))
    except jsonschema.ValidationError as exc:
        raise ValueError(f"schema violation at {list(exc.absolute_path)}: {exc.message}") from exc
