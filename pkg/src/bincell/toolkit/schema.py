"""JSON schema handling for all JSON files of bincell-toolkit.

The schemas live in the ``resources`` folder of the package. They are
dereferenced with :mod:`jsonref` and validated with :mod:`jsonschema`.
"""
import functools
import json
import typing as t
from pathlib import Path

import jsonref
import jsonschema

from bincell.toolkit.exceptions import ValidationError

# JSON Schema validator for validating the schemes.
JSON_SCHEMA_VALIDATOR = jsonschema.Draft7Validator
RESOURCES = Path(__file__).parent / "resources"

ErrorClassifier = t.Callable[[jsonschema.ValidationError], t.Type[ValidationError]]


def _derefence_json(schema: t.Union[str, dict]) -> t.Any:
    """Dereference JSON schema.

    Args:
        schema: JSON schema as a string or dictionary.

    Returns:
        Dereferenced schema.

    Raises:
        ValueError: Wrong `schema` type.
    """
    if isinstance(schema, str):
        return jsonref.loads(schema, jsonschema=True)
    if isinstance(schema, dict):
        return jsonref.loads(json.dumps(schema), jsonschema=True)
    raise ValueError(schema)


@functools.lru_cache(maxsize=None)
def load_schema(name: str) -> t.Any:
    """Load a dereferenced schema from the package resources.

    Args:
        name: File name of the schema, e.g. ``annotation_schema.json``.

    Returns:
        Dereferenced schema.
    """
    return _derefence_json((RESOURCES / name).read_text(encoding="utf-8"))


def validate_instance(
    instance: t.Any,
    schema: t.Any,
    classify: t.Optional[ErrorClassifier] = None,
    validator=JSON_SCHEMA_VALIDATOR,
) -> None:
    """Validate a JSON instance against a schema.

    Args:
        instance: Parsed JSON document.
        schema: Dereferenced JSON schema.
        classify: Maps a schema violation to a specific
            :class:`ValidationError` subclass. Defaults to
            :class:`ValidationError` itself.
        validator: JSON schema validator class.

    Raises:
        ValidationError: If the instance does not follow the schema.
    """
    try:
        jsonschema.validate(instance=instance, schema=schema, cls=validator)
    except jsonschema.ValidationError as e:
        error_type = classify(e) if classify else ValidationError
        location = "/".join(str(part) for part in e.absolute_path)
        raise error_type(f"{location or '<root>'}: {e.message}") from None
