"""Python module for handling the emotion class schema of each supported dataset."""
import logging
from typing import Dict, List, Optional, Sequence

from utilities.exceptions import ConfigError
from utilities.general_utils import load_json

BASIC_EMOTIONS = ["surprise", "fear", "disgust", "happy", "sad", "anger", "neutral"]

EMOTION_SCHEMA: Dict[str, List[str]] = {
    "affectnet8": ["surprise", "happy", "anger", "disgust", "neutral", "fear", "sad", "contempt"],
    "affectnet7": ["surprise", "happy", "anger", "disgust", "neutral", "fear", "sad"],
    "rafdb": list(BASIC_EMOTIONS),
    "fer2013": ["anger", "disgust", "fear", "happy", "sad", "surprise", "neutral"],
}


def load_emotion_schema(file_path: str = None) -> Dict[str, List[str]]:
    """
    Load dataset presets from a JSON file, or return the built-in presets if no file is provided.

    Args:
        file_path: Path to a JSON file mapping preset names to class-name lists

    Returns:
        Dictionary mapping preset names to ordered class names
    """
    if file_path:
        schema = load_json(file_path)
        if schema is not None:
            logging.info(f"Loaded emotion schema from {file_path}")
            return schema
        logging.error(f"Could not load emotion schema from {file_path}. Using default schema.")

    return EMOTION_SCHEMA


def resolve_class_names(
    num_classes: int,
    preset: Optional[str] = None,
    classes: Optional[Sequence[str]] = None,
    schema: Optional[Dict[str, List[str]]] = None,
) -> List[str]:
    """
    Pick the ordered class names for a run.

    Explicit ``classes`` win over ``preset``; with neither, generic names
    ``class_0 .. class_{K-1}`` are used.

    Args:
        num_classes: Expected number of classes (``model.num_classes``)
        preset: Preset name from the schema
        classes: Explicit class names
        schema: Presets to look ``preset`` up in (defaults to the built-in ones)

    Returns:
        List of class names of length ``num_classes``
    """
    schema = schema or EMOTION_SCHEMA
    if classes:
        names = [str(name) for name in classes]
    elif preset:
        if preset not in schema:
            raise ConfigError(f"Unknown data.preset '{preset}'; choose from {sorted(schema)}")
        names = list(schema[preset])
    else:
        names = [f"class_{index}" for index in range(num_classes)]

    if len(names) != num_classes:
        raise ConfigError(f"{len(names)} class names configured but model.num_classes is {num_classes}")
    if len(set(names)) != len(names):
        raise ConfigError(f"Class names must be unique, got {names}")
    return names
