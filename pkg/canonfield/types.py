import enum
import pathlib
from types import NoneType, UnionType
from typing import (  # type: ignore[attr-defined]
    Annotated,
    Any,
    Literal,
    Optional,
    TypeVar,
    Union,
    _AnnotatedAlias,
    _GenericAlias,
    get_args,
    get_origin,
)

import numpy as np

T = TypeVar("T")


class FloatArray(np.ndarray):
    """
    A pydantic field type: any array-like, stored as a read-only float64
    copy.
    """

    @classmethod
    def __get_validators__(cls):
        yield cls.validate

    @classmethod
    def validate(cls, value: Any) -> np.ndarray:
        try:
            array = np.array(value, dtype=np.float64)
        except (TypeError, ValueError) as error:
            raise ValueError(f"not convertible to a float array: {error}")
        array.flags.writeable = False
        return array


class IndexArray(np.ndarray):
    """
    A pydantic field type: integer index arrays, stored read-only.
    """

    @classmethod
    def __get_validators__(cls):
        yield cls.validate

    @classmethod
    def validate(cls, value: Any) -> np.ndarray:
        array = np.array(value)
        if array.size and not np.issubdtype(array.dtype, np.integer):
            raise ValueError("index arrays must hold integers")
        array = array.astype(np.int64)
        array.flags.writeable = False
        return array


def split_list(value: Any) -> Any:
    """
    Comma-separated strings (from key=value configs or flags) become lists;
    anything else passes through for pydantic to check.
    """
    if isinstance(value, str):
        return [part.strip() for part in value.split(",") if part.strip()]
    return value


class PositionalType:
    """
    A CLI input given positionally rather than as a --flag.
    """


class OptionType:
    """
    A CLI input given as a --flag (the default for anything with a default).
    """


Positional = Annotated[T, PositionalType]
Option = Annotated[T, OptionType]


def is_optional(annotation) -> tuple[bool, Any]:
    """
    If an annotation is Optional or | None, returns (True, internal type).
    Returns (False, annotation) otherwise.
    """
    if (isinstance(annotation, _GenericAlias) and annotation.__origin__ is Union) or (
        isinstance(annotation, UnionType)
    ):
        args = get_args(annotation)
        if len(args) > 2:
            return False, annotation
        if args[0] is NoneType:
            return True, args[1]
        if args[1] is NoneType:
            return True, args[0]
        return False, annotation
    return False, annotation


def extract_signifier(annotation) -> tuple[Any, Any]:
    """
    Given a type annotation, looks to see if it can find an input source
    signifier (Positional, Option)

    If it can, returns (signifier, annotation_without_signifier)
    If not, returns (None, annotation)
    """
    our_generics = {PositionalType, OptionType}
    optional, internal_annotation = is_optional(annotation)
    if isinstance(internal_annotation, _AnnotatedAlias):
        args = get_args(internal_annotation)
        for arg in args[1:]:
            if arg in our_generics:
                if optional:
                    return (arg, Optional[args[0]])
                else:
                    return (arg, args[0])
    return None, annotation


def is_collection(annotation) -> bool:
    """
    Returns if the (signifier-free, non-optional) annotation is a list type
    """
    _, inner = is_optional(annotation)
    return inner is list or get_origin(inner) is list


def is_flag(annotation) -> bool:
    _, inner = is_optional(annotation)
    return inner is bool


def acceptable_input(annotation) -> bool:
    """
    Returns if this annotation is something we can parse off a command line
    """
    _, inner_type = extract_signifier(annotation)
    if inner_type in [str, int, float, bool, list, pathlib.Path, Any, type(None)]:
        return True
    if isinstance(inner_type, type) and get_origin(inner_type) is None and issubclass(inner_type, enum.Enum):
        return True
    origin = get_origin(inner_type)
    if origin == Literal:
        return True
    if origin in [Union, UnionType, list]:
        return all(acceptable_input(a) for a in get_args(inner_type))
    return False
