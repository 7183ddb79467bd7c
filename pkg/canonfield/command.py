import argparse
import inspect
import logging
import pathlib
from collections.abc import Callable
from typing import Any, Optional, get_origin, get_type_hints

from pydantic import ValidationError, create_model

from .errors import UsageError
from .schema import ConfigSchema, Schema
from .types import (
    PositionalType,
    acceptable_input,
    extract_signifier,
    is_collection,
    is_flag,
)

logger = logging.getLogger(__name__)

#: Config fields that are set through global flags instead of per-command ones
GLOBAL_FIELDS = {"seed"}


class ArgumentParser(argparse.ArgumentParser):
    """
    Raises UsageError instead of exiting, so main() decides the exit code.
    """

    def error(self, message: str):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage().strip()}")


class RunContext(Schema):
    """
    The global flags, shared by every subcommand.
    """

    config_values: dict[str, str] = {}
    seed: int | None = None
    jobs: int = 1
    out: pathlib.Path = pathlib.Path(".")
    verbose: bool = False


class Command:
    """
    A subcommand 'wrapper' object built from a plain function's annotations.

    The first argument of the function receives the RunContext. A parameter
    annotated with a ConfigSchema subclass is assembled from the config
    file and per-field flags; every other parameter becomes a positional
    or --option argument, coerced through a pydantic model.
    """

    def __init__(
        self,
        function: Callable,
        name: str | None = None,
        input_types: dict[str, Any] | None = None,
    ):
        self.function = function
        self.name = name or function.__name__.replace("_", "-")
        self.help = (function.__doc__ or "").strip().split("\n")[0]
        self.input_types = input_types
        if self.input_types is None:
            self.input_types = get_type_hints(function, include_extras=True)
            self.input_types.pop("return", None)
        self.compile()

    def compile(self):
        self.config_name: str | None = None
        self.config_type: type[ConfigSchema] | None = None
        self.positionals: list[str] = []
        self.options: list[str] = []
        self.defaults: dict[str, Any] = {}
        pydantic_model_dict = {}
        defaults = _defaults(self.function)
        for name, input_type in self.input_types.items():
            if input_type is RunContext:
                continue
            if _is_config_type(input_type):
                if self.config_type is not None:
                    raise ValueError(f"Command {self.name} takes more than one config")
                self.config_name, self.config_type = name, input_type
                continue
            if not acceptable_input(input_type):
                # Strip away any signifiers for the error
                _, inner_type = extract_signifier(input_type)
                raise ValueError(f"Input argument {name} has an unsupported type {inner_type}")
            signifier, pydantic_type = extract_signifier(input_type)
            if signifier is PositionalType:
                self.positionals.append(name)
            else:
                self.options.append(name)
            self.defaults[name] = defaults.get(name, ...)
            pydantic_model_dict[name] = (Optional[pydantic_type], self.defaults[name])
        try:
            self.input_model = create_model(f"{self.name}_input", **pydantic_model_dict)
        except RuntimeError:
            raise ValueError(f"One or more inputs on command {self.name} have a bad configuration")

    def add_to(self, subparsers, parents: list[argparse.ArgumentParser]) -> argparse.ArgumentParser:
        parser = subparsers.add_parser(self.name, help=self.help, description=self.help, parents=parents)
        for name in self.positionals:
            required = self.defaults[name] is ...
            parser.add_argument(name, nargs=None if required else "?", default=None)
        for name in self.options:
            flag = "--" + name.replace("_", "-")
            input_type = self.input_types[name]
            _, inner = extract_signifier(input_type)
            if is_flag(inner):
                parser.add_argument(flag, dest=name, action="store_true", default=None)
            elif is_collection(inner):
                parser.add_argument(flag, dest=name, nargs="+", default=None)
            else:
                parser.add_argument(flag, dest=name, default=None)
        if self.config_type is not None:
            group = parser.add_argument_group(f"{self.config_type.__name__} fields")
            for name, field in self.config_type.__fields__.items():
                if name in GLOBAL_FIELDS or name in self.input_types:
                    continue
                group.add_argument(
                    "--" + name.replace("_", "-"),
                    dest=f"config__{name}",
                    metavar=name.upper(),
                    default=None,
                    help=f"default {field.default!r}",
                )
        parser.set_defaults(command=self)
        return parser

    def build_config(self, context: RunContext, namespace: argparse.Namespace) -> ConfigSchema:
        """
        Precedence: per-field flag, then config file, then the default.
        """
        known = self.config_type.__fields__
        unknown = sorted(set(context.config_values) - set(known))
        if unknown:
            raise UsageError(f"unknown config keys for {self.name}: {', '.join(unknown)}")
        values: dict[str, Any] = dict(context.config_values)
        for name in known:
            flag_value = getattr(namespace, f"config__{name}", None)
            if flag_value is not None:
                values[name] = flag_value
        if context.seed is not None and "seed" in known:
            values["seed"] = context.seed
        try:
            return self.config_type(**values)
        except ValidationError as error:
            raise UsageError(f"invalid {self.name} config: {error}")

    def __call__(self, context: RunContext, namespace: argparse.Namespace) -> int:
        """
        Entrypoint when this is called as a subcommand.
        """
        values = {
            name: getattr(namespace, name)
            for name in self.positionals + self.options
            if getattr(namespace, name, None) is not None
        }
        # Give that to the Pydantic model to make it handle stuff
        try:
            model_instance = self.input_model(**values)
        except ValidationError as error:
            raise UsageError(f"invalid arguments for {self.name}: {error}")
        kwargs = {name: getattr(model_instance, name) for name in model_instance.__fields__}
        if self.config_type is not None:
            kwargs[self.config_name] = self.build_config(context, namespace)
        logger.debug("Running %s with %s", self.name, kwargs)
        result = self.function(context, **kwargs)
        return 0 if result is None else int(result)


def _is_config_type(input_type: Any) -> bool:
    # Parameterized generics such as list[int] pass isinstance(..., type) on 3.10
    return inspect.isclass(input_type) and get_origin(input_type) is None and issubclass(input_type, ConfigSchema)


def _defaults(function: Callable) -> dict[str, Any]:
    return {
        name: parameter.default
        for name, parameter in inspect.signature(function).parameters.items()
        if parameter.default is not inspect.Parameter.empty
    }


command = Command
