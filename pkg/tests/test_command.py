import argparse
import pathlib

import pytest

from canonfield.command import ArgumentParser, Command, RunContext
from canonfield.errors import UsageError
from canonfield.schema import ConfigSchema
from canonfield.types import Option, Positional


class DemoConfig(ConfigSchema):
    size: int = 4
    name: str = "demo"
    seed: int = 0


def build(command: Command) -> ArgumentParser:
    parser = ArgumentParser(prog="test")
    subparsers = parser.add_subparsers()
    command.add_to(subparsers, parents=[])
    return parser


def test_basic_command():
    """
    Tests that positionals and options are coerced from strings
    """
    calls = []

    def demo(context: RunContext, count: Positional[int], path: Option[pathlib.Path | None] = None, loud: Option[bool] = False):
        calls.append((count, path, loud))

    command = Command(demo)
    parser = build(command)
    namespace = parser.parse_args(["demo", "3", "--path", "a/b", "--loud"])
    assert command(RunContext(), namespace) == 0
    assert calls == [(3, pathlib.Path("a/b"), True)]
    namespace = parser.parse_args(["demo", "5"])
    command(RunContext(), namespace)
    assert calls[-1] == (5, None, False)


def test_invalid_argument():
    """
    Tests that values pydantic cannot coerce are usage errors
    """

    def demo(context: RunContext, count: Positional[int]):
        pass

    command = Command(demo)
    namespace = build(command).parse_args(["demo", "many"])
    with pytest.raises(UsageError):
        command(RunContext(), namespace)


def test_parser_errors_raise():
    """
    Tests that argparse errors become UsageError instead of exiting
    """

    def demo(context: RunContext, count: Positional[int]):
        pass

    parser = build(Command(demo))
    with pytest.raises(UsageError):
        parser.parse_args(["demo"])
    with pytest.raises(UsageError):
        parser.parse_args(["other"])


def test_config_precedence():
    """
    Tests flag over file over default, and the global seed
    """
    seen = []

    def demo(context: RunContext, config: DemoConfig):
        seen.append(config)

    command = Command(demo)
    parser = build(command)
    context = RunContext(config_values={"size": "8", "name": "from-file"})
    command(context, parser.parse_args(["demo", "--name", "from-flag"]))
    assert (seen[-1].size, seen[-1].name, seen[-1].seed) == (8, "from-flag", 0)
    command(RunContext(seed=9), parser.parse_args(["demo"]))
    assert (seen[-1].size, seen[-1].seed) == (4, 9)


def test_config_errors():
    """
    Tests unknown keys and invalid values in the config
    """

    def demo(context: RunContext, config: DemoConfig):
        pass

    command = Command(demo)
    parser = build(command)
    with pytest.raises(UsageError) as info:
        command(RunContext(config_values={"colour": "red"}), parser.parse_args(["demo"]))
    assert "colour" in info.value.error
    with pytest.raises(UsageError):
        command(RunContext(config_values={"size": "big"}), parser.parse_args(["demo"]))


def test_unsupported_input():
    """
    Tests that parameters the command line cannot express are refused
    """

    def demo(context: RunContext, data: dict[str, int]):
        pass

    with pytest.raises(ValueError):
        Command(demo)


def test_name_and_help():

    def some_thing(context: RunContext):
        """Does some thing.

        More detail.
        """

    command = Command(some_thing)
    assert command.name == "some-thing"
    assert command.help == "Does some thing."
    assert isinstance(build(command), argparse.ArgumentParser)


def test_generic_alias_inputs():
    """
    Tests that parameterized generics are told apart from config classes
    """
    calls = []

    def demo(context: RunContext, counts: list[int] = [1], config: DemoConfig = None):
        calls.append((counts, config.size))

    command = Command(demo)
    assert command.config_name == "config"
    assert command.options == ["counts"]
    command(RunContext(), build(command).parse_args(["demo", "--counts", "2", "3", "--size", "5"]))
    assert calls == [([2, 3], 5)]

    def bad(context: RunContext, table: dict[str, int] = {}):
        pass

    with pytest.raises(ValueError):
        Command(bad)
