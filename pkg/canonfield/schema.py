from typing import Any

from pydantic.fields import Field  # noqa
from pydantic.main import BaseModel


class Schema(BaseModel):
    """
    Base for every domain type and config. Instances are immutable once
    validated; array fields are stored as read-only copies.
    """

    class Config:
        allow_mutation = False
        arbitrary_types_allowed = True
        extra = "forbid"
        validate_assignment = True

    def replace(self, **changes: Any):
        """
        Returns a validated copy with some fields changed (pydantic's own
        copy(update=...) skips validation).
        """
        values = {name: getattr(self, name) for name in self.__fields__}
        values.update(changes)
        return type(self)(**values)


class ConfigSchema(Schema):
    """
    Base for user-facing configs: tolerant of string input from key=value
    files and CLI flags.
    """

    class Config:
        allow_mutation = False
        extra = "forbid"
        anystr_strip_whitespace = True
        use_enum_values = False

    def recorded(self) -> dict[str, str]:
        """
        Flat key=value view for embedding into reports.
        """
        result = {}
        for name, value in self.dict().items():
            if isinstance(value, (list, tuple)):
                value = ",".join(str(item) for item in value)
            elif hasattr(value, "value"):
                value = value.value
            result[name] = str(value)
        return result
