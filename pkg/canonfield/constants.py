import enum


class Split(str, enum.Enum):
    train = "train"
    test = "test"


class Activation(str, enum.Enum):
    relu = "relu"
    leaky_relu = "leaky_relu"


class Optimizer(str, enum.Enum):
    sgd = "sgd"
    momentum = "momentum"


class ExitCode(enum.IntEnum):
    ok = 0
    usage = 1
    data = 2
