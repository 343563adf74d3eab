"""Exception types shared across the package."""


class CadexError(Exception):
    pass


class DimensionError(CadexError, ValueError):
    pass


class ContractError(CadexError, ValueError):
    pass


class NumericError(CadexError, ArithmeticError):
    pass


class ConfigError(CadexError, ValueError):
    pass


class InputError(CadexError, ValueError):
    pass


class ParseError(CadexError, ValueError):
    """Malformed file on disk; message names the file and the field."""

    def __init__(self, path, field, detail=""):
        self.path = str(path)
        self.field = field
        msg = f"{self.path}: bad or missing field {field!r}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class NoSurfaceError(CadexError):
    pass


class DivergenceError(CadexError):
    def __init__(self, msg, last_finite=None):
        super().__init__(msg)
        self.last_finite = last_finite
