class ConfigError(ValueError):
    """Invalid network, training, or generator configuration."""


class InputError(ValueError):
    """Malformed user-supplied data (targets, manifests, image files)."""


class LoadError(InputError):
    """A manifest, image, or checkpoint could not be read."""

    def __init__(self, message: str, path=None, line: int | None = None):
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)
        self.path = path
        self.line = line


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss or gradient."""

    def __init__(self, message: str, param: str | None = None):
        super().__init__(message)
        self.param = param
