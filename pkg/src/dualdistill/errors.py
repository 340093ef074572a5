class WorkbenchError(Exception):
    """Error carrying a stable machine-readable ``code``.

    Codes are short kebab-case strings such as ``"empty-corpus"`` or
    ``"shape-mismatch"``; the message is free text for humans.
    """

    def __init__(self, code: str, message: str = ""):
        self.code = code
        super().__init__(f"{code}: {message}" if message else code)


class ConfigError(WorkbenchError):
    pass


class DivergenceError(WorkbenchError):
    def __init__(self, message: str = ""):
        super().__init__("diverged", message)
