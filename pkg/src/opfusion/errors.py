class GraphError(ValueError):
    """Malformed model or graph."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ShapeError(GraphError):
    pass


class RewriteError(RuntimeError):
    pass


class CodegenError(RuntimeError):
    pass


class ExecutionError(RuntimeError):
    pass
