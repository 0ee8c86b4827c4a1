class ValidationError(ValueError):
    """Raised when an input violates a documented precondition.

    ``field`` optionally names the offending config path (``pretrain.epochs``)
    so the CLI can report it.
    """

    def __init__(self, message: str, field: str | None = None):
        self.field = field
        self.message = message
        super().__init__(f"{field}: {message}" if field else message)


def require(condition: bool, message: str, field: str | None = None) -> None:
    if not condition:
        raise ValidationError(message, field)
