class MajorcaError(Exception):
    pass


class UnsupportedArchError(MajorcaError):
    pass


class AsmParseError(MajorcaError):
    """Raised by the assembly subset parser; carries line/column context."""

    def __init__(self, message, line=None, column=None):
        self.line = line
        self.column = column
        where = ""
        if line is not None:
            where = f" (line {line}" + (f", col {column})" if column is not None else ")")
        super().__init__(message + where)


class CorpusError(MajorcaError):
    pass


class CatalogError(MajorcaError):
    pass


class LinearizeError(MajorcaError):
    """A payload slot or fill byte failed restricted-byte screening."""

    def __init__(self, message, frame_index=None, slot=None):
        self.frame_index = frame_index
        self.slot = slot
        super().__init__(message)


class GenerationTimeout(MajorcaError):
    pass
