"""Exception hierarchy shared by every module."""


class InvmarkError(Exception):
    pass


class FormatError(InvmarkError):
    """Checkpoint header is not valid JSON or does not follow the layout."""


class CorruptionError(InvmarkError):
    """Data offsets overlap, leave gaps or point outside the data region."""


class UnsupportedDTypeError(InvmarkError):
    pass


class WriteError(InvmarkError):
    pass


class ConfigurationError(InvmarkError):
    """Architecture, site list or key is inconsistent."""


class EngineError(InvmarkError):
    """A transform does not fit the tensors it is applied to."""


class CodecError(InvmarkError):
    pass


class MatchError(InvmarkError):
    pass
