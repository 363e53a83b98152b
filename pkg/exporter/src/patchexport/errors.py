"""Exporter exception types."""


class ExportError(Exception):
    pass


class BackboneUnavailable(ExportError):
    """The requested backbone profile needs pretrained weights that are not
    present."""


class UndecodableImage(ExportError):
    pass


class EmptyClassList(ExportError):
    pass


class BadTemplate(ExportError):
    """The prompt template must contain the {CLASS} placeholder exactly once."""


class DuplicateEntry(ExportError):
    pass
