"""Exception types raised across the harness."""


class XmbenchError(Exception):
    """Base class for every error the harness raises on purpose."""


class DatasetError(XmbenchError, ValueError):
    pass


class ProtocolError(XmbenchError, ValueError):
    pass


class LearnerError(XmbenchError, ValueError):
    pass


class RetrievalError(XmbenchError, ValueError):
    pass


class MetricError(XmbenchError, ValueError):
    pass


class ConfigError(XmbenchError, ValueError):
    pass
