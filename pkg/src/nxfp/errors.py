'''
Exception hierarchy. Every domain error is a ValueError so callers that only know
about ValueError keep working.
'''


class NxfpError(ValueError):
    pass


class ConfigError(NxfpError):
    '''Invalid format spec or QuantConfig field'''


class NumericInputError(NxfpError):
    '''
    NaN/Inf, zero-length input, or an exponent outside the storable range

    PARAMS
    ------
    msg (str): diagnostic
    **block (int): index of the offending block, when known
    '''
    def __init__(self, msg, block=None):
        if block is not None:
            msg = f'block {block}: {msg}'
        super().__init__(msg)
        self.block = block


class ContainerError(NxfpError):
    pass


class BadMagicError(ContainerError):
    pass


class UnsupportedVersionError(ContainerError):
    pass


class TruncatedStreamError(ContainerError):
    pass


class LengthMismatchError(ContainerError):
    pass


class HeaderError(ContainerError):
    pass


class IngestError(NxfpError):
    pass


class MalformedHeaderError(IngestError):
    pass


class DtypeMismatchError(IngestError):
    pass


class TruncatedDataError(IngestError):
    pass


class UnknownTensorError(IngestError):
    pass
