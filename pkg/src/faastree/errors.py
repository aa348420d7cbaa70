"""Exception types shared across the package.

Every exception carries a stable ``code`` string so it can be mapped onto
wire error codes or CLI exit statuses without string matching.
"""


class FaasError(Exception):
    code = "ERROR"


class ProtocolError(FaasError):
    code = "PROTOCOL_ERROR"


class EncodeTooLarge(ProtocolError):
    code = "ENCODE_TOO_LARGE"


class DecodeMalformed(ProtocolError):
    code = "DECODE_MALFORMED"


class TransportError(FaasError):
    code = "TRANSPORT_ERROR"


class NotFound(FaasError, KeyError):
    code = "NOT_FOUND"

    def __str__(self) -> str:
        # KeyError quotes its argument; keep the plain message.
        return Exception.__str__(self)


class IntegrityError(FaasError):
    code = "INTEGRITY_ERROR"


class StoreError(FaasError):
    code = "STORE_ERROR"


class InstanceStartFailed(FaasError):
    code = "INSTANCE_START_FAILED"


class FunctionError(FaasError):
    code = "FUNCTION_ERROR"


class DeadlineExceeded(FaasError):
    code = "DEADLINE_EXCEEDED"


class InsufficientData(FaasError, ValueError):
    code = "FIT_INSUFFICIENT_DATA"

    def __init__(self, function: str, message: str) -> None:
        super().__init__(f"{function}: {message}")
        self.function = function


class ConfigInvalid(FaasError, ValueError):
    code = "CONFIG_INVALID"


class TargetUnreachable(TransportError):
    code = "TARGET_UNREACHABLE"
