"""Exception hierarchy shared by all toolkit modules."""


class VQAError(Exception):
    """Base class for toolkit errors."""


class ShapeError(VQAError, ValueError):
    """Operand shapes are incompatible. ``node`` names the offending op."""

    def __init__(self, message, node=None):
        self.node = node
        super().__init__(f"[{node}] {message}" if node else message)


class StateError(VQAError, RuntimeError):
    pass


class NumericError(VQAError, ArithmeticError):
    """Non-finite values met during optimisation or feature computation."""


class ParseError(VQAError, ValueError):
    """Malformed input file. Carries the byte offset and frame index when known."""

    def __init__(self, message, offset=None, frame_index=None):
        self.offset = offset
        self.frame_index = frame_index
        where = []
        if frame_index is not None:
            where.append(f"frame {frame_index}")
        if offset is not None:
            where.append(f"byte offset {offset}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)


class ConfigError(VQAError, ValueError):
    pass


class DataError(VQAError, ValueError):
    """Dataset content violates an invariant (manifest, split, clip pairing)."""
