"""Exception types shared across the package."""


class ShiftGridError(Exception):
    """Base class for all package errors."""


class MalformedRow(ShiftGridError):
    def __init__(self, line_no, detail=""):
        self.line_no = line_no
        super().__init__(f"malformed row at line {line_no}: {detail}")


class OutOfRange(ShiftGridError):
    def __init__(self, line_no, detail=""):
        self.line_no = line_no
        super().__init__(f"out-of-range value at line {line_no}: {detail}")


class NoPreEventData(ShiftGridError):
    def __init__(self, user_id):
        self.user_id = user_id
        super().__init__(f"user {user_id} has no pre-event records")


class CropTooLarge(ShiftGridError):
    pass


class ShapeMismatch(ShiftGridError):
    pass


class DegenerateBatch(ShiftGridError):
    pass


class InvalidConfig(ShiftGridError):
    pass


class NonFiniteLoss(ShiftGridError):
    def __init__(self, step_index):
        self.step_index = step_index
        super().__init__(f"non-finite loss at step {step_index}")


class ZeroVector(ShiftGridError):
    pass
