class ContractViolation(ValueError):
    """Raised when a caller breaks a documented precondition."""


def require(cond: bool, msg: str) -> None:
    if not cond:
        raise ContractViolation(msg)
