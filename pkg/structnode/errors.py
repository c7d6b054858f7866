from typing import Optional


class StructNodeError(Exception):
    exit_code = 1


class ConfigurationError(StructNodeError, ValueError):
    exit_code = 2


class UsageError(StructNodeError):
    exit_code = 2


class MissingArtifactError(StructNodeError):
    exit_code = 3


class PreconditionError(StructNodeError):
    exit_code = 4


class OutOfDomainError(PreconditionError):
    pass


class TrainingError(StructNodeError):
    """Non-finite loss or gradient during training"""

    exit_code = 5

    def __init__(
        self,
        message: str,
        epoch: Optional[int] = None,
        batch: Optional[int] = None,
        parameter: Optional[str] = None,
    ):
        self.epoch = epoch
        self.batch = batch
        self.parameter = parameter
        where = []
        if epoch is not None:
            where.append(f"epoch={epoch}")
        if batch is not None:
            where.append(f"batch={batch}")
        if parameter is not None:
            where.append(f"parameter={parameter}")
        suffix = f" ({', '.join(where)})" if where else ""
        super().__init__(message + suffix)


class NumericalError(StructNodeError):
    exit_code = 6


class IntegrationError(NumericalError):
    def __init__(self, message: str, t: float):
        self.t = t
        super().__init__(f"{message} at t={t:.6g}")


class FilterDivergenceError(NumericalError):
    pass


class SingularSystemError(NumericalError):
    pass
