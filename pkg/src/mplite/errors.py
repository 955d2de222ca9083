"""Exception hierarchy.  The CLI maps ``ValidationError`` to exit code 1."""


class MPLiteError(Exception):
    pass


class ValidationError(MPLiteError, ValueError):
    """Bad input: config, data files, or mismatched artifacts."""


class IngestError(ValidationError):
    pass


class FingerprintError(ValidationError):
    pass


class CheckpointError(ValidationError):
    pass


class TrainingDivergedError(MPLiteError, RuntimeError):
    def __init__(self, epoch: int, loss: float):
        super().__init__(f"non-finite loss {loss} at epoch {epoch}")
        self.epoch = epoch
        self.loss = loss
