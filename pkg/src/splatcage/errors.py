"""Exception types shared across the engine."""


class EngineError(Exception):
    """Base class for all engine errors."""


# --- splat model / PLY ---

class MissingField(EngineError):
    def __init__(self, name):
        super().__init__(f"required PLY property missing: {name}")
        self.name = name


class MalformedHeader(EngineError):
    pass


class EmptyCloud(EngineError):
    pass


class NormalizationFailure(EngineError):
    pass


class NotSPD(EngineError):
    def __init__(self, msg="matrix is not symmetric positive definite", index=None):
        super().__init__(msg if index is None else f"{msg} (splat {index})")
        self.index = index


# --- cage generation ---

class DegenerateInput(EngineError):
    pass


class ResolutionOutOfRange(EngineError):
    pass


class EmptyLevelSet(EngineError):
    pass


class NonManifoldOutput(EngineError):
    pass


# --- coordinates ---

class PointOutsideCage(EngineError):
    def __init__(self, index):
        super().__init__(f"point {index} lies outside the cage")
        self.index = index


class NearBoundary(EngineError):
    def __init__(self, index):
        super().__init__(f"point {index} is too close to the cage surface")
        self.index = index


class ConnectivityMismatch(EngineError):
    pass


# --- jacobian field / solve ---

class DegenerateRotation(EngineError):
    pass


class SingularSystem(EngineError):
    pass


class SolveFailure(EngineError):
    pass


# --- rendering / optimization ---

class ViewInvalid(EngineError):
    pass


class DimensionMismatch(EngineError):
    pass


class NaNDetected(EngineError):
    def __init__(self, stage, detail=""):
        super().__init__(f"non-finite values detected at stage '{stage}'" + (f": {detail}" if detail else ""))
        self.stage = stage


class Cancelled(EngineError):
    pass


# --- guidance clients ---

class ServiceUnavailable(EngineError):
    pass


class BadResponse(EngineError):
    pass


# --- animation ---

class MismatchedCages(EngineError):
    pass


class InsufficientKeyframes(EngineError):
    pass
