"""Exception types raised across the pipeline."""


class EvreconError(Exception):
    """Base class for all pipeline errors."""


# event ingestion
class MalformedLine(EvreconError):
    pass


class CoordinateOutOfRange(EvreconError):
    pass


class NonMonotoneTimestamp(EvreconError):
    pass


# simulation
class DegenerateTrajectory(EvreconError):
    pass


# intensity reconstruction
class OutOfOrderWindow(EvreconError):
    pass


class MissingFile(EvreconError):
    pass


class NonMonotoneManifest(EvreconError):
    pass


# image / file io
class UnsupportedImageFormat(EvreconError):
    pass


class CorruptHeader(EvreconError):
    pass


class IoFailure(EvreconError):
    pass


# correspondence search
class ImageTooSmall(EvreconError):
    pass


class DegenerateConfiguration(EvreconError):
    pass


# reconstruction
class NoValidInitialPair(EvreconError):
    pass


class CheiralityAmbiguity(EvreconError):
    pass


class NoRegistrableImage(EvreconError):
    pass


class NumericalFailure(EvreconError):
    pass


# dense stage
class NoUsableNeighbors(EvreconError):
    pass


# pipeline
class ConfigError(EvreconError):
    pass


class StageFailure(EvreconError):
    def __init__(self, stage, cause):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause
