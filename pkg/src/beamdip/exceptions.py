"""Exception hierarchy shared by all beamdip modules."""


class BeamDIPError(Exception):
    """Base class for every error raised by this package."""


class MalformedFile(BeamDIPError, ValueError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ParseError(BeamDIPError, ValueError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class TooSmall(BeamDIPError, ValueError):
    pass


class BadWindow(BeamDIPError, ValueError):
    pass


class BadSigma(BeamDIPError, ValueError):
    pass


class ZeroProfile(BeamDIPError, ValueError):
    pass


class BadParams(BeamDIPError, ValueError):
    pass


class NeedsShift(BeamDIPError, ValueError):
    pass


class DegenerateSamples(BeamDIPError, ValueError):
    pass


class EmptyBeam(BeamDIPError, ValueError):
    pass


class DegenerateEmittance(BeamDIPError, ValueError):
    pass


class SingularComponent(BeamDIPError, ArithmeticError):
    pass


class ShapeError(BeamDIPError, ValueError):
    pass


class EmptyMask(BeamDIPError, ValueError):
    pass


class BadFraction(BeamDIPError, ValueError):
    pass


class BadK(BeamDIPError, ValueError):
    pass


class DegenerateInput(BeamDIPError, ValueError):
    pass


class DivergedTraining(BeamDIPError, ArithmeticError):
    def __init__(self, iteration, value):
        self.iteration = iteration
        self.value = value
        super().__init__(f"non-finite loss {value!r} at iteration {iteration}")


class ConfigError(BeamDIPError, ValueError):
    pass
