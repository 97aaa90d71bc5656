"""Exception types raised across the pipeline, grouped by subsystem."""


class MalfuseError(Exception):
    """Base class for all malfuse errors."""


# --- corpus ---------------------------------------------------------------

class MalformedLine(MalfuseError):
    """A .bytes line contains a token that is neither an address, a hex pair, nor ``??``."""

    def __init__(self, sample_id: str, line_no: int, token: str):
        self.sample_id = sample_id
        self.line_no = line_no
        self.token = token
        super().__init__(f"{sample_id}: line {line_no}: bad token {token!r}")


class NoOpcodesFound(MalfuseError):
    """A disassembly listing yielded zero mnemonics (data or stop-list problem)."""


class DuplicateId(MalfuseError):
    """The manifest lists the same sample id twice."""


class UnknownFamily(MalfuseError):
    """A manifest family label is not an integer in 1..9."""


class FamilyTooSmall(MalfuseError):
    """A family with fewer than 2 samples cannot be split across train and test."""


# --- imaging --------------------------------------------------------------

class EmptySegment(MalfuseError):
    """Entropy requested for a zero-length segment."""


class EmptyStream(MalfuseError):
    """Operation requires at least one byte value."""


class StreamTooShort(MalfuseError):
    """Bigram image requires at least two byte values."""


class EmptySeries(MalfuseError):
    """Entropy graph requested for an empty series."""


class EmptyOpcodes(MalfuseError):
    """Simhash matrix requested for an empty opcode sequence."""


class ZeroDimension(MalfuseError):
    """Resize source or target has a non-positive dimension."""


# --- nnet -----------------------------------------------------------------

class ShapeMismatch(MalfuseError):
    """Operand shapes are inconsistent; implicit broadcast is forbidden."""


class ArityMismatch(MalfuseError):
    """Number of fused inputs does not match the fusion spec arity."""


class LabelOutOfRange(MalfuseError):
    """Class label outside [0, K)."""


class NonFiniteGradient(MalfuseError):
    """A gradient check produced NaN or Inf."""


# --- model ----------------------------------------------------------------

class InvalidConfig(MalfuseError):
    """Model or training configuration violates its invariants."""


class MissingModality(MalfuseError):
    """A sample lacks an image required by the model's branches."""


class DivergedLoss(MalfuseError):
    """Training produced a non-finite loss."""

    def __init__(self, epoch: int):
        self.epoch = epoch
        super().__init__(f"non-finite loss at epoch {epoch}")


class UntrainedModel(MalfuseError):
    """Operation requires a trained model."""


class InvalidClass(MalfuseError):
    """Target family outside the model's class range."""


# --- evaluation -----------------------------------------------------------

class EmptyMatrix(MalfuseError):
    """Metrics requested for a confusion matrix with no counts."""


class EmptyInput(MalfuseError):
    """Aggregate statistic requested for an empty collection."""


# --- explain --------------------------------------------------------------

class DimensionMismatch(MalfuseError):
    """Superimposed images differ in size."""


# --- cli ------------------------------------------------------------------

class MissingAsm(MalfuseError):
    """Simhash rendering requested for samples without a disassembly file."""
