"""Exception hierarchy shared by every layer of the package."""


class DetrustError(Exception):
    """Base class for all protocol errors."""


class PreconditionError(DetrustError, ValueError):
    pass


# group arithmetic

class SetupError(DetrustError):
    pass


class DlogNotFound(DetrustError):
    """No exponent in the searched range maps to the target.

    During decryption this means the ciphertexts, label and key did not
    belong together (replay, label mismatch, forged fragments) or the
    aggregate left the decodable range.
    """


# cryptosystem

class PayloadOutOfRange(PreconditionError):
    pass


class WeightVectorLengthMismatch(PreconditionError):
    pass


class MissingFragment(PreconditionError):
    def __init__(self, missing):
        self.missing = sorted(missing)
        super().__init__(f"missing key fragments from parties {self.missing}")


class MixedFusionTag(PreconditionError):
    pass


class LabelMismatch(PreconditionError):
    pass


class ParticipantMismatch(PreconditionError):
    pass


# encoding / participation

class ZeroSupport(PreconditionError):
    pass


class InfeasibleConstraints(PreconditionError):
    pass


# consensus

class ConsensusTimeout(DetrustError):
    pass


class PartyRefusal(DetrustError):
    def __init__(self, parties, reason=""):
        self.parties = sorted(parties)
        msg = f"irreconcilable parties {self.parties}"
        if reason:
            msg += f": {reason}"
        super().__init__(msg)


class RefusedMatrix(DetrustError):
    pass


# training

class QuorumFailure(DetrustError):
    def __init__(self, round_index, missing, unexpected=()):
        self.round_index = round_index
        self.missing = sorted(missing)
        self.unexpected = sorted(unexpected)
        super().__init__(
            f"round {round_index}: missing replies from {self.missing}"
            + (f", unexpected replies from {self.unexpected}" if self.unexpected else "")
        )


class DecryptionFailure(DetrustError):
    pass


class DimensionMismatch(PreconditionError):
    pass


# transport

class ProtocolError(DetrustError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"{message}: {line!r}"
        super().__init__(message)


class PeerDisconnected(DetrustError):
    pass
