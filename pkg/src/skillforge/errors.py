"""Exception types raised across the runtime."""


class SkillforgeError(Exception):
    """Base class."""


class IllegalTransition(SkillforgeError):
    pass


class InvalidCandidate(SkillforgeError):
    pass


class DuplicateVersion(SkillforgeError):
    pass


class UnknownSkill(SkillforgeError, KeyError):
    pass


class IllegalState(SkillforgeError):
    pass


class CorruptRepository(SkillforgeError):
    pass


class InvalidWeights(SkillforgeError, ValueError):
    pass


class TransportFailure(SkillforgeError):
    pass


class TapeExhausted(SkillforgeError):
    pass


class MalformedRules(SkillforgeError, ValueError):
    pass


class PreconditionError(SkillforgeError, ValueError):
    pass
