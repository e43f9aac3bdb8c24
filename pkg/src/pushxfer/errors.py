"""Exception types raised across the package."""


class PushXferError(Exception):
    """Base class; ``code`` is used in the CLI's JSON error payload."""

    code = "error"


class TooFewPoints(PushXferError, ValueError):
    code = "too_few_points"


class DegenerateNeighborhood(PushXferError, ValueError):
    code = "degenerate_neighborhood"


class DegenerateCloud(PushXferError, ValueError):
    code = "degenerate_cloud"


class NonPositiveBandwidth(PushXferError, ValueError):
    code = "non_positive_bandwidth"


class NonUnitQuaternion(PushXferError, ValueError):
    code = "non_unit_quaternion"


class KindMismatch(PushXferError, TypeError):
    code = "kind_mismatch"


class NonFiniteScore(PushXferError, ValueError):
    code = "non_finite_score"


class NoContact(PushXferError, ValueError):
    code = "no_contact"


class EmptyModel(PushXferError, ValueError):
    code = "empty_model"


class EmptyFeatures(PushXferError, ValueError):
    code = "empty_features"


class LostContact(PushXferError, RuntimeError):
    code = "lost_contact"


class UnsupportedCondition(PushXferError, ValueError):
    """Contact condition unlike every training kernel (the expert vetoes)."""

    code = "unsupported_condition"


class AllVetoed(PushXferError, RuntimeError):
    code = "all_vetoed"


class UnknownShape(PushXferError, ValueError):
    code = "unknown_shape"


class NoContactDuringPush(PushXferError, RuntimeError):
    code = "no_contact_during_push"


class InfeasibleQuery(PushXferError, RuntimeError):
    code = "infeasible_query"


class ConfigError(PushXferError, ValueError):
    code = "config_error"
