"""Exception types shared across the toolkit.

Each error carries a short machine-readable ``code`` so the CLI can map it to
an exit status without string matching.
"""


class CsmaMprError(Exception):
    code = "ERROR"


class ConfigError(CsmaMprError):
    code = "CONFIG_INVALID"


class NonUnimodalError(CsmaMprError):
    code = "NON_UNIMODAL"


class NoConvergenceError(CsmaMprError):
    code = "NO_CONVERGENCE"


class UnstableInputError(CsmaMprError):
    code = "UNSTABLE_INPUT"


class ZeroArrivalError(CsmaMprError):
    code = "ZERO_ARRIVAL"


class InfeasibleError(CsmaMprError):
    code = "INFEASIBLE"


class SearchExhaustedError(CsmaMprError):
    code = "SEARCH_EXHAUSTED"


class CholeskyError(CsmaMprError):
    code = "CHOLESKY_FAIL"


class TooManyUsersError(CsmaMprError):
    code = "TOO_MANY_USERS"


class StateExplosionError(CsmaMprError):
    code = "STATE_EXPLOSION"


class ReducibleError(CsmaMprError):
    code = "REDUCIBLE"
