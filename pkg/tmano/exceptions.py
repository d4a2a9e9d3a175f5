class TmanoError(Exception):
    """Base class for all tmano exceptions."""

    code: str = "error"


class LopatSyntaxError(TmanoError):
    """Raised when a LOPAT statement cannot be lexed or parsed."""

    code = "lopat_syntax"

    def __init__(self, message: str, line: int = 0, column: int = 0) -> None:
        self.line = line
        self.column = column
        super().__init__(f"{message} (line {line}, column {column})")


class RuleValidationError(TmanoError):
    """Raised when a rule violates the CP/NSP well-formedness clauses."""

    code = "invalid_rule"

    def __init__(self, message: str, clause: str = "") -> None:
        self.clause = clause
        super().__init__(message)


class SortError(TmanoError):
    """Raised when a term is bound or used against its declared sort."""

    code = "sort_error"


class CredentialError(TmanoError):
    """Base class for certificate, policy and digest report failures."""

    code = "credential"


class SchemaError(CredentialError):
    """Raised when a document deviates from the certificate/policy schema."""

    code = "schema_violation"

    def __init__(self, message: str, path: str = "") -> None:
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


class SignatureError(CredentialError):
    """Raised on signing key problems (algorithm mismatch, undecodable key)."""

    code = "bad_signature"


class CertificateExpiredError(CredentialError):
    code = "expired"


class DigestFormatError(CredentialError):
    """Raised for malformed digests or duplicate component identifiers."""

    code = "bad_digest"


class PropertyNameError(CredentialError):
    code = "bad_property"


class AttestationError(TmanoError):
    """Base class for Trusted Authority failures."""

    code = "attestation"


class MissingReferenceError(AttestationError):
    code = "missing_reference"


class ReferenceConflictError(AttestationError):
    code = "reference_conflict"


class UnsupportedAlgorithmError(AttestationError):
    code = "unsupported_algorithm"


class UnknownSubjectError(AttestationError):
    code = "unknown_subject"


class PolicyStoreError(TmanoError):
    code = "policy_store"


class AuthorizationError(PolicyStoreError):
    """Raised when a non-admin actor tries to mutate the policy store."""

    code = "not_admin"


class UnknownPolicyError(PolicyStoreError):
    code = "unknown_policy"


class SimulationError(TmanoError):
    code = "simulation"


class UnknownSliceError(SimulationError):
    code = "unknown_slice"


class GateFailure(SimulationError):
    """Raised when the pre-deployment gate rejects one or more members."""

    code = "gate_failed"

    def __init__(self, message: str, failing: list[str] | None = None) -> None:
        self.failing = list(failing or [])
        super().__init__(message)


class DuplicateSubscriptionError(SimulationError):
    code = "duplicate_subscription"


class WorkspaceLockedError(TmanoError):
    code = "locked"
