from .lopat import Literal, Rule, RuleBase, parse_literal, parse_rule, parse_rules
from .resolution import FactBase, Limits, Query, Resolution, cp_resolve, forward_close, resolve
from .credentials import KeyPair, PropertyCertificate, TrustPolicy, parse_certificate, parse_policy
from .authority import TrustedAuthority, ReferenceStore
from .policyrepo import Actor, PolicyRepository
from .trustmgr import TrustManager, TrustStatus, SliceVerdict
from .nfvsim import Simulator, run_opd_benchmark

import logging

# silent unless the application configures logging
logging.getLogger("tmano").addHandler(logging.NullHandler())

__all__ = [
    # the logic
    "Literal",
    "Rule",
    "RuleBase",
    "parse_literal",
    "parse_rule",
    "parse_rules",
    "FactBase",
    "Limits",
    "Query",
    "Resolution",
    "resolve",
    "cp_resolve",
    "forward_close",

    # credentials
    "KeyPair",
    "PropertyCertificate",
    "TrustPolicy",
    "parse_certificate",
    "parse_policy",

    # the actors
    "TrustedAuthority",
    "ReferenceStore",
    "Actor",
    "PolicyRepository",
    "TrustManager",
    "TrustStatus",
    "SliceVerdict",

    # testbed
    "Simulator",
    "run_opd_benchmark",
]
