"""Privacy-preserving federated learning with decentralized functional encryption.

Modules:

* :mod:`~detrust_fl.group` - safe-prime group arithmetic, hash-to-group, bounded dlog
* :mod:`~detrust_fl.dmcfe` - decentralized multi-client inner-product encryption
* :mod:`~detrust_fl.encoding` - fixed-point encoding of model parameters and weights
* :mod:`~detrust_fl.participation` - participation matrices and their safety checks
* :mod:`~detrust_fl.dtc` - trust consensus over the participation matrix
* :mod:`~detrust_fl.engine` - end-to-end training rounds
* :mod:`~detrust_fl.transport` - in-process and TCP message passing with metering
* :mod:`~detrust_fl.adversary` - malicious-aggregator attack harness
"""
from .config import DatasetSpec, RunConfig
from .dmcfe import (
    Ciphertext,
    FunctionalDecryptionKey,
    PartialDecryptionKey,
    PartySecretKey,
    PublicParams,
    decrypt,
    encrypt,
    key_der_comb,
    key_der_share,
    keygen_ceremony,
    setup,
)
from .dp import DpConfig, dp_smc_noise
from .encoding import EncodingConfig, decode, encode, integerize_weights
from .engine import Federation, FederationResult, RoundRecord, plaintext_reference, run_training
from .errors import *  # noqa: F401,F403
from .group import GroupParams, dlog_bounded, hash_to_group, setup_group
from .participation import (
    InspectionVerdict,
    ParticipationMatrix,
    TrustConfig,
    check_bp,
    disaggregation_rank_test,
    party_inspect,
    propose_matrix,
)
from .transport import InteractionMeter, SimTransport, TcpTransport, expected_interactions

__version__ = "0.1.0"
