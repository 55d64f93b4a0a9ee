"""
Client role: answers a ComputeRequest with the local W_p^p and a batch of
permuted statistics. Only scalars leave the client.
"""
import logging

from app.errors import MalformedRequestError, UnsupportedOrderError
from app.protocol.messages import ComputeRequest, LocalResult, PermutedBatchMsg, decode, encode
from app.services.kernel_distance import SOLVERS, client_statistic
from app.services.permtest import local_permuted_stats

logger = logging.getLogger(__name__)

SUPPORTED_ORDERS = (1.0, 2.0)


def client_handle(msg, local, rng=None):
    """
    Replies [LocalResult, PermutedBatchMsg] to a ComputeRequest addressed to
    `local`. The permutations use msg.seed unless an explicit rng is given.
    """
    if not isinstance(msg, ComputeRequest):
        raise MalformedRequestError(f"Client {local.client_id} cannot handle '{msg.tag}'")
    if msg.client_id != local.client_id:
        raise MalformedRequestError(f"Request for '{msg.client_id}' delivered to '{local.client_id}'")
    if msg.B_k < 1:
        raise MalformedRequestError(f"B_k must be >= 1, got {msg.B_k}")
    if msg.p not in SUPPORTED_ORDERS:
        raise UnsupportedOrderError(f"Order p={msg.p} not supported, expected one of {SUPPORTED_ORDERS}")
    if msg.solver not in SOLVERS:
        raise MalformedRequestError(f"Unknown solver '{msg.solver}'")
    if msg.solver == "sinkhorn" and not msg.epsilon > 0:
        raise MalformedRequestError(f"epsilon must be positive, got {msg.epsilon}")

    value = client_statistic(local, msg.p, msg.solver, msg.epsilon)
    batch = local_permuted_stats(local, msg.B_k, msg.seed if rng is None else rng,
                                 msg.p, msg.solver, msg.epsilon)
    logger.debug("Client %s: W_p^p=%.6g, %d permuted statistics", local.client_id, value, batch.B_k)
    return [
        LocalResult(run_id=msg.run_id, client_id=local.client_id, w2_squared=value),
        PermutedBatchMsg(run_id=msg.run_id, client_id=local.client_id, stats=batch.stats.tolist()),
    ]


class ClientEndpoint:
    """A ClientSample behind the wire format: frames in, frames out."""

    def __init__(self, sample):
        self.sample = sample

    @property
    def client_id(self):
        return self.sample.client_id

    def handle(self, msg):
        return client_handle(msg, self.sample)

    def handle_frame(self, frame):
        return [encode(reply) for reply in self.handle(decode(frame))]
