"""Synchronous in-process message passing between neighboring agents.

Messages posted during a round are held back until :meth:`CommBus.deliver`
is called, so no agent can observe a partially completed round.  Inboxes are
ordered by ``(sender, kind)``, which makes delivery independent of the order
in which (possibly concurrent) agents posted.
"""
import threading
from dataclasses import dataclass, field

import numpy as np

from .errors import MissingReport, TopologyViolation

STATE = "StateTraj"
ADJOINT = "AdjointTraj"
KIND_ORDER = {STATE: 0, ADJOINT: 1}

SCALAR_BYTES = 8
HEADER_BYTES = 32


@dataclass(frozen=True)
class Message:
    sender: int
    receiver: int
    kind: str
    q: int
    payload: np.ndarray

    @property
    def nbytes(self):
        return HEADER_BYTES + SCALAR_BYTES * self.payload.size


@dataclass
class CommStats:
    """Counters of one MPC step (or of a whole run when summed).

    ``messages`` counts trajectory messages, ``components`` weights every
    message by the state dimension of its sender.
    """

    messages: int = 0
    components: int = 0
    bytes: int = 0
    rounds: int = 0
    per_agent: dict = field(default_factory=dict)

    def add(self, msg, dim):
        self.messages += 1
        self.components += dim
        self.bytes += msg.nbytes
        self.per_agent[msg.sender] = self.per_agent.get(msg.sender, 0) + 1


class CommBus:
    """Round-based transport restricted to the edges of a coupling graph.

    State trajectories may travel from ``i`` to any ``j`` in ``N_i``,
    adjoint trajectories only to senders ``j`` in ``N_i^<-``.
    """

    def __init__(self, graph, state_dims):
        self.graph = graph
        self.state_dims = tuple(state_dims)
        self._pending = []
        self._lock = threading.Lock()
        self.step = CommStats()
        self.history = []
        self.setup = CommStats()

    def allowed(self, sender, receiver, kind):
        if kind == STATE:
            return receiver in self.graph.neighbors[sender]
        if kind == ADJOINT:
            return receiver in self.graph.senders[sender]
        return False

    def post(self, msg):
        if not self.allowed(msg.sender, msg.receiver, msg.kind):
            raise TopologyViolation(f"{msg.kind} from {msg.sender} to {msg.receiver} is not along an edge")
        frozen = np.array(msg.payload, dtype=float)
        frozen.setflags(write=False)
        with self._lock:
            self._pending.append(Message(msg.sender, msg.receiver, msg.kind, msg.q, frozen))

    def deliver(self, setup=False):
        """Close the current round and return ``{agent: [Message, ...]}``."""
        with self._lock:
            pending, self._pending = self._pending, []
        stats = self.setup if setup else self.step
        inbox = {i: [] for i in range(self.graph.agent_count)}
        for msg in sorted(pending, key=lambda m: (m.receiver, m.sender, KIND_ORDER[m.kind])):
            inbox[msg.receiver].append(msg)
            stats.add(msg, self.state_dims[msg.sender])
        stats.rounds += 1
        return inbox

    def close_step(self):
        """Archive the counters of the finished MPC step and start new ones."""
        done, self.step = self.step, CommStats()
        self.history.append(done)
        return done


def outgoing_messages(graph, i, q, x_i, lam_i):
    """Step-3 messages of agent ``i``: ``x_i`` to ``N_i`` and ``lam_i`` to ``N_i^<-``."""
    out = [Message(i, j, STATE, q, x_i) for j in graph.neighbors[i]]
    out += [Message(i, j, ADJOINT, q, lam_i) for j in graph.senders[i]]
    return out


def exchange_round(bus, outgoing, setup=False):
    """Post every agent's outgoing messages and deliver them atomically.

    ``outgoing`` maps an agent id to an iterable of :class:`Message`.
    """
    for i in sorted(outgoing):
        for msg in outgoing[i]:
            if msg.sender != i:
                raise TopologyViolation(f"agent {i} posted a message on behalf of {msg.sender}")
            bus.post(msg)
    return bus.deliver(setup=setup)


def coordinator_reduce(reports, agent_count, fixed=False):
    """Global stopping decision from per-agent reports.

    In fixed mode the coordinator only counts rounds and never stops early.
    """
    missing = [i for i in range(agent_count) if i not in reports]
    if missing:
        raise MissingReport(f"no stopping report from agents {missing}")
    if fixed:
        return False
    return all(bool(reports[i]) for i in range(agent_count))


def expected_counts(graph, state_dims, iterations):
    """Closed-form message and component counts for ``iterations`` rounds."""
    per = [len(graph.senders[i]) + len(graph.neighbors[i]) for i in range(graph.agent_count)]
    return iterations * sum(per), iterations * sum(n * p for n, p in zip(state_dims, per))
