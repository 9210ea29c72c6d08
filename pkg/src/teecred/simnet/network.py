"""Single-queue discrete-event network.

Logical time is the delivery count.  Every envelope popped from the queue
passes through the adversary pipeline exactly once before it is delivered,
dropped or rescheduled.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field, replace
from typing import TYPE_CHECKING, Callable

from .. import crypto
from .codec import wire

if TYPE_CHECKING:
    from .adversary import Adversary

HANDSHAKE = "handshake"
RECORD = "record"
PLAINTEXT = "plaintext-label"


@wire(50)
@dataclass(frozen=True)
class Envelope:
    seq: int
    src: str
    dst: str
    kind: str
    procedure: str
    step: str
    label: str
    body: bytes
    injected: bool = False

    @property
    def body_digest(self) -> str:
        return crypto.digest(self.body).hex()


@dataclass
class NetEvent:
    """One pipeline decision, as written to the transcript."""

    envelope: Envelope
    action: str | None
    delivered: bool
    at: int


class Idle:
    """Returned by :meth:`Network.step` when nothing is queued."""

    def __repr__(self) -> str:
        return "Idle"


IDLE = Idle()


@dataclass
class Network:
    adversary: Adversary | None = None
    now: int = 0
    sent: int = 0
    injected: int = 0
    delivered: int = 0
    dropped: int = 0
    bodies: list[bytes] = field(default_factory=list)
    listeners: list[Callable[[NetEvent], None]] = field(default_factory=list)
    _queue: list = field(default_factory=list)
    _next_seq: int = 1
    _tiebreak: int = 0

    def send(self, src: str, dst: str, kind: str, procedure: str, step: str, label: str,
             body: bytes) -> Envelope:
        env = Envelope(self._next_seq, src, dst, kind, procedure, step, label, bytes(body))
        self._next_seq += 1
        self.sent += 1
        self.bodies.append(env.body)
        self._push(env, env.seq)
        return env

    def inject(self, env: Envelope, delay: int = 0) -> Envelope:
        """Queue an adversary-originated envelope under a fresh sequence number."""
        env = replace(env, seq=self._next_seq, injected=True)
        self._next_seq += 1
        self.injected += 1
        self.bodies.append(env.body)
        self._push(env, self.now + delay)
        return env

    def reschedule(self, env: Envelope, delay: int, base: int | None = None) -> None:
        """Hold ``env`` back by ``delay`` slots after ``base`` (default: now)."""
        self._push(env, (self.now if base is None else base) + delay, processed=True)

    def _push(self, env: Envelope, due: int, processed: bool = False) -> None:
        self._tiebreak += 1
        heapq.heappush(self._queue, (due, self._tiebreak, processed, env))

    @property
    def pending(self) -> int:
        return len(self._queue)

    def step(self) -> Envelope | Idle:
        """Pop the next envelope and run it through the adversary.

        Returns the envelope to deliver, or :data:`IDLE` once the queue is
        empty.  Dropped envelopes are consumed silently and the next one is
        tried.
        """
        while self._queue:
            due, _, processed, env = heapq.heappop(self._queue)
            action = None
            if not processed and self.adversary is not None:
                verdict = self.adversary.process(env, self)
                action = verdict.action
                if verdict.reschedule is not None:
                    self._emit(NetEvent(env, action, False, self.now))
                    self.reschedule(verdict.envelope or env, verdict.reschedule, max(due, self.now))
                    continue
                if verdict.envelope is None:
                    self.dropped += 1
                    self._emit(NetEvent(env, action, False, self.now))
                    continue
                if verdict.envelope.body != env.body:
                    self.bodies.append(verdict.envelope.body)
                env = verdict.envelope
            self.now += 1
            self.delivered += 1
            self._emit(NetEvent(env, action, True, self.now))
            return env
        return IDLE

    def _emit(self, event: NetEvent) -> None:
        for listener in self.listeners:
            listener(event)

    def balanced(self) -> bool:
        """delivered + dropped == sent + injected, once the queue is drained."""
        return not self._queue and self.delivered + self.dropped == self.sent + self.injected
