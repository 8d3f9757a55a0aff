"""In-memory network with per-node delivery delay.

Listeners are keyed by (address, port). dial() either returns a connection
pair synchronously or raises ConnectionRefused; bytes sent on a connection
arrive at the peer after the shaped delay of both endpoints' nodes (an
endpoint outside the testbed, like the collector process, contributes zero).
Delivery order per direction is preserved even if the delay is re-shaped
mid-stream.
"""

from __future__ import annotations

from typing import Callable

from rackbench.sim.events import Scheduler

Receiver = Callable[[bytes], None]
CloseHook = Callable[[], None]


class ConnectionRefused(Exception):
    pass


class SimConnection:
    """One endpoint of an established connection."""

    def __init__(self, network: "SimNetwork", local_node: str | None) -> None:
        self._network = network
        self.local_node = local_node  # None for off-testbed endpoints
        self.peer: SimConnection | None = None
        self.receiver: Receiver | None = None
        self.on_close: CloseHook | None = None
        self.closed = False
        self._last_delivery_us = 0

    def send(self, data: bytes) -> None:
        if self.closed or self.peer is None or self.peer.closed:
            return
        peer = self.peer
        sched = self._network.scheduler
        delay = self._network.path_delay_us(self.local_node, peer.local_node)
        at = max(sched.now_us() + delay, peer._last_delivery_us)
        peer._last_delivery_us = at

        def deliver() -> None:
            if not peer.closed and peer.receiver is not None:
                peer.receiver(bytes(data))

        sched.call_at(at, deliver)

    def close(self) -> None:
        """Close both ends. The peer's on_close hook fires; ours does not
        (closing your own socket is not a loss event)."""
        if self.closed:
            return
        self.closed = True
        peer = self.peer
        if peer is not None and not peer.closed:
            peer.closed = True
            if peer.on_close is not None:
                peer.on_close()
        self._network._forget(self)
        if peer is not None:
            self._network._forget(peer)


class SimNetwork:
    def __init__(self, scheduler: Scheduler, delay_lookup: Callable[[str], int]) -> None:
        self.scheduler = scheduler
        self._delay_lookup = delay_lookup  # address -> one-way delay in us
        self._listeners: dict[tuple[str, int], Callable[[SimConnection], None]] = {}
        self._open: list[SimConnection] = []

    def path_delay_us(self, src: str | None, dst: str | None) -> int:
        delay = 0
        if src is not None:
            delay += self._delay_lookup(src)
        if dst is not None:
            delay += self._delay_lookup(dst)
        return delay

    def listen(self, address: str, port: int, on_connect: Callable[[SimConnection], None]) -> None:
        self._listeners[(address, port)] = on_connect

    def unlisten(self, address: str, port: int) -> None:
        self._listeners.pop((address, port), None)

    def dial(
        self,
        address: str,
        port: int,
        receiver: Receiver,
        on_close: CloseHook | None = None,
        from_node: str | None = None,
    ) -> SimConnection:
        """Connect to a listener. Raises ConnectionRefused when nothing listens."""
        on_connect = self._listeners.get((address, port))
        if on_connect is None:
            raise ConnectionRefused(f"{address}:{port}")
        near = SimConnection(self, from_node)
        far = SimConnection(self, address)
        near.peer, far.peer = far, near
        near.receiver = receiver
        near.on_close = on_close
        self._open += [near, far]
        on_connect(far)
        return near

    def close_all_for(self, address: str) -> None:
        """Drop every connection terminating at address (its power went away)."""
        for conn in [c for c in self._open if c.local_node == address]:
            if not conn.closed:
                # remote power loss: the surviving peer sees a close
                conn.closed = True
                peer = conn.peer
                self._forget(conn)
                if peer is not None and not peer.closed:
                    peer.closed = True
                    self._forget(peer)
                    if peer.on_close is not None:
                        peer.on_close()

    def _forget(self, conn: SimConnection) -> None:
        try:
            self._open.remove(conn)
        except ValueError:
            pass

    @property
    def open_connections(self) -> int:
        return len(self._open)
