"""Real-datagram backend: the same endpoints over an actual UDP socket.

Frames are byte-identical to the simulated link's (42-byte filler included),
so an endpoint neither knows nor cares which backend carries it.  Timestamps
come from the monotonic clock in nanoseconds, matching the endpoint timer
units.  Intended for manual runs; the test suite only exercises loopback.
"""

from __future__ import annotations

import select
import socket
import time

from .transport import Endpoint


class UdpNode:
    """Bind an endpoint to a UDP socket; ``peer`` may be learned from traffic."""

    def __init__(self, endpoint: Endpoint, bind=("127.0.0.1", 0), peer=None):
        self.endpoint = endpoint
        self.peer = peer
        self.sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        self.sock.bind(bind)
        self.sock.setblocking(False)
        endpoint.send_frame = self.send

    @property
    def address(self):
        return self.sock.getsockname()

    def send(self, frame: bytes):
        if self.peer is None:
            raise RuntimeError("no peer known yet")
        self.sock.sendto(frame, self.peer)

    def poll(self, timeout: float = 0.0) -> int:
        """Drain readable frames into the endpoint and run its timers once."""
        handled = 0
        while True:
            ready, _, _ = select.select([self.sock], [], [], timeout if handled == 0 else 0.0)
            if not ready:
                break
            frame, addr = self.sock.recvfrom(2048)
            if self.peer is None:
                self.peer = addr
            self.endpoint.on_frame(frame, time.monotonic_ns())
            handled += 1
        self.endpoint.tick(time.monotonic_ns())
        return handled

    def close(self):
        self.sock.close()


def pingpong_server(node: UdpNode, resp_schema, *, quiet: bool = True):
    """Echo handler: answer each request with a same-size response."""
    from .wire import Request

    def handle(queue, request, now):
        if not quiet:
            print(f"request on queue {queue}: {len(request.values[0])} body bytes")
        node.endpoint.send_req(Request.of(resp_schema, body=request.values[0]), now)

    node.endpoint.on_request = handle
