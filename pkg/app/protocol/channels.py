"""
Transports between the coordinator and its clients.

Both implementations carry encoded frames, deliver them once and in send
order per client, and record every frame on an optional Transcript.
"""
import logging
import queue
import socket
import socketserver
import threading
from abc import ABC, abstractmethod
from collections import deque
from concurrent.futures import ThreadPoolExecutor

from app.errors import ClientTimeoutError, ITDError, ProtocolError
from app.protocol.client import ClientEndpoint
from app.protocol.messages import FrameDecoder, decode, encode, read_frame, write_frame
from app.protocol.registry import ClientAdvert, append_advert

logger = logging.getLogger(__name__)

DEFAULT_TIMEOUT = 30.0
RECV_CHUNK = 64 * 1024


class Transport(ABC):
    """Duplex channel from one coordinator to K clients."""

    def __init__(self, transcript=None):
        self.transcript = transcript

    def _record(self, direction, peer, frame):
        if self.transcript is not None:
            self.transcript.record(direction, peer, frame)

    def send(self, client_id, msg):
        frame = encode(msg)
        self._record("send", client_id, frame)
        self._deliver(client_id, frame)

    def recv(self, client_id, timeout=DEFAULT_TIMEOUT):
        frame = self._next_frame(client_id, timeout)
        self._record("recv", client_id, frame)
        return decode(frame)

    def publish(self, msg):
        """Run-level announcements (selection, verdict) go to the transcript only."""
        self._record("publish", "*", encode(msg))

    @abstractmethod
    def _deliver(self, client_id, frame):
        ...

    @abstractmethod
    def _next_frame(self, client_id, timeout):
        ...

    def close(self):
        pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False


class _Failure:
    def __init__(self, error):
        self.error = error


class LoopbackTransport(Transport):
    """
    In-process clients. Each client runs on its own single worker thread so
    its requests are handled one at a time and in order.
    """

    def __init__(self, endpoints, transcript=None):
        super().__init__(transcript)
        if not isinstance(endpoints, dict):
            endpoints = {e.client_id: e for e in endpoints}
        self.endpoints = {cid: e if isinstance(e, ClientEndpoint) else ClientEndpoint(e)
                          for cid, e in endpoints.items()}
        self._inbox = {cid: queue.Queue() for cid in self.endpoints}
        self._workers = {cid: ThreadPoolExecutor(max_workers=1, thread_name_prefix=f"client-{cid}")
                         for cid in self.endpoints}

    @classmethod
    def from_samples(cls, clients, transcript=None):
        return cls({c.client_id: ClientEndpoint(c) for c in clients}, transcript)

    def _endpoint(self, client_id):
        if client_id not in self.endpoints:
            raise ProtocolError(f"No loopback endpoint for client '{client_id}'")
        return self.endpoints[client_id]

    def _deliver(self, client_id, frame):
        endpoint = self._endpoint(client_id)
        inbox = self._inbox[client_id]

        def run():
            try:
                for reply in endpoint.handle_frame(frame):
                    inbox.put(reply)
            except Exception as e:
                logger.error("Client %s failed: %s", client_id, e)
                inbox.put(_Failure(e))

        self._workers[client_id].submit(run)

    def _next_frame(self, client_id, timeout):
        self._endpoint(client_id)
        try:
            item = self._inbox[client_id].get(timeout=timeout)
        except queue.Empty:
            raise ClientTimeoutError(f"No reply from client '{client_id}' within {timeout}s")
        if isinstance(item, _Failure):
            if isinstance(item.error, ProtocolError):
                raise item.error
            raise ProtocolError(f"Client '{client_id}' failed: {item.error}")
        return item

    def close(self):
        for worker in self._workers.values():
            worker.shutdown(wait=True)


class SocketTransport(Transport):
    """Clients behind stream sockets, one connection per client, opened on first use."""

    def __init__(self, addresses, transcript=None, connect_timeout=DEFAULT_TIMEOUT):
        super().__init__(transcript)
        self.addresses = dict(addresses)
        self.connect_timeout = connect_timeout
        self._sockets = {}
        self._streams = {}

    @classmethod
    def from_registry(cls, adverts, transcript=None):
        missing = [a.client_id for a in adverts if a.address is None]
        if missing:
            raise ProtocolError(f"Clients without a socket address: {missing}")
        return cls({a.client_id: a.address for a in adverts}, transcript)

    def _socket(self, client_id):
        if client_id not in self._sockets:
            if client_id not in self.addresses:
                raise ProtocolError(f"No address for client '{client_id}'")
            try:
                self._sockets[client_id] = socket.create_connection(
                    self.addresses[client_id], timeout=self.connect_timeout)
            except OSError as e:
                raise ProtocolError(f"Cannot reach client '{client_id}' at {self.addresses[client_id]}: {e}")
        return self._sockets[client_id]

    def _deliver(self, client_id, frame):
        sock = self._socket(client_id)
        sock.settimeout(self.connect_timeout)
        write_frame(sock, frame)

    def _next_frame(self, client_id, timeout):
        sock = self._socket(client_id)
        sock.settimeout(timeout)
        decoder, ready = self._streams.setdefault(client_id, (FrameDecoder(), deque()))
        # Bytes of a frame cut short by a timeout stay buffered for the next recv.
        while not ready:
            try:
                chunk = sock.recv(RECV_CHUNK)
            except socket.timeout:
                raise ClientTimeoutError(f"No reply from client '{client_id}' within {timeout}s")
            except OSError as e:
                raise ProtocolError(f"Connection to client '{client_id}' failed: {e}")
            if not chunk:
                where = "inside a frame" if decoder.pending else "before replying"
                raise ProtocolError(f"Client '{client_id}' closed the connection {where}")
            ready.extend(decoder.frames(chunk))
        return ready.popleft()

    def close(self):
        for sock in self._sockets.values():
            try:
                sock.close()
            except OSError:
                pass
        self._sockets.clear()
        self._streams.clear()


class _ClientHandler(socketserver.StreamRequestHandler):
    def handle(self):
        endpoint = self.server.endpoint
        while True:
            try:
                frame = read_frame(self.connection)
                if frame is None:
                    return
                for reply in endpoint.handle_frame(frame):
                    write_frame(self.connection, reply)
            except ITDError as e:
                # No error message exists on the wire; dropping the connection aborts the run.
                logger.error("Client %s: %s; closing connection", endpoint.client_id, e)
                return


class ClientServer(socketserver.ThreadingTCPServer):
    """Socket endpoint hosting one ClientSample."""
    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, sample, host="127.0.0.1", port=0):
        self.endpoint = ClientEndpoint(sample)
        super().__init__((host, port), _ClientHandler)
        self._thread = None

    @property
    def address(self):
        host, port = self.server_address[:2]
        return host, port

    def advert(self):
        host, port = self.address
        sample = self.endpoint.sample
        return ClientAdvert(client_id=sample.client_id, m=sample.m, n=sample.n, host=host, port=port)

    def start(self):
        self._thread = threading.Thread(target=self.serve_forever, name=f"serve-{self.endpoint.client_id}",
                                        daemon=True)
        self._thread.start()
        return self

    def stop(self):
        self.shutdown()
        self.server_close()


def serve_client(client, host="127.0.0.1", port=0, registry=None, block=True):
    """
    Hosts `client` on (host, port) and appends its advert to `registry` when
    given. Blocks until interrupted unless block=False, in which case the
    started server is returned.
    """
    server = ClientServer(client, host, port)
    if registry is not None:
        append_advert(registry, server.advert())
    logger.info("Client %s listening on %s:%d", client.client_id, *server.address)
    if not block:
        return server.start()
    try:
        server.serve_forever()
    finally:
        server.server_close()
    return server
