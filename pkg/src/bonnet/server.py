"""HTTP inference service: the deployment node for everything non-CLI.

Routes: ``GET /health``, ``GET /info``, ``POST /infer`` (raw PNG/JPEG body in,
single-channel PNG id mask out, ``?overlay=1`` for an RGB overlay). One shared
read-only session serves all requests; a semaphore bounds concurrent
inferences and queues the rest. SIGTERM/SIGINT shut down gracefully.
"""

from __future__ import annotations

import json
import logging
import signal
import threading
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from urllib.parse import parse_qs, urlparse

from . import imgio, runtime
from .errors import ConfigError, DatasetError

log = logging.getLogger("bonnet.serve")

DEFAULT_MAX_BODY = 16 * 1024 * 1024
DEFAULT_CONCURRENCY = 4


@dataclass(frozen=True)
class ServeConfig:
    model_dir: str
    variant: str = "nchw"
    backend: str = "reference_float"
    bind: str = "127.0.0.1"
    port: int = 8080
    max_body_bytes: int = DEFAULT_MAX_BODY
    max_concurrency: int = DEFAULT_CONCURRENCY

    def __post_init__(self):
        if not 1 <= self.port <= 65535:
            raise ConfigError(f"port must lie in [1, 65535], got {self.port}", field="port")
        if self.max_body_bytes < 1024 * 1024:
            raise ConfigError(
                f"max_body_bytes must be at least 1 MiB, got {self.max_body_bytes}",
                field="max_body_bytes")
        if self.max_concurrency < 1:
            raise ConfigError("max_concurrency must be >= 1", field="max_concurrency")


class _Handler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    server_version = "bonnet"

    def log_message(self, fmt, *args):
        log.debug("%s " + fmt, self.address_string(), *args)

    def _reply(self, status, body: bytes, content_type="text/plain; charset=utf-8",
               extra_headers=()):
        self.send_response(status)
        self.send_header("Content-Type", content_type)
        self.send_header("Content-Length", str(len(body)))
        # one request per connection keeps shutdown joins prompt
        self.send_header("Connection", "close")
        for key, value in extra_headers:
            self.send_header(key, value)
        self.end_headers()
        self.wfile.write(body)
        self.close_connection = True

    def do_GET(self):
        path = urlparse(self.path).path
        if path == "/health":
            self._reply(200, b"ok")
        elif path == "/info":
            session = self.server.session
            doc = {
                "variant": session.model.variant,
                "backend": session.backend,
                "classes": [{"id": c.id, "name": c.name,
                             "color": "#{:02X}{:02X}{:02X}".format(*c.color)}
                            for c in session.classes],
            }
            self._reply(200, json.dumps(doc, indent=2).encode("utf-8"),
                        "application/json")
        else:
            self._reply(404, b"not found")

    def do_POST(self):
        parsed = urlparse(self.path)
        if parsed.path != "/infer":
            self._reply(404, b"not found")
            return
        length = self.headers.get("Content-Length")
        if length is None:
            self._reply(400, b"missing Content-Length")
            return
        length = int(length)
        if length > self.server.max_body:
            self._reply(413, b"request body too large")
            return
        body = self.rfile.read(length)
        try:
            image = imgio.decode_image_bytes(body)
        except DatasetError:
            self._reply(400, b"cannot decode image body")
            return
        overlay = parse_qs(parsed.query).get("overlay", ["0"])[0] in ("1", "true")
        with self.server.gate:
            mask = runtime.infer(self.server.session, image)
        ms = f"{mask.timing['inference']:.3f}"
        if overlay:
            blended = runtime.colorize(mask.labels, self.server.session.class_colors,
                                       image, alpha=0.5)
            payload = imgio.encode_image_png(blended)
        else:
            payload = imgio.encode_mask_png(mask.labels)
        self._reply(200, payload, "image/png", extra_headers=[("X-Inference-Ms", ms)])


class InferenceServer(ThreadingHTTPServer):
    """Shares one session across request threads; bounded concurrency."""

    daemon_threads = False  # joined on close so in-flight requests finish

    def __init__(self, session: runtime.Session, bind="127.0.0.1", port=0,
                 max_body=DEFAULT_MAX_BODY, max_concurrency=DEFAULT_CONCURRENCY):
        super().__init__((bind, port), _Handler)
        self.session = session
        self.max_body = max_body
        self.gate = threading.Semaphore(max_concurrency)

    @property
    def port(self) -> int:
        return self.server_address[1]

    def run_background(self) -> threading.Thread:
        thread = threading.Thread(target=self.serve_forever, name="bonnet-serve",
                                  daemon=True)
        thread.start()
        return thread

    def stop(self):
        self.shutdown()
        self.server_close()
        self.session.close()


def serve(config: ServeConfig):
    """Open the session and run the service until SIGTERM/SIGINT."""
    session = runtime.open_session(config.model_dir, config.variant, config.backend)
    server = InferenceServer(session, config.bind, config.port,
                             config.max_body_bytes, config.max_concurrency)

    def handle_signal(signum, frame):
        log.info("signal %d: shutting down", signum)
        threading.Thread(target=server.shutdown, daemon=True).start()

    signal.signal(signal.SIGTERM, handle_signal)
    signal.signal(signal.SIGINT, handle_signal)
    log.info("serving %s variant=%s backend=%s on %s:%d",
             config.model_dir, config.variant, config.backend,
             config.bind, server.port)
    try:
        server.serve_forever()
    finally:
        server.server_close()
        session.close()
    return 0
