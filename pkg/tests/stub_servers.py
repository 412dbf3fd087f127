"""In-process HTTP servers used to exercise the gateway's wire contracts."""

from __future__ import annotations

import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

from es2emb.tinylm import TinyLM, tokenize


class ScriptedChatServer:
    """Serves /v1/chat/completions following a per-test script.

    Script entries: ("ok", text) | ("status", code) | ("drop",) | ("empty",)
    | ("malformed",). When the script runs out, the last entry repeats.
    """

    def __init__(self, script):
        self.script = list(script)
        self.calls = 0
        self.bodies: list[dict] = []
        outer = self

        class Handler(BaseHTTPRequestHandler):
            def log_message(self, *args):
                pass

            def do_POST(self):
                length = int(self.headers.get("Content-Length", "0"))
                outer.bodies.append(json.loads(self.rfile.read(length) or b"{}"))
                idx = min(outer.calls, len(outer.script) - 1)
                outer.calls += 1
                action = outer.script[idx]
                if action[0] == "drop":
                    self.connection.close()
                    return
                if action[0] == "status":
                    self.send_response(action[1])
                    self.end_headers()
                    return
                if action[0] == "empty":
                    payload = {"choices": [{"message": {"content": ""}}]}
                elif action[0] == "malformed":
                    payload = {"nonsense": True}
                else:
                    payload = {"choices": [{"message": {"content": action[1]}}]}
                body = json.dumps(payload).encode()
                self.send_response(200)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(body)))
                self.end_headers()
                self.wfile.write(body)

        self.server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self.thread = threading.Thread(target=self.server.serve_forever, daemon=True)

    @property
    def base_url(self) -> str:
        host, port = self.server.server_address
        return f"http://{host}:{port}"

    def __enter__(self):
        self.thread.start()
        return self

    def __exit__(self, *exc):
        self.server.shutdown()
        self.server.server_close()


class HiddenStateServer:
    """Loopback /v1/hidden_states server backed by an in-process model.

    ``mangle`` can rewrite the reply payload to simulate broken servers.
    """

    def __init__(self, model: TinyLM, mangle=None):
        outer = self
        self.model = model
        self.mangle = mangle

        class Handler(BaseHTTPRequestHandler):
            def log_message(self, *args):
                pass

            def do_POST(self):
                length = int(self.headers.get("Content-Length", "0"))
                request = json.loads(self.rfile.read(length))
                stream = tokenize(request["text"]).truncate(outer.model.config.context_len)
                hidden = outer.model.forward(stream).hidden
                payload = {
                    "tokens": hidden.shape[1],
                    "dim": hidden.shape[2],
                    "layers": hidden.tolist(),
                }
                if outer.mangle is not None:
                    payload = outer.mangle(payload)
                body = json.dumps(payload).encode()
                self.send_response(200)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(body)))
                self.end_headers()
                self.wfile.write(body)

        self.server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self.thread = threading.Thread(target=self.server.serve_forever, daemon=True)

    @property
    def base_url(self) -> str:
        host, port = self.server.server_address
        return f"http://{host}:{port}"

    def __enter__(self):
        self.thread.start()
        return self

    def __exit__(self, *exc):
        self.server.shutdown()
        self.server.server_close()
