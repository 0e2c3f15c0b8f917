"""In-process fake of the remote denoising service, for protocol tests.

The model is deliberately simple but exactly linear where it matters:
encode block-averages 8x8 image patches into a 4-channel latent, so its
vector-Jacobian product has a closed form the /v1/encode_grad route
implements exactly. predict_noise is a fixed affine function of the noised
latent, the depth map, and a text hash, which makes golden fixtures stable.
"""

import base64
import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np

LATENT_CHANNELS = 4
LATENT_SIZE = 8
IMAGE_SIZE = LATENT_SIZE * 8
SCHEDULE_LEN = 1000


def schedule_alphas_cumprod() -> list[float]:
    i = np.arange(SCHEDULE_LEN)
    return list(np.cos(np.pi / 2 * i / (SCHEDULE_LEN - 1)) ** 2 * 0.9998 + 1e-4)


def decode_tensor(obj) -> np.ndarray:
    raw = base64.b64decode(obj["data"])
    return np.frombuffer(raw, dtype="<f2").reshape(tuple(obj["shape"])).astype(np.float32)


def encode_tensor(arr: np.ndarray) -> dict:
    arr = np.ascontiguousarray(arr, dtype="<f2")
    return {"shape": list(arr.shape), "data": base64.b64encode(arr.tobytes()).decode("ascii")}


def text_hash(text: str) -> float:
    return (sum(text.encode("utf-8")) % 97) / 97.0


def model_encode(images: np.ndarray) -> np.ndarray:
    """(B, 64, 64, 3) -> (B, 4, 8, 8): per-channel 8x8 block means plus a luma channel."""
    b, h, w, _ = images.shape
    blocks = images.reshape(b, LATENT_SIZE, 8, LATENT_SIZE, 8, 3).mean(axis=(2, 4))
    latent = np.empty((b, LATENT_CHANNELS, LATENT_SIZE, LATENT_SIZE), dtype=np.float32)
    for c in range(3):
        latent[:, c] = blocks[..., c]
    latent[:, 3] = blocks.mean(axis=-1) * 0.5
    return latent


def model_encode_vjp(latent_grad: np.ndarray) -> np.ndarray:
    """Exact adjoint of model_encode."""
    b = latent_grad.shape[0]
    out = np.zeros((b, IMAGE_SIZE, IMAGE_SIZE, 3), dtype=np.float32)
    for c in range(3):
        g = latent_grad[:, c] / 64.0 + latent_grad[:, 3] * 0.5 / (64.0 * 3.0)
        out[..., c] = np.repeat(np.repeat(g, 8, axis=1), 8, axis=2)
    return out


def model_predict(noised: np.ndarray, t: list[float], depth: np.ndarray,
                  prompt: str, negative_prompt: str):
    tv = np.asarray(t, dtype=np.float32).reshape(-1, 1, 1, 1)
    d = depth[:, None, :, :]
    eps_cond = 0.9 * noised + 0.1 * d + 0.02 * text_hash(prompt) + 0.05 * tv
    eps_uncond = 0.9 * noised + 0.02 * text_hash(negative_prompt) + 0.05 * tv
    return eps_cond.astype(np.float32), eps_uncond.astype(np.float32)


class MockGuidanceServer:
    """Threaded HTTP server speaking the guidance wire protocol.

    fail_next(n) makes the next n requests answer 503, for retry tests.
    protocol_version can be overridden to provoke a handshake mismatch.
    """

    def __init__(self, protocol_version: int = 1):
        self.protocol_version = protocol_version
        self.fail_budget = 0
        self.request_log: list[str] = []
        self.last_bodies: dict[str, dict] = {}
        self.canned_responses: dict[str, dict] = {}
        self._lock = threading.Lock()

        outer = self

        class Handler(BaseHTTPRequestHandler):
            def log_message(self, *args):
                pass

            def _maybe_fail(self) -> bool:
                with outer._lock:
                    outer.request_log.append(self.path)
                    if outer.fail_budget > 0:
                        outer.fail_budget -= 1
                        self.send_response(503)
                        self.end_headers()
                        self.wfile.write(b"simulated outage")
                        return True
                return False

            def _reply(self, payload: dict, status: int = 200):
                body = json.dumps(payload).encode("utf-8")
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(body)))
                self.end_headers()
                self.wfile.write(body)

            def do_GET(self):
                if self._maybe_fail():
                    return
                if self.path == "/v1/info":
                    if "/v1/info" in outer.canned_responses:
                        self._reply(outer.canned_responses["/v1/info"])
                        return
                    self._reply(
                        {
                            "protocol": outer.protocol_version,
                            "latent_channels": LATENT_CHANNELS,
                            "latent_size": LATENT_SIZE,
                            "schedule": {"alphas_cumprod": schedule_alphas_cumprod()},
                        }
                    )
                else:
                    self._reply({"error": "unknown route"}, status=404)

            def do_POST(self):
                if self._maybe_fail():
                    return
                length = int(self.headers.get("Content-Length", 0))
                try:
                    body = json.loads(self.rfile.read(length))
                except json.JSONDecodeError:
                    self._reply({"error": "bad json"}, status=400)
                    return
                outer.last_bodies[self.path] = body
                if self.path in outer.canned_responses:
                    self._reply(outer.canned_responses[self.path])
                    return
                try:
                    if self.path == "/v1/encode":
                        images = decode_tensor(body["image"])
                        if images.shape[1:] != (IMAGE_SIZE, IMAGE_SIZE, 3):
                            self._reply({"error": "bad image shape"}, status=400)
                            return
                        self._reply({"latent": encode_tensor(model_encode(images))})
                    elif self.path == "/v1/predict_noise":
                        noised = decode_tensor(body["latent_noised"])
                        depth = decode_tensor(body["depth"])
                        if depth.shape[1:] != (LATENT_SIZE, LATENT_SIZE):
                            self._reply({"error": "bad depth shape"}, status=400)
                            return
                        eps_cond, eps_uncond = model_predict(
                            noised, body["t"], depth,
                            body.get("prompt", ""), body.get("negative_prompt", ""),
                        )
                        self._reply(
                            {"eps_cond": encode_tensor(eps_cond),
                             "eps_uncond": encode_tensor(eps_uncond)}
                        )
                    elif self.path == "/v1/encode_grad":
                        latent_grad = decode_tensor(body["latent_grad"])
                        self._reply({"image_grad": encode_tensor(model_encode_vjp(latent_grad))})
                    else:
                        self._reply({"error": "unknown route"}, status=404)
                except (KeyError, ValueError) as exc:
                    self._reply({"error": str(exc)}, status=400)

        self._server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)

    @property
    def endpoint(self) -> str:
        host, port = self._server.server_address
        return f"http://{host}:{port}"

    def fail_next(self, n: int) -> None:
        with self._lock:
            self.fail_budget = n

    def __enter__(self):
        self._thread.start()
        return self

    def __exit__(self, *exc):
        self._server.shutdown()
        self._server.server_close()
        return False
