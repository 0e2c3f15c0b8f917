"""HTTP client for a remote depth-conditioned denoising service.

Protocol (JSON bodies, tensors as base64 little-endian float16 plus an
explicit shape array):

    GET  /v1/info          -> {protocol: 1, latent_channels, latent_size,
                               schedule: {alphas_cumprod: [...]}}
    POST /v1/encode        {image} -> {latent}
    POST /v1/predict_noise {latent_noised, t, depth, prompt, negative_prompt}
                           -> {eps_cond, eps_uncond}
    POST /v1/encode_grad   {latent_grad, image} -> {image_grad}
                           (vector-Jacobian product through the frozen encoder)

Transient transport failures and 5xx responses are retried with exponential
backoff; malformed requests, 4xx responses, and protocol mismatches are
surfaced immediately without retry.
"""

import base64
import time

import numpy as np
import requests

from .errors import BackendError, BackendUnavailableError, ProtocolError
from .guidance import GuidanceBackend, NoisePrediction

PROTOCOL_VERSION = 1


def encode_tensor(array: np.ndarray) -> dict:
    """Pack an array as {"shape": [...], "data": base64(float16 LE bytes)}."""
    arr = np.ascontiguousarray(array, dtype="<f2")
    return {
        "shape": list(arr.shape),
        "data": base64.b64encode(arr.tobytes()).decode("ascii"),
    }


def decode_tensor(obj: dict) -> np.ndarray:
    """Unpack a wire tensor to float32."""
    try:
        shape = tuple(int(s) for s in obj["shape"])
        raw = base64.b64decode(obj["data"], validate=True)
    except (KeyError, TypeError, ValueError) as exc:
        raise ProtocolError(f"malformed wire tensor: {exc}") from exc
    expected = int(np.prod(shape, dtype=np.int64)) * 2
    if len(raw) != expected:
        raise ProtocolError(
            f"wire tensor payload is {len(raw)} bytes, expected {expected} for shape {shape}"
        )
    return np.frombuffer(raw, dtype="<f2").reshape(shape).astype(np.float32)


class DiffusionBackend(GuidanceBackend):
    """Client for a remote latent diffusion model with depth conditioning.

    The depth map is concatenated to the latent input channels on the model
    side; this client validates shapes, handles retries, and exposes the
    schedule advertised by the service.
    """

    name = "diffusion"

    def __init__(
        self,
        endpoint: str,
        model_id: str,
        attempts: int = 3,
        backoff: float = 0.5,
        timeout: float = 60.0,
        session: requests.Session | None = None,
    ):
        self.endpoint = endpoint.rstrip("/")
        self.model_id = model_id
        self.attempts = attempts
        self.backoff = backoff
        self.timeout = timeout
        self._session = session or requests.Session()
        self._info: dict | None = None
        self._alphas_cumprod: np.ndarray | None = None

    def __reduce__(self):
        return (
            DiffusionBackend,
            (self.endpoint, self.model_id, self.attempts, self.backoff, self.timeout),
        )

    # -- transport -----------------------------------------------------------

    def _request(self, method: str, path: str, payload: dict | None = None) -> dict:
        url = self.endpoint + path
        headers = {"X-Model-Id": self.model_id}
        last_exc: Exception | None = None
        for attempt in range(self.attempts):
            try:
                if method == "GET":
                    resp = self._session.get(url, headers=headers, timeout=self.timeout)
                else:
                    resp = self._session.post(
                        url, json=payload, headers=headers, timeout=self.timeout
                    )
            except requests.RequestException as exc:
                last_exc = BackendUnavailableError(f"{url}: {exc}")
            else:
                if 400 <= resp.status_code < 500:
                    raise ProtocolError(
                        f"{url}: rejected with {resp.status_code}: {resp.text[:200]}"
                    )
                if resp.status_code >= 500:
                    last_exc = BackendUnavailableError(
                        f"{url}: server error {resp.status_code}"
                    )
                else:
                    try:
                        return resp.json()
                    except ValueError as exc:
                        raise ProtocolError(f"{url}: non-JSON response") from exc
            if attempt + 1 < self.attempts:
                time.sleep(self.backoff * (2**attempt))
        raise BackendError(
            f"backend unavailable after {self.attempts} attempts: {last_exc}"
        )

    # -- handshake -----------------------------------------------------------

    def connect(self) -> dict:
        """Fetch and validate service metadata; cached after the first call."""
        if self._info is None:
            info = self._request("GET", "/v1/info")
            if info.get("protocol") != PROTOCOL_VERSION:
                raise ProtocolError(
                    f"protocol version mismatch: got {info.get('protocol')!r}, "
                    f"need {PROTOCOL_VERSION}"
                )
            for key in ("latent_channels", "latent_size", "schedule"):
                if key not in info:
                    raise ProtocolError(f"service info missing {key!r}")
            alphas = info["schedule"].get("alphas_cumprod")
            if not alphas:
                raise ProtocolError("service schedule missing alphas_cumprod")
            self._alphas_cumprod = np.asarray(alphas, dtype=np.float64)
            self._info = info
        return self._info

    @property
    def latent_size(self) -> int:
        return int(self.connect()["latent_size"])

    @property
    def latent_channels(self) -> int:
        return int(self.connect()["latent_channels"])

    @property
    def depth_size(self) -> int:  # type: ignore[override]
        return self.latent_size

    @property
    def image_size(self) -> int:
        # latent grids downsample images 8x in the supported model family
        return self.latent_size * 8

    # -- GuidanceBackend interface --------------------------------------------

    def alpha_sigma(self, t: float) -> tuple[float, float]:
        self.connect()
        ac = self._alphas_cumprod
        idx = int(round(float(t) * (len(ac) - 1)))
        idx = min(max(idx, 0), len(ac) - 1)
        alpha = float(np.sqrt(ac[idx]))
        sigma = float(np.sqrt(1.0 - ac[idx]))
        return alpha, sigma

    def _check_images(self, images: np.ndarray) -> None:
        size = self.image_size
        if images.ndim != 4 or images.shape[1:] != (size, size, 3):
            raise ProtocolError(
                f"image batch must have shape (B, {size}, {size}, 3), got {images.shape}"
            )

    def encode(self, images: np.ndarray) -> np.ndarray:
        self._check_images(np.asarray(images))
        reply = self._request("POST", "/v1/encode", {"image": encode_tensor(images)})
        latent = decode_tensor(reply["latent"])
        expected = (images.shape[0], self.latent_channels, self.latent_size, self.latent_size)
        if latent.shape != expected:
            raise ProtocolError(f"latent shape {latent.shape}, expected {expected}")
        return latent

    def predict_noise(self, noised, t, depth, prompt, negative_prompt) -> NoisePrediction:
        noised = np.asarray(noised)
        depth = np.asarray(depth)
        size = self.latent_size
        if depth.ndim != 3 or depth.shape[1:] != (size, size):
            raise ProtocolError(
                f"depth conditioning must have shape (B, {size}, {size}), got {depth.shape}"
            )
        if depth.shape[0] != noised.shape[0]:
            raise ProtocolError("depth batch does not match latent batch")
        payload = {
            "latent_noised": encode_tensor(noised),
            "t": [float(v) for v in np.atleast_1d(t)],
            "depth": encode_tensor(depth),
            "prompt": prompt,
            "negative_prompt": negative_prompt,
        }
        reply = self._request("POST", "/v1/predict_noise", payload)
        try:
            pred = NoisePrediction(
                eps_cond=decode_tensor(reply["eps_cond"]),
                eps_uncond=decode_tensor(reply["eps_uncond"]),
            )
        except KeyError as exc:
            raise ProtocolError(f"predict_noise reply missing {exc}") from exc
        if pred.eps_cond.shape != noised.shape or pred.eps_uncond.shape != noised.shape:
            raise ProtocolError("noise prediction shape does not match the noised input")
        return pred

    def encode_vjp(self, working_grad: np.ndarray, images: np.ndarray) -> np.ndarray:
        self._check_images(np.asarray(images))
        payload = {
            "latent_grad": encode_tensor(working_grad),
            "image": encode_tensor(images),
        }
        reply = self._request("POST", "/v1/encode_grad", payload)
        grad = decode_tensor(reply["image_grad"])
        if grad.shape != np.asarray(images).shape:
            raise ProtocolError(f"image_grad shape {grad.shape} != images {np.asarray(images).shape}")
        return grad


def diffusion_backend(endpoint: str, model_id: str, **kwargs) -> DiffusionBackend:
    """Construct the remote backend client. Performs no I/O until used."""
    return DiffusionBackend(endpoint, model_id, **kwargs)
