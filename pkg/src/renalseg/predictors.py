"""Predictor backends and the external-process wire protocol.

Internal predictor API: ``predict(stage_id, patch, origin, num_classes,
case_id)`` where ``patch`` is [channels, px, py, pz] float32 and ``origin``
is the patch's lower corner on the stage's full inference grid. Responses
are [num_classes, px, py, pz] float32 probability maps.

Wire protocol (external-process kind): each request is one JSON line
``{request_id, case_id, stage_id, shape, origin, spacing, dtype: "f32le",
num_classes, channels}`` followed by ``channels * prod(shape)`` little-endian
float32 values in x-fastest order; each response is one JSON line
``{request_id, shape, num_classes, dtype: "f32le"}`` followed by
``num_classes`` concatenated probability blobs in class order. Transport is
the child process's stdin/stdout, or a local socket (``unix:<path>`` /
``tcp:<host>:<port>`` endpoint).
"""
from __future__ import annotations

import json
import logging
import shlex
import socket
import subprocess
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .errors import PredictorError
from .fileio import load_volume
from .raw import decode_blob, encode_blob
from .volume import BACKGROUND, LabelVolume, TUMOR

log = logging.getLogger(__name__)

SUM_TOLERANCE = 1e-3

# full-grid class codes -> fine-stage binary channels
FINE_TUMOR_STAGE = "fine_tumor"


class Predictor(Protocol):
    def predict(self, stage_id: str, patch: np.ndarray, origin: Sequence[int],
                num_classes: int, case_id: str) -> np.ndarray: ...


@dataclass(frozen=True)
class InjectedComponent:
    """A spurious structure painted over predictor responses for rule testing."""

    stages: tuple[str, ...]
    class_id: int          # class code on the stage's own channel layout
    center: tuple[float, float, float]
    kind: str = "sphere"   # "sphere" (size = radius) or "box" (size = full extents)
    size: tuple[float, float, float] | float = 3.0

    def mask_for_region(self, origin: Sequence[int], shape: Sequence[int]) -> np.ndarray:
        coords = np.meshgrid(*[np.arange(o, o + n, dtype=np.float64)
                               for o, n in zip(origin, shape)], indexing="ij")
        if self.kind == "sphere":
            r = float(self.size if np.isscalar(self.size) else self.size[0])
            dist2 = sum((c - v) ** 2 for c, v in zip(coords, self.center))
            return dist2 <= r * r
        if self.kind == "box":
            half = np.asarray(self.size, dtype=np.float64) / 2.0
            inside = np.ones(tuple(shape), dtype=bool)
            for ax in range(3):
                inside &= np.abs(coords[ax] - self.center[ax]) < half[ax]
            return inside
        raise ValueError(f"unknown injected component kind {self.kind!r}")


def _labels_to_stage_classes(labels: np.ndarray, stage_id: str, num_classes: int) -> np.ndarray:
    """Map full 5-class codes onto a stage's channel layout."""
    if num_classes == 2 or stage_id == FINE_TUMOR_STAGE:
        return (labels == TUMOR).astype(np.uint8)
    return labels


class StubPredictor:
    """Truth-backed oracle predictor: ideal, noisy, or with injected components.

    Noise is a fixed per-stage field over the full grid (seeded), so
    overlapping patches see consistent values and runs are reproducible.
    """

    def __init__(self, truth: LabelVolume, *, noise_sigma: float = 0.0,
                 inject: Sequence[InjectedComponent] = (), seed: int = 0):
        self.truth = truth
        self.noise_sigma = float(noise_sigma)
        self.inject = tuple(inject)
        self.seed = int(seed)
        self._noise: dict[tuple[str, int], np.ndarray] = {}

    def with_truth(self, truth: LabelVolume) -> "StubPredictor":
        """Same oracle rebound to another grid (noise fields regenerate there)."""
        return StubPredictor(truth, noise_sigma=self.noise_sigma, inject=self.inject,
                             seed=self.seed)

    def _noise_field(self, stage_id: str, num_classes: int) -> np.ndarray:
        key = (stage_id, num_classes)
        if key not in self._noise:
            stage_offset = {"coarse_i": 1, "coarse_ii": 2, FINE_TUMOR_STAGE: 3}.get(stage_id, 9)
            rng = np.random.default_rng((self.seed + 1) * 1000003 + stage_offset)
            self._noise[key] = rng.normal(
                0.0, 1.0, (num_classes,) + self.truth.shape).astype(np.float32)
        return self._noise[key]

    def predict(self, stage_id: str, patch: np.ndarray, origin: Sequence[int],
                num_classes: int, case_id: str) -> np.ndarray:
        shape = tuple(patch.shape[1:])
        grid = self.truth.shape
        out = np.zeros((num_classes,) + shape, dtype=np.float64)
        out[BACKGROUND] = 1.0  # out-of-grid padding answers background

        lo = [max(0, int(o)) for o in origin]
        hi = [min(g, int(o) + s) for g, o, s in zip(grid, origin, shape)]
        if any(l >= h for l, h in zip(lo, hi)):
            return out.astype(np.float32)
        src = tuple(slice(l, h) for l, h in zip(lo, hi))
        dst = tuple(slice(l - int(o), h - int(o)) for l, h, o in zip(lo, hi, origin))

        labels = self.truth.labels[src].copy()
        stage_labels = _labels_to_stage_classes(labels, stage_id, num_classes)
        for component in self.inject:
            if stage_id not in component.stages:
                continue
            region_mask = component.mask_for_region([s.start for s in src],
                                                    [s.stop - s.start for s in src])
            stage_labels = np.where(region_mask, component.class_id, stage_labels)

        one_hot = np.zeros((num_classes,) + stage_labels.shape, dtype=np.float64)
        for c in range(num_classes):
            one_hot[c] = stage_labels == c
        if self.noise_sigma > 0:
            noise = self._noise_field(stage_id, num_classes)[(slice(None),) + src]
            one_hot = np.clip(one_hot + self.noise_sigma * noise, 0.0, 1.0)
            one_hot /= np.maximum(one_hot.sum(axis=0, keepdims=True), 1e-8)
        out[(slice(None),) + dst] = one_hot
        return out.astype(np.float32)


class FileBackedPredictor:
    """Serves patches from per-case probability maps stored as
    ``{case_id}_{stage}_{class}.nii.gz`` on the stage's inference grid."""

    def __init__(self, directory: str | Path):
        self.directory = Path(directory)
        self._cache: dict[tuple[str, str, int], np.ndarray] = {}

    def _load(self, case_id: str, stage_id: str, num_classes: int) -> np.ndarray:
        key = (case_id, stage_id, num_classes)
        if key not in self._cache:
            channels = []
            for c in range(num_classes):
                stem = self.directory / f"{case_id}_{stage_id}_{c}"
                for suffix in (".nii.gz", ".nii"):
                    path = stem.with_name(stem.name + suffix)
                    if path.exists():
                        channels.append(load_volume(path).voxels)
                        break
                else:
                    raise PredictorError(f"missing probability map {stem}.nii[.gz]")
            self._cache[key] = np.stack(channels, axis=0)
        return self._cache[key]

    def predict(self, stage_id: str, patch: np.ndarray, origin: Sequence[int],
                num_classes: int, case_id: str) -> np.ndarray:
        maps = self._load(case_id, stage_id, num_classes)
        grid = maps.shape[1:]
        shape = tuple(patch.shape[1:])
        out = np.zeros((num_classes,) + shape, dtype=np.float32)
        out[BACKGROUND] = 1.0
        lo = [max(0, int(o)) for o in origin]
        hi = [min(g, int(o) + s) for g, o, s in zip(grid, origin, shape)]
        if any(l >= h for l, h in zip(lo, hi)):
            return out
        src = (slice(None),) + tuple(slice(l, h) for l, h in zip(lo, hi))
        dst = (slice(None),) + tuple(slice(l - int(o), h - int(o))
                                     for l, h, o in zip(lo, hi, origin))
        out[dst] = maps[src]
        return out


class OffsetPredictor:
    """Shifts patch origins into full-grid coordinates for ROI sub-volumes."""

    def __init__(self, base: Predictor, offset: Sequence[int]):
        self.base = base
        self.offset = tuple(int(v) for v in offset)

    def predict(self, stage_id, patch, origin, num_classes, case_id):
        shifted = tuple(o + d for o, d in zip(origin, self.offset))
        return self.base.predict(stage_id, patch, shifted, num_classes, case_id)


def encode_request(header: dict, blobs: Sequence[np.ndarray]) -> bytes:
    line = json.dumps(header, sort_keys=True) + "\n"
    return line.encode("utf-8") + b"".join(encode_blob(b) for b in blobs)


class _StdioTransport:
    def __init__(self, command: str):
        self.proc = subprocess.Popen(shlex.split(command), stdin=subprocess.PIPE,
                                     stdout=subprocess.PIPE)

    def send(self, data: bytes) -> None:
        self.proc.stdin.write(data)
        self.proc.stdin.flush()

    def read_line(self) -> bytes:
        line = self.proc.stdout.readline()
        if not line:
            raise PredictorError("predictor process closed its stdout")
        return line

    def read_exact(self, n: int) -> bytes:
        data = self.proc.stdout.read(n)
        if data is None or len(data) != n:
            raise PredictorError(f"short read from predictor ({0 if data is None else len(data)}/{n})")
        return data

    def close(self) -> None:
        if self.proc.poll() is None:
            self.proc.stdin.close()
            self.proc.wait(timeout=10)


class _SocketTransport:
    def __init__(self, endpoint: str):
        if endpoint.startswith("unix:"):
            self.sock = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
            self.sock.connect(endpoint[len("unix:"):])
        elif endpoint.startswith("tcp:"):
            host, port = endpoint[len("tcp:"):].rsplit(":", 1)
            self.sock = socket.create_connection((host, int(port)))
        else:
            raise PredictorError(f"unsupported socket endpoint {endpoint!r}")
        self._buf = b""

    def send(self, data: bytes) -> None:
        self.sock.sendall(data)

    def read_line(self) -> bytes:
        while b"\n" not in self._buf:
            chunk = self.sock.recv(65536)
            if not chunk:
                raise PredictorError("predictor socket closed")
            self._buf += chunk
        line, self._buf = self._buf.split(b"\n", 1)
        return line + b"\n"

    def read_exact(self, n: int) -> bytes:
        while len(self._buf) < n:
            chunk = self.sock.recv(65536)
            if not chunk:
                raise PredictorError("predictor socket closed mid-payload")
            self._buf += chunk
        data, self._buf = self._buf[:n], self._buf[n:]
        return data

    def close(self) -> None:
        self.sock.close()


class ExternalProcessPredictor:
    """Wire-protocol client; endpoint is a command line or unix:/tcp: address."""

    def __init__(self, endpoint: str, capacity: int = 1):
        self.endpoint = endpoint
        self.capacity = max(1, int(capacity))
        self._transport = None
        self._lock = threading.Lock()
        self._sem = threading.Semaphore(self.capacity)
        self._next_id = 0

    def _ensure_transport(self):
        if self._transport is None:
            if self.endpoint.startswith(("unix:", "tcp:")):
                self._transport = _SocketTransport(self.endpoint)
            else:
                self._transport = _StdioTransport(self.endpoint)
        return self._transport

    def predict(self, stage_id: str, patch: np.ndarray, origin: Sequence[int],
                num_classes: int, case_id: str) -> np.ndarray:
        shape = tuple(int(n) for n in patch.shape[1:])
        with self._sem:
            with self._lock:
                transport = self._ensure_transport()
                self._next_id += 1
                request_id = self._next_id
                header = {"request_id": request_id, "case_id": case_id,
                          "stage_id": stage_id, "shape": list(shape),
                          "origin": [int(v) for v in origin],
                          "spacing": [1.0, 1.0, 1.0], "dtype": "f32le",
                          "num_classes": int(num_classes),
                          "channels": int(patch.shape[0])}
                transport.send(encode_request(header, list(patch)))
                line = transport.read_line()
                try:
                    response = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise PredictorError(f"unparseable response header: {exc}") from exc
                if response.get("error"):
                    raise PredictorError(f"predictor error: {response['error']}")
                if response.get("request_id") != request_id:
                    raise PredictorError(f"response id {response.get('request_id')} != "
                                         f"request id {request_id}")
                resp_shape = tuple(response.get("shape", shape))
                resp_classes = int(response.get("num_classes", num_classes))
                if resp_shape != shape or resp_classes != num_classes:
                    raise PredictorError(f"response geometry {resp_shape}x{resp_classes} != "
                                         f"request {shape}x{num_classes}")
                n = int(np.prod(shape))
                payload = transport.read_exact(num_classes * n * 4)
        channels = [decode_blob(payload[c * n * 4:(c + 1) * n * 4], shape)
                    for c in range(num_classes)]
        probs = np.stack(channels, axis=0).astype(np.float32)
        sums = probs.sum(axis=0)
        if np.abs(sums - 1.0).max() > SUM_TOLERANCE:
            log.warning("renormalizing predictor response for %s (max |sum-1| = %.3g)",
                        stage_id, float(np.abs(sums - 1.0).max()))
            probs = probs / np.maximum(sums, 1e-8)
        return probs

    def close(self) -> None:
        if self._transport is not None:
            self._transport.close()
            self._transport = None
