"""Minimal HTTP results viewer: overlays and metrics for a trained model.

Endpoints:
    GET /                    HTML page listing images, shows a chosen overlay
    GET /images              JSON array of image ids
    GET /overlay/{id}?stride=s   overlay PNG (computed on demand, cached)
    GET /metrics/{id}?stride=s   JSON metric report (needs ground truth)

Overlays are cached on disk keyed by (image id, stride, weight hash), so a
retrained model can never serve stale results.  Identical concurrent
requests are deduplicated: one segmentation runs, the rest wait and hit
the cache.
"""

from __future__ import annotations

import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from urllib.parse import parse_qs, urlparse

import numpy as np

from . import dataset, inference, metrics, models
from .errors import StateError

_PAGE = """<!DOCTYPE html>
<html><head><title>sst viewer</title></head>
<body>
<h1>sst viewer — {model}</h1>
<p>stride {stride}; click an image id to render its overlay.</p>
<ul>
{items}
</ul>
</body></html>
"""


class _Handler(BaseHTTPRequestHandler):
    def log_message(self, fmt, *args):  # keep request noise out of stdout
        pass

    def do_GET(self):
        try:
            self._route()
        except BrokenPipeError:
            pass
        except Exception as exc:  # never kill the worker thread
            self._send_json({"error": str(exc)}, status=500)

    # -- routing ----------------------------------------------------------

    def _route(self):
        url = urlparse(self.path)
        parts = [p for p in url.path.split("/") if p]
        if not parts:
            return self._index()
        if parts == ["images"]:
            return self._send_json(self.server.image_ids)
        if len(parts) == 2 and parts[0] in ("overlay", "metrics"):
            image_id = parts[1]
            if image_id not in self.server.image_ids:
                return self._send_json({"error": f"unknown image {image_id!r}"}, 404)
            stride = self._parse_stride(parse_qs(url.query))
            if stride is None:
                return  # 400 already sent
            if parts[0] == "overlay":
                return self._overlay(image_id, stride)
            return self._metrics(image_id, stride)
        return self._send_json({"error": f"no such endpoint {url.path!r}"}, 404)

    def _parse_stride(self, query):
        raw = query.get("stride", [str(self.server.default_stride)])[0]
        try:
            stride = int(raw)
        except ValueError:
            stride = -1
        if not 1 <= stride <= self.server.model.patch_size:
            self._send_json(
                {"error": f"stride must be an integer in "
                          f"[1, {self.server.model.patch_size}], got {raw!r}"},
                status=400,
            )
            return None
        return stride

    # -- endpoints --------------------------------------------------------

    def _index(self):
        items = "\n".join(
            f'<li><a href="/overlay/{i}?stride={self.server.default_stride}">{i}</a></li>'
            for i in self.server.image_ids
        )
        page = _PAGE.format(model=self.server.model.name,
                            stride=self.server.default_stride, items=items)
        body = page.encode()
        self.send_response(200)
        self.send_header("Content-Type", "text/html; charset=utf-8")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def _overlay(self, image_id, stride):
        paths, hit = self.server.ensure_artifacts(image_id, stride)
        data = paths["overlay"].read_bytes()
        self.send_response(200)
        self.send_header("Content-Type", "image/png")
        self.send_header("Content-Length", str(len(data)))
        self.send_header("X-SST-Cache", "hit" if hit else "miss")
        self.end_headers()
        self.wfile.write(data)

    def _metrics(self, image_id, stride):
        img = self.server.load_image(image_id)
        if img.mask is None:
            return self._send_json(
                {"error": f"image {image_id!r} has no ground truth"}, 404
            )
        paths, hit = self.server.ensure_artifacts(image_id, stride)
        mask = inference.read_mask_png(paths["mask"])
        probs = inference.read_probability_png(paths["prob"])
        counts = metrics.confusion(mask, img.mask)
        ap = metrics.ap_from_arrays(probs.astype(np.float64).ravel(),
                                    img.mask.ravel())
        report = metrics.basic_metrics(counts, ap=ap)
        self._send_json(
            {"id": image_id, "stride": stride, "cache": "hit" if hit else "miss",
             "counts": {"tp": counts.tp, "tn": counts.tn,
                        "fp": counts.fp, "fn": counts.fn},
             "metrics": report.as_dict()},
            extra_headers={"X-SST-Cache": "hit" if hit else "miss"},
        )

    def _send_json(self, payload, status=200, extra_headers=None):
        body = (json.dumps(payload, indent=2) + "\n").encode()
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        for key, value in (extra_headers or {}).items():
            self.send_header(key, value)
        self.end_headers()
        self.wfile.write(body)


class ViewerServer(ThreadingHTTPServer):
    """HTTP server bound to one trained model and one image root."""

    daemon_threads = True

    def __init__(self, address, model, root, cache_dir, default_stride=None,
                 half_size=False, workers=1):
        super().__init__(address, _Handler)
        self.model = model
        self.root = root
        self.half_size = half_size
        self.workers = workers
        self.default_stride = default_stride or model.patch_size
        self.cache_dir = Path(cache_dir)
        self.cache_dir.mkdir(parents=True, exist_ok=True)
        self.image_ids = dataset.list_image_ids(root)
        self.weight_hash = models.weight_hash(model)
        self.compute_count = 0          # segmentations actually run (for tests)
        self._master_lock = threading.Lock()
        self._key_locks = {}

    def load_image(self, image_id):
        return dataset.load_pair(self.root, image_id, half_size=self.half_size)

    def _paths(self, image_id, stride):
        base = self.cache_dir / f"{image_id}-s{stride}-{self.weight_hash[:12]}"
        return {
            "overlay": base.with_suffix(".overlay.png"),
            "mask": base.with_suffix(".mask.png"),
            "prob": base.with_suffix(".prob.png"),
            "sidecar": base.with_suffix(".json"),
        }

    def ensure_artifacts(self, image_id, stride):
        """Compute (or reuse) the artifacts for one (image, stride) pair.

        Returns (paths, cache_hit).  A per-key lock guarantees identical
        concurrent requests trigger exactly one segmentation.
        """
        key = (image_id, stride)
        with self._master_lock:
            lock = self._key_locks.setdefault(key, threading.Lock())
        with lock:
            paths = self._paths(image_id, stride)
            if all(p.is_file() for p in paths.values()):
                sidecar = json.loads(paths["sidecar"].read_text())
                sidecar["cache_hits"] = sidecar.get("cache_hits", 0) + 1
                paths["sidecar"].write_text(json.dumps(sidecar, indent=2) + "\n")
                return paths, True
            img = self.load_image(image_id)
            result = inference.timed_segment(self.model, img, stride,
                                             workers=self.workers)
            self.compute_count += 1
            overlay = inference.render_overlay(img.rgb, result.mask, img.mask)
            inference.write_overlay_png(paths["overlay"], overlay)
            inference.write_mask_png(paths["mask"], result.mask)
            inference.write_probability_png(paths["prob"], result.probabilities)
            sidecar = inference.write_sidecar(paths["sidecar"], self.model.name, result)
            sidecar["cache_hits"] = 0
            paths["sidecar"].write_text(json.dumps(sidecar, indent=2) + "\n")
            return paths, False


def build_server(model, root, cache_dir, host="127.0.0.1", port=0,
                 default_stride=None, half_size=False, workers=1):
    """Create (but do not start) a viewer server; port 0 picks a free port."""
    if not model.trained:
        raise StateError(f"model {model.name!r} has no weights; train it first")
    return ViewerServer((host, port), model, root, cache_dir,
                        default_stride=default_stride, half_size=half_size,
                        workers=workers)
