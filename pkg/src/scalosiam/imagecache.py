"""On-disk cache of rendered TFR images.

Each entry is an 8-bit RGB PNG (``round(255 * pixel)``) plus a raw
little-endian float32 sidecar holding the pre-quantization grayscale plane,
which is what training reads. ``index.json`` maps a cache key to its files.
"""
from __future__ import annotations

import hashlib
import json
import logging
from pathlib import Path

import numpy as np

from .audio import load_wav, resample
from .autodiff.checkpoint import atomic_write
from .tfr import TfrImage, clip_to_image, morse_filter_bank

log = logging.getLogger(__name__)


def entry_key(source_id, digest):
    return hashlib.sha256(f"{source_id}\0{digest}".encode()).hexdigest()[:24]


class ImageCache:
    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.index_path = self.root / "index.json"
        self.index = json.loads(self.index_path.read_text()) if self.index_path.exists() else {}

    def __contains__(self, item):
        source_id, digest = item
        key = entry_key(source_id, digest)
        return key in self.index and (self.root / self.index[key]["raw"]).exists()

    def __len__(self):
        return len(self.index)

    def put(self, image):
        from PIL import Image

        key = entry_key(image.source_id, image.digest)
        gray = np.ascontiguousarray(image.gray, dtype="<f4")
        raw_name, png_name = f"{key}.f32", f"{key}.png"
        atomic_write(self.root / raw_name, gray.tobytes())
        rgb = np.round(255 * np.clip(image.pixels, 0, 1)).astype(np.uint8)
        tmp = self.root / f".tmp-{png_name}"
        Image.fromarray(rgb, "RGB").save(tmp, format="PNG")
        tmp.replace(self.root / png_name)
        self.index[key] = {
            "source_id": image.source_id,
            "kind": image.kind,
            "digest": image.digest,
            "size": int(gray.shape[0]),
            "raw": raw_name,
            "png": png_name,
        }

    def get(self, source_id, digest):
        meta = self.index[entry_key(source_id, digest)]
        n = meta["size"]
        gray = np.fromfile(self.root / meta["raw"], dtype="<f4").reshape(n, n)
        return TfrImage.from_gray(gray, source_id, meta["kind"], digest)

    def flush(self):
        atomic_write(self.index_path, json.dumps(self.index, indent=1, sort_keys=True), mode="w")


def populate(manifest, config, cache, rate=None):
    """Render every manifest clip into ``cache``; returns ``(computed, hits)``."""
    digest = config.digest()
    computed = hits = 0
    banks = {}
    for path in manifest.all_paths():
        if (path, digest) in cache:
            hits += 1
            continue
        try:
            clip = load_wav(path)
            if rate and clip.sample_rate != rate:
                clip = resample(clip, rate)
            bank = None
            if config.kind == "scalogram":
                sig = (len(clip), clip.sample_rate)
                if sig not in banks:
                    banks[sig] = morse_filter_bank(config.morse, *sig)
                bank = banks[sig]
            clip.source_id = path
            cache.put(clip_to_image(clip, config, bank))
        except Exception as exc:
            raise RuntimeError(f"transform failed for {path}: {exc}") from exc
        computed += 1
    cache.flush()
    log.info("tfr cache %s: %d computed, %d hits", config.kind, computed, hits)
    return computed, hits


def load_images(manifest, config, cache):
    """Map each manifest path to its ``[size, size, 3]`` float32 image array."""
    digest = config.digest()
    return {p: cache.get(p, digest).pixels for p in manifest.all_paths()}
