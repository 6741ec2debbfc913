import hashlib
import json
import logging
import os
from contextlib import contextmanager
from typing import Iterator, List, Optional

from app.config import SCENE_MANIFEST
from app.exceptions import ConfigMismatch
from app.models.scene import Scene

logger = logging.getLogger(__name__)


def dump_json(data) -> bytes:
    return json.dumps(data, sort_keys=True, separators=(',', ':')).encode('utf-8')


@contextmanager
def atomic_write(filepath: str) -> Iterator[str]:
    """Yield a temporary path that replaces `filepath` only if the block succeeds"""
    tmp = f"{filepath}.tmp"
    try:
        yield tmp
        os.replace(tmp, filepath)
    except Exception:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


class SceneRepository:
    """Directory of scene JSON documents plus a manifest carrying the config hash"""

    def __init__(self, scenes_dir: str):
        self.scenes_dir = scenes_dir

    @property
    def manifest_path(self) -> str:
        return os.path.join(self.scenes_dir, SCENE_MANIFEST)

    def save_corpus(self, scenes: List[Scene], config_hash: str, provenance: Optional[dict] = None) -> dict:
        """Write every scene and then the manifest; `provenance` records unhashed generation settings"""
        os.makedirs(self.scenes_dir, exist_ok=True)
        entries = []
        for scene in scenes:
            payload = dump_json(scene.to_dict())
            filename = f"{scene.scene_id}.json"
            with atomic_write(os.path.join(self.scenes_dir, filename)) as tmp:
                with open(tmp, 'wb') as f:
                    f.write(payload)
            entries.append({
                'id': scene.scene_id,
                'file': filename,
                'sha256': hashlib.sha256(payload).hexdigest(),
                'template': scene.template.value,
            })
        manifest = {'config_hash': config_hash, 'count': len(entries), 'scenes': entries,
                    'provenance': dict(provenance or {})}
        with atomic_write(self.manifest_path) as tmp:
            with open(tmp, 'w') as f:
                json.dump(manifest, f, sort_keys=True, indent=2)
        return manifest

    def load_manifest(self) -> dict:
        if not os.path.exists(self.manifest_path):
            raise FileNotFoundError(f"Scene manifest not found at: {self.manifest_path}")
        try:
            with open(self.manifest_path, 'r') as f:
                return json.load(f)
        except Exception as e:
            raise RuntimeError(f"Error loading scene manifest {self.manifest_path}: {e}")

    def load_scene(self, filename: str, sha256: Optional[str] = None) -> Scene:
        filepath = os.path.join(self.scenes_dir, filename)
        if not os.path.exists(filepath):
            raise FileNotFoundError(f"Scene file not found at: {filepath}")
        with open(filepath, 'rb') as f:
            payload = f.read()
        if sha256 is not None and hashlib.sha256(payload).hexdigest() != sha256:
            raise RuntimeError(f"Scene file {filepath} does not match its manifest checksum")
        try:
            return Scene.from_dict(json.loads(payload))
        except Exception as e:
            raise RuntimeError(f"Error loading scene file {filepath}: {e}")

    def load_corpus(self, expected_hash: Optional[str] = None, d_thresh: Optional[float] = None) -> List[Scene]:
        """
        All scenes in manifest order; a differing config hash raises ConfigMismatch.

        gt clearance is only guaranteed for the d_thresh the corpus was generated
        with, so a larger `d_thresh` is logged as a warning.
        """
        manifest = self.load_manifest()
        generated = manifest.get('provenance', {}).get('d_thresh')
        if d_thresh is not None and generated is not None and d_thresh > generated:
            logger.warning("d_thresh %.3g exceeds the %.3g the corpus was generated with; "
                           "gt clearance is not guaranteed", d_thresh, generated)
        if expected_hash is not None and manifest['config_hash'] != expected_hash:
            raise ConfigMismatch(
                f"scene corpus {self.scenes_dir} was generated under config {manifest['config_hash'][:12]}, "
                f"expected {expected_hash[:12]}")
        return [self.load_scene(entry['file'], entry.get('sha256')) for entry in manifest['scenes']]
