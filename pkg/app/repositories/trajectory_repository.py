import json
import os
from collections import defaultdict
from typing import Dict, Iterable, List, Optional

from app.exceptions import TrajectoryParseError
from app.models.trajectory import TrajectorySet, from_record
from app.repositories.scene_repository import atomic_write


class TrajectoryRepository:
    """Trajectory JSON-Lines files, one record per (scene, mode)"""

    def write(self, filepath: str, sets: Iterable[TrajectorySet], config_hash: Optional[str] = None) -> int:
        """One record per mode; `config_hash` is stamped on every record when given"""
        parent = os.path.dirname(filepath)
        if parent:
            os.makedirs(parent, exist_ok=True)
        count = 0
        with atomic_write(filepath) as tmp:
            with open(tmp, 'w') as f:
                for trajectory_set in sets:
                    for record in trajectory_set.to_records():
                        if config_hash is not None:
                            record['config_hash'] = config_hash
                        f.write(json.dumps(record, sort_keys=True, separators=(',', ':')) + '\n')
                        count += 1
        return count

    def read(self, filepath: str) -> Dict[str, TrajectorySet]:
        """Group records by scene id, modes ordered by their index"""
        if not os.path.exists(filepath):
            raise FileNotFoundError(f"Trajectory file not found at: {filepath}")
        grouped: Dict[str, List] = defaultdict(list)
        with open(filepath, 'r') as f:
            for line_number, line in enumerate(f, start=1):
                if not line.strip():
                    continue
                try:
                    scene_id, mode, traj = from_record(json.loads(line))
                except Exception as e:
                    raise TrajectoryParseError(filepath, line_number, str(e))
                grouped[scene_id].append((mode, traj))
        return {scene_id: TrajectorySet(tuple(t for _, t in sorted(modes, key=lambda x: x[0])), scene_id)
                for scene_id, modes in grouped.items()}
