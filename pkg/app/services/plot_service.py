import logging
import os
from typing import Optional

import matplotlib

matplotlib.use('Agg')
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from app.models.scene import Scene  # noqa: E402
from app.models.trajectory import TrajectorySet  # noqa: E402

logger = logging.getLogger(__name__)

SVG_HASH_SALT = 'diver-plot'
MODE_COLORMAP = 'tab10'


class PlotService:
    """Static SVG rendering of a scene with its reference and predicted trajectories"""

    def __init__(self, d_thresh: float):
        self.d_thresh = d_thresh

    def _draw_scene(self, ax, scene: Scene) -> None:
        for polyline in scene.map_polylines:
            style = dict(color='0.55', lw=0.8, ls='--') if polyline.kind == 'centerline' else dict(color='0.2', lw=1.2)
            ax.plot(polyline.points[:, 0], polyline.points[:, 1], **style)

        for agent in scene.agents:
            ax.add_patch(plt.Circle((agent.position.x, agent.position.y), agent.radius,
                                    facecolor='0.8', edgecolor='0.3', lw=0.6))

        field = scene.safety_field
        grid = field.grid
        if min(grid.shape) >= 2 and grid.min() < self.d_thresh < grid.max():
            xs = field.origin.x + np.arange(grid.shape[0]) * field.cell_size
            ys = field.origin.y + np.arange(grid.shape[1]) * field.cell_size
            x, y = np.meshgrid(xs, ys, indexing='ij')
            ax.contour(x, y, grid, levels=[self.d_thresh], colors='crimson', linewidths=0.6)

        for reference in scene.reference_gts:
            ax.plot(reference.points[:, 0], reference.points[:, 1], color='0.4', lw=0.8, alpha=0.6)
        gt = np.vstack([[0.0, 0.0], scene.gt.points])
        ax.plot(gt[:, 0], gt[:, 1], color='black', lw=2.2, label='gt')
        ax.plot(scene.goal.x, scene.goal.y, marker='*', color='black', ms=8)

    def render(self, scene: Scene, predictions: Optional[TrajectorySet], out_path: str) -> str:
        """Write the SVG and return its path; `predictions` may be None or empty"""
        matplotlib.rcParams['svg.hashsalt'] = SVG_HASH_SALT
        fig, ax = plt.subplots(figsize=(8, 6))
        try:
            self._draw_scene(ax, scene)
            if predictions is not None:
                colors = plt.get_cmap(MODE_COLORMAP)
                for index, mode in enumerate(predictions):
                    points = np.vstack([[0.0, 0.0], mode.points])
                    ax.plot(points[:, 0], points[:, 1], color=colors(index % colors.N), lw=1.4,
                            marker='o', ms=2.5, label=f"mode {index}")
            ax.set_aspect('equal')
            ax.set_title(scene.scene_id)
            ax.legend(loc='upper left', fontsize=7)

            parent = os.path.dirname(out_path)
            if parent:
                os.makedirs(parent, exist_ok=True)
            fig.savefig(out_path, format='svg', metadata={'Date': None})
        finally:
            plt.close(fig)
        logger.info("wrote %s", out_path)
        return out_path
