"""Estimator-style facade over the deformation engine.

``CageDeformer`` follows the sklearn contract: constructor stores
hyperparameters verbatim, ``fit`` optimizes the cage against a target
silhouette, ``transform`` pushes splat clouds through the fitted
deformation, and ``get_params``/``set_params`` come from BaseEstimator so
the deformer composes with sklearn tooling (clone, grid search over e.g.
cage resolution or learning rate).
"""

import numpy as np
from sklearn.base import BaseEstimator

from .cage import CageMesh, build_cage
from .camera import CameraView
from .coords import compute_tables
from .optimize import DeformJob, OptimConfig, run
from .raster import SilhouetteMask
from .splats import SplatCloud
from .transport import export_deformed, transport
from .validation import check_mask


class CageDeformer(BaseEstimator):
    """Fit a cage deformation to a target silhouette; transform splat clouds.

    Parameters mirror OptimConfig plus cage construction and the sketch
    view; all are plain constructor attributes per the sklearn convention.
    """

    def __init__(
        self,
        elevation=0.0,
        azimuth=0.0,
        radius=4.0,
        fov_y=45.0,
        image_size=256,
        look_at=(0.0, 0.0, 0.0),
        cage=None,
        cage_resolution=96,
        cage_offset_cells=4.0,
        cage_vertices=500,
        iterations=2000,
        learning_rate=0.002,
        alpha=10000.0,
        num_random_views=4,
        seed=0,
        parameterization="decomposed",
        guidance=None,
    ):
        self.elevation = elevation
        self.azimuth = azimuth
        self.radius = radius
        self.fov_y = fov_y
        self.image_size = image_size
        self.look_at = look_at
        self.cage = cage
        self.cage_resolution = cage_resolution
        self.cage_offset_cells = cage_offset_cells
        self.cage_vertices = cage_vertices
        self.iterations = iterations
        self.learning_rate = learning_rate
        self.alpha = alpha
        self.num_random_views = num_random_views
        self.seed = seed
        self.parameterization = parameterization
        self.guidance = guidance

    def _view(self):
        return CameraView(
            elevation=self.elevation,
            azimuth=self.azimuth,
            radius=self.radius,
            fov_y=self.fov_y,
            width=self.image_size,
            height=self.image_size,
            look_at=tuple(self.look_at),
        ).validate()

    def _config(self):
        return OptimConfig(
            iterations=self.iterations,
            learning_rate=self.learning_rate,
            alpha=self.alpha,
            num_random_views=self.num_random_views if self.guidance is not None else 0,
            seed=self.seed,
            parameterization=self.parameterization,
        ).validate()

    def fit(self, X, y, **run_kwargs):
        """Optimize the deformation of cloud X toward target silhouette y.

        X: SplatCloud. y: SilhouetteMask or (H, W) array in [0, 1] at the
        configured view size.
        """
        if not isinstance(X, SplatCloud):
            raise TypeError("X must be a SplatCloud")
        target = y.pixels if isinstance(y, SilhouetteMask) else check_mask(y, "y")
        view = self._view()

        if isinstance(self.cage, CageMesh):
            cage = self.cage
        else:
            cage = build_cage(
                X.mu,
                resolution=self.cage_resolution,
                offset_cells=self.cage_offset_cells,
                target_vertices=self.cage_vertices,
            )

        job = DeformJob(
            cloud=X,
            cage=cage,
            sketch_view=view,
            target_mask=SilhouetteMask(target),
            config=self._config(),
            guidance=self.guidance,
        )
        result = run(job, **run_kwargs)

        self.cage_ = cage
        self.tables_ = job.tables
        self.system_ = job.system
        self.result_ = result
        self.cage_def_ = result.cage_def
        self.params_ = result.params
        self.loss_history_ = result.loss_history
        self.n_iterations_ = result.iterations_run
        return self

    def transform(self, X=None) -> SplatCloud:
        """Deformed copy of X (default: the cloud seen by fit)."""
        self._check_fitted()
        if X is None or X is self.result_.splats.source:
            return export_deformed(self.result_.splats)
        if not isinstance(X, SplatCloud):
            raise TypeError("X must be a SplatCloud")
        tables = compute_tables(self.cage_, X.mu)
        return export_deformed(transport(X, tables, self.cage_def_))

    def fit_transform(self, X, y=None, **fit_params):
        if y is None:
            raise ValueError("fit_transform requires a target silhouette y")
        return self.fit(X, y, **fit_params).transform()

    def score(self, X=None, y=None):
        """Negative final silhouette loss (higher is better)."""
        self._check_fitted()
        if y is None:
            return -float(self.loss_history_[-1][1])
        from .optimize import silhouette_loss

        target = y.pixels if isinstance(y, SilhouetteMask) else np.asarray(y, dtype=np.float64)
        return -silhouette_loss(self.result_.final_mask.pixels, target)

    def _check_fitted(self):
        if not hasattr(self, "result_"):
            raise RuntimeError("this CageDeformer instance is not fitted yet")
