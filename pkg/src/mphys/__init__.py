"""mphys: a particle-based elastoplastic simulator with motion-driven
material parameter estimation.

Modules: material (parameter catalog), constitutive (elastic stress laws),
plasticity (return maps), mpm (the grid solver and trajectories), scene
(declarative scene configuration), motion (rendering, features, losses),
estimate (initialization and optimization), cli (command-line entry points).
"""

__version__ = "0.1.0"

from .material import MaterialClass, MaterialParams  # noqa: F401
from .mpm import Trajectory, simulate  # noqa: F401
from .scene import SceneConfig, parse_scene, parse_scene_file  # noqa: F401
