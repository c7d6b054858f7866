from .ArtifactRepository import *  # noqa
from .storage import *  # noqa
from .TrajectoryRepository import *  # noqa
