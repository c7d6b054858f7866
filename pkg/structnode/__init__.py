from .benchsys import *  # noqa
from .diffcore import *  # noqa
from .ekf import *  # noqa
from .errors import *  # noqa
from .experiment import *  # noqa
from .nets import *  # noqa
from .observers import *  # noqa
from .odesolve import *  # noqa
from .priors import *  # noqa
from .trainer import *  # noqa
