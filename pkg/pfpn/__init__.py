"""Top-level package for panoptic-fpn-kit."""

from pfpn.exceptions import *
from pfpn.config import *
from pfpn.utils import *
from pfpn.tensor_core import *
from pfpn.semantic_branch import *
from pfpn.losses import *
from pfpn.fusion import *
from pfpn.metrics import *
from pfpn.panoptic_io import *
from pfpn.profiler import *
from pfpn.train_demo import *
from pfpn.oracles import *

__author__ = """Biplov Bhandari"""
__email__ = "bionicbiplov45@gmail.com"
__version__ = "0.1.0"
