"""The discrete lateral action set shared by every policy."""
from enum import IntEnum

from lanebench.sim import LEFT, RIGHT


class Action(IntEnum):
    KEEP = 0
    LEFT = 1
    RIGHT = 2


DIRECTION = {Action.LEFT: LEFT, Action.RIGHT: RIGHT}
N_ACTIONS = len(Action)
